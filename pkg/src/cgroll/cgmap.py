"""Fine-to-coarse mapping: bead pooling, center-of-mass frames, radius edges.

Pooling follows the grouping produced by the partitioner: a bead's embedding
is the mean of its members' embeddings, its weight the sum of member weights,
and two beads are CG-bonded iff any fine bond crosses between their groups.
Bead positions are member centers of mass; under periodic boundaries members
are unwrapped relative to the group's first atom via the minimum image before
averaging, which is valid while the group's extent stays under half the box
(violations raise). Radius edges connect bead pairs closer than a strict
cutoff, through either a brute-force scan or a periodic cell list; both routes
return the identical, lexicographically sorted edge list.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError
from .graphcore import (CoarseTopology, FineTopology, RadiusEdges, Trajectory,
                        minimum_image, wrap_positions)


def pool_beads(topology: FineTopology, atom_embeddings: np.ndarray,
               assignment: np.ndarray) -> CoarseTopology:
    """Build the bead-level topology for a partition.

    Parameters
    ----------
    topology : FineTopology
    atom_embeddings : (N, d) array
        Per-atom embedding vectors (any float data; frozen into the result).
    assignment : (N,) int array
        Dense group ids from the partitioner.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    n = topology.n_atoms
    if assignment.shape != (n,):
        raise ShapeError(f"assignment length {assignment.shape} != {n} atoms")
    emb = np.asarray(atom_embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != n:
        raise ShapeError(f"atom_embeddings must be (N, d), got {emb.shape}")
    m = int(assignment.max()) + 1 if n else 0

    counts = np.bincount(assignment, minlength=m).astype(np.float64)
    sums = np.zeros((m, emb.shape[1]))
    np.add.at(sums, assignment, emb)
    bead_embeddings = sums / counts[:, None]
    bead_weights = np.bincount(assignment, weights=topology.atom_weights, minlength=m)

    crossing = assignment[topology.bonds]
    crossing = crossing[crossing[:, 0] != crossing[:, 1]]
    if crossing.shape[0]:
        lo = np.minimum(crossing[:, 0], crossing[:, 1])
        hi = np.maximum(crossing[:, 0], crossing[:, 1])
        cg_bonds = np.unique(np.stack([lo, hi], axis=1), axis=0)
    else:
        cg_bonds = np.zeros((0, 2), dtype=np.int64)

    # species: 1 for beads that are single-atom molecules ("ions"), else 0
    mol_sizes = np.bincount(topology.molecule_ids)
    first_atom = np.unique(assignment, return_index=True)[1]
    bead_species = (mol_sizes[topology.molecule_ids[first_atom]] == 1).astype(np.int64)

    return CoarseTopology(bead_weights=bead_weights, bead_embeddings=bead_embeddings,
                          cg_bonds=cg_bonds, bead_species=bead_species)


def cg_topology_as_fine(ct: CoarseTopology, box=None) -> FineTopology:
    """View a coarse topology as a particle topology so trajectory IO and
    analysis apply uniformly at the bead level."""
    return FineTopology(
        atom_type_ids=ct.bead_species,
        atom_weights=ct.bead_weights,
        bonds=ct.cg_bonds,
        bond_type_ids=np.zeros(ct.cg_bonds.shape[0], dtype=np.int64),
        box=box,
    )


def _group_first_atom(assignment: np.ndarray) -> np.ndarray:
    return np.unique(assignment, return_index=True)[1]


def map_frame(positions: np.ndarray, assignment: np.ndarray, atom_weights: np.ndarray,
              box=None, wrap: bool = True) -> np.ndarray:
    """Weighted CoM per group; members unwrapped relative to the group's first atom.

    With wrap=True (default) the CoM is wrapped into [0, L); wrap=False keeps
    the unwrapped CoM, which maps unwrapped fine trajectories to unwrapped
    coarse ones.
    """
    return map_frames(positions[None], assignment, atom_weights, box, wrap)[0]


def map_frames(positions: np.ndarray, assignment: np.ndarray, atom_weights: np.ndarray,
               box=None, wrap: bool = True) -> np.ndarray:
    """Vectorized map_frame over a (n_frames, N, 3) stack."""
    x = np.asarray(positions, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    w = np.asarray(atom_weights, dtype=np.float64)
    m = int(assignment.max()) + 1
    first = _group_first_atom(assignment)
    anchor = x[:, first[assignment], :]
    d = minimum_image(x - anchor, box)
    u = anchor + d
    if box is not None:
        half = np.asarray(box) / 2.0
        for g in range(m):
            members = assignment == g
            ext = u[:, members, :].max(axis=1) - u[:, members, :].min(axis=1)
            if np.any(ext >= half):
                bad = int(np.nonzero(np.any(ext >= half, axis=1))[0][0])
                raise NumericalError(
                    f"group {g} diameter exceeds half the box in frame {bad}; "
                    "CoM unwrapping is not well defined"
                )
    wsum = np.bincount(assignment, weights=w, minlength=m)
    onehot = np.zeros((m, assignment.shape[0]))
    onehot[assignment, np.arange(assignment.shape[0])] = w
    com = np.tensordot(u, onehot, axes=(1, 1))        # (frames, 3, M)
    com = np.swapaxes(com, 1, 2) / wsum[None, :, None]
    if wrap and box is not None:
        com = wrap_positions(com, box)
    return com


def map_trajectory(traj: Trajectory, assignment: np.ndarray, ct: CoarseTopology,
                   wrap: bool = True, chunk: int = 8192) -> Trajectory:
    """Map a fine trajectory to the coarse level frame by frame."""
    parts = []
    for lo in range(0, traj.n_frames, chunk):
        parts.append(map_frames(traj.positions[lo:lo + chunk], assignment,
                                traj.topology.atom_weights, traj.box, wrap))
    cg_top = cg_topology_as_fine(ct, box=traj.box)
    return Trajectory(topology=cg_top, positions=np.concatenate(parts, axis=0),
                      record_interval=traj.record_interval, box=traj.box,
                      times=traj.times)


# ----------------------------------------------------------- neighbor search


def _brute_pairs(x: np.ndarray, box, radius: float):
    n = x.shape[0]
    ii, jj = np.triu_indices(n, k=1)
    d = minimum_image(x[ii] - x[jj], box)
    r2 = np.einsum("ij,ij->i", d, d)
    keep = r2 < radius * radius
    return ii[keep], jj[keep]


def _cell_pairs(x: np.ndarray, box, radius: float):
    n = x.shape[0]
    if box is not None:
        xw = wrap_positions(x, box)
        ncell = np.maximum(np.floor(np.asarray(box) / radius).astype(int), 1)
        cell_of = np.minimum((xw / (np.asarray(box) / ncell)).astype(int), ncell - 1)
    else:
        lo = x.min(axis=0)
        extent = np.maximum(x.max(axis=0) - lo, 1e-12)
        ncell = np.maximum(np.floor(extent / radius).astype(int), 1)
        cell_of = np.minimum(((x - lo) / (extent / ncell)).astype(int), ncell - 1)

    cells: dict[tuple, list] = {}
    for i in range(n):
        cells.setdefault(tuple(cell_of[i]), []).append(i)

    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    cand = set()
    for key, members in cells.items():
        for off in offsets:
            nb = tuple(np.array(key) + np.array(off))
            if box is not None:
                nb = tuple(np.mod(nb, ncell))
            other = cells.get(nb)
            if other is None:
                continue
            for i in members:
                for j in other:
                    if i < j:
                        cand.add((i, j))
    if not cand:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    arr = np.array(sorted(cand), dtype=np.int64)
    d = minimum_image(x[arr[:, 0]] - x[arr[:, 1]], box)
    r2 = np.einsum("ij,ij->i", d, d)
    keep = r2 < radius * radius
    return arr[keep, 0], arr[keep, 1]


def build_radius_edges(positions: np.ndarray, box, radius: float,
                       method: str = "auto") -> RadiusEdges:
    """All bead pairs with minimum-image distance strictly below radius.

    method: "auto" (brute force below 200 particles, cell list above),
    "brute", or "cell". Edges are (m, n) with m < n in lexicographic order,
    with displacement x[m] - x[n] under the minimum image.
    """
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeError(f"positions must be (M, 3), got {x.shape}")
    if method == "auto":
        method = "brute" if x.shape[0] < 200 else "cell"
    if method == "brute":
        ii, jj = _brute_pairs(x, box, radius)
    elif method == "cell":
        ii, jj = _cell_pairs(x, box, radius)
    else:
        raise ShapeError(f"unknown neighbor method {method!r}")
    order = np.lexsort((jj, ii))
    ii, jj = ii[order], jj[order]
    disp = minimum_image(x[ii] - x[jj], box)
    dist = np.sqrt(np.einsum("ij,ij->i", disp, disp))
    pairs = np.stack([ii, jj], axis=1) if ii.size else np.zeros((0, 2), dtype=np.int64)
    return RadiusEdges(pairs=pairs, disp=disp if ii.size else np.zeros((0, 3)),
                       dist=dist if ii.size else np.zeros(0))
