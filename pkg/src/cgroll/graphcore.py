"""Shared data model: topologies, frames, trajectories, boxes, and their IO.

Positions are float64 in memory and 32-bit little-endian in trajectory files.
A missing box means open (non-periodic) boundaries; in the trajectory binary a
box of three zeros encodes the same thing. Topology JSON and the trajectory
binary are the only on-disk formats at the fine/coarse particle level.

Trajectory binary layout (all little-endian):

    8 bytes  magic b"CGROLLTR"
    u32      format version (1)
    u32      N particles
    u64      n_frames
    f64      record_interval
    3 x f64  box edge lengths (zeros = open boundary)
    then per frame: 3*N f32 positions (x0 y0 z0 x1 y1 z1 ...)

Frame times are implicit: frame i sits at i * record_interval.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError, ShapeError

TRAJ_MAGIC = b"CGROLLTR"
TRAJ_VERSION = 1


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


def derive_molecule_ids(n_atoms: int, bonds: np.ndarray) -> np.ndarray:
    """Connected components of the bond graph, numbered by first atom index."""
    parent = np.arange(n_atoms)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in np.asarray(bonds, dtype=np.int64).reshape(-1, 2):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(n_atoms)])
    ids = np.empty(n_atoms, dtype=np.int64)
    seen = {}
    for i, r in enumerate(roots):
        if r not in seen:
            seen[r] = len(seen)
        ids[i] = seen[r]
    return ids


@dataclass(frozen=True)
class FineTopology:
    """Atom-level structure; immutable after construction."""

    atom_type_ids: np.ndarray
    atom_weights: np.ndarray
    bonds: np.ndarray
    bond_type_ids: np.ndarray
    molecule_ids: np.ndarray = None
    box: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "atom_type_ids", _frozen(self.atom_type_ids, np.int64))
        object.__setattr__(self, "atom_weights", _frozen(self.atom_weights, np.float64))
        bonds = np.asarray(self.bonds, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "bonds", _frozen(bonds, np.int64))
        object.__setattr__(self, "bond_type_ids", _frozen(self.bond_type_ids, np.int64))
        if self.molecule_ids is None:
            mol = derive_molecule_ids(self.n_atoms, bonds)
        else:
            mol = self.molecule_ids
        object.__setattr__(self, "molecule_ids", _frozen(mol, np.int64))
        if self.box is not None:
            object.__setattr__(self, "box", _frozen(self.box, np.float64))

    @property
    def n_atoms(self) -> int:
        return int(self.atom_type_ids.shape[0])

    def validate(self) -> list[str]:
        problems = []
        n = self.n_atoms
        if self.atom_weights.shape != (n,):
            problems.append(f"weights length {self.atom_weights.shape[0]} != {n} atoms")
        for i, w in enumerate(self.atom_weights):
            if not (w > 0) or not np.isfinite(w):
                problems.append(f"atom weight {i} is not positive and finite")
        if self.bond_type_ids.shape[0] != self.bonds.shape[0]:
            problems.append(
                f"bond_types length {self.bond_type_ids.shape[0]} != {self.bonds.shape[0]} bonds"
            )
        seen = set()
        for b, (i, j) in enumerate(self.bonds):
            if i == j:
                problems.append(f"bond {b} is a self-loop")
                continue
            if not (0 <= i < n) or not (0 <= j < n):
                problems.append(f"bond {b} references an atom outside 0..{n - 1}")
                continue
            key = (min(i, j), max(i, j))
            if key in seen:
                problems.append(f"bond {b} duplicates pair {key}")
            seen.add(key)
            if self.molecule_ids[i] != self.molecule_ids[j]:
                problems.append(f"bond {b} crosses molecules {self.molecule_ids[i]} and {self.molecule_ids[j]}")
        if self.molecule_ids.shape != (n,):
            problems.append("molecule_ids length mismatch")
        if self.box is not None:
            if self.box.shape != (3,) or not np.all(self.box > 0):
                problems.append("box must be three positive edge lengths")
        return problems


@dataclass(frozen=True)
class Frame:
    positions: np.ndarray
    time: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ShapeError(f"frame positions must be (N, 3), got {pos.shape}")
        object.__setattr__(self, "positions", _frozen(pos, np.float64))


class Trajectory:
    """Topology plus an ordered stack of frames at uniform spacing."""

    def __init__(self, topology: FineTopology, positions, record_interval: float,
                 box=None, times=None):
        self.topology = topology
        pos = np.asarray(positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise ShapeError(f"trajectory positions must be (frames, N, 3), got {pos.shape}")
        if pos.shape[1] != topology.n_atoms:
            raise ShapeError(
                f"trajectory has {pos.shape[1]} particles but topology has {topology.n_atoms}"
            )
        self.positions = _frozen(pos, np.float64)
        self.record_interval = float(record_interval)
        self.box = None if box is None else _frozen(box, np.float64)
        if times is None:
            times = np.arange(pos.shape[0]) * self.record_interval
        self.times = _frozen(times, np.float64)

    @property
    def n_frames(self) -> int:
        return int(self.positions.shape[0])

    @property
    def frames(self):
        return tuple(Frame(self.positions[i], float(self.times[i])) for i in range(self.n_frames))

    def frame(self, i: int) -> Frame:
        return Frame(self.positions[i], float(self.times[i]))


def validate(traj: Trajectory) -> list[str]:
    """Structural checks; returns a list of human-readable violations."""
    problems = list(traj.topology.validate())
    if traj.box is not None and traj.topology.box is not None:
        if not np.allclose(traj.box, traj.topology.box):
            problems.append("trajectory box differs from topology box")
    if not np.isfinite(traj.record_interval) or traj.record_interval <= 0:
        problems.append("record_interval must be positive and finite")
    t = traj.times
    if t.shape[0] != traj.n_frames:
        problems.append("times length mismatch")
    else:
        for i in range(1, t.shape[0]):
            if t[i] <= t[i - 1]:
                problems.append(f"frame times not strictly increasing at index {i}")
            elif abs((t[i] - t[i - 1]) - traj.record_interval) > 1e-9 * max(1.0, traj.record_interval):
                problems.append(f"non-uniform frame spacing at index {i}")
    bad = ~np.isfinite(traj.positions).all(axis=(1, 2))
    for i in np.nonzero(bad)[0]:
        problems.append(f"frame {i} has non-finite positions")
    return problems


# ------------------------------------------------------------ periodic tools


def minimum_image(delta, box):
    """Wrap displacement vectors into [-L/2, L/2) per axis; identity when box is None."""
    delta = np.asarray(delta, dtype=np.float64)
    if box is None:
        return delta.copy()
    box = np.asarray(box, dtype=np.float64)
    return delta - box * np.floor(delta / box + 0.5)


def wrap_positions(x, box):
    """Map positions into [0, L) per axis; identity when box is None."""
    x = np.asarray(x, dtype=np.float64)
    if box is None:
        return x.copy()
    box = np.asarray(box, dtype=np.float64)
    return x - box * np.floor(x / box)


# --------------------------------------------------------------- topology IO

_TOPOLOGY_KEYS = {"atom_types", "weights", "bonds", "bond_types", "molecule_ids", "box"}


def save_topology(path, top: FineTopology):
    doc = {
        "atom_types": top.atom_type_ids.tolist(),
        "weights": top.atom_weights.tolist(),
        "bonds": top.bonds.tolist(),
        "bond_types": top.bond_type_ids.tolist(),
        "molecule_ids": top.molecule_ids.tolist(),
    }
    if top.box is not None:
        doc["box"] = top.box.tolist()
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_topology(path) -> FineTopology:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise FileFormatError(str(e)) from e
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: not valid JSON ({e})") from e
    unknown = set(doc) - _TOPOLOGY_KEYS
    if unknown:
        raise FileFormatError(f"{path}: unknown topology keys {sorted(unknown)}")
    for key in ("atom_types", "weights", "bonds", "bond_types"):
        if key not in doc:
            raise FileFormatError(f"{path}: missing topology key {key!r}")
    return FineTopology(
        atom_type_ids=np.asarray(doc["atom_types"], dtype=np.int64),
        atom_weights=np.asarray(doc["weights"], dtype=np.float64),
        bonds=np.asarray(doc["bonds"], dtype=np.int64).reshape(-1, 2),
        bond_type_ids=np.asarray(doc["bond_types"], dtype=np.int64),
        molecule_ids=(np.asarray(doc["molecule_ids"], dtype=np.int64)
                      if "molecule_ids" in doc else None),
        box=(np.asarray(doc["box"], dtype=np.float64) if "box" in doc else None),
    )


# ------------------------------------------------------------- trajectory IO


def write_trajectory(path, traj: Trajectory):
    n = traj.positions.shape[1]
    box = np.zeros(3) if traj.box is None else np.asarray(traj.box, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(struct.pack("<I", TRAJ_VERSION))
        fh.write(struct.pack("<I", n))
        fh.write(struct.pack("<Q", traj.n_frames))
        fh.write(struct.pack("<d", traj.record_interval))
        fh.write(struct.pack("<3d", *box))
        fh.write(np.ascontiguousarray(traj.positions, dtype="<f4").tobytes())


def read_trajectory(path, topology: FineTopology) -> Trajectory:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise FileFormatError(str(e)) from e
    with fh:
        magic = fh.read(8)
        if magic != TRAJ_MAGIC:
            raise FileFormatError(f"{path}: bad trajectory magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != TRAJ_VERSION:
            raise FileFormatError(f"{path}: unsupported trajectory version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        (n_frames,) = struct.unpack("<Q", fh.read(8))
        (record_interval,) = struct.unpack("<d", fh.read(8))
        box = np.array(struct.unpack("<3d", fh.read(24)))
        raw = fh.read(4 * 3 * n * n_frames)
        if len(raw) != 4 * 3 * n * n_frames:
            raise FileFormatError(f"{path}: truncated trajectory payload")
        if fh.read(1):
            raise FileFormatError(f"{path}: trailing bytes after trajectory payload")
    if topology.n_atoms != n:
        raise FileFormatError(f"{path}: file has {n} particles, topology has {topology.n_atoms}")
    pos = np.frombuffer(raw, dtype="<f4").reshape(n_frames, n, 3).astype(np.float64)
    return Trajectory(
        topology=topology,
        positions=pos,
        record_interval=record_interval,
        box=None if np.all(box == 0.0) else box,
    )


# ------------------------------------------------------------- coarse types


@dataclass(frozen=True)
class CoarseTopology:
    """Bead-level structure produced by pooling a partition of the fine graph."""

    bead_weights: np.ndarray
    bead_embeddings: np.ndarray
    cg_bonds: np.ndarray
    bead_species: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bead_weights", _frozen(self.bead_weights, np.float64))
        object.__setattr__(self, "bead_embeddings", _frozen(self.bead_embeddings, np.float64))
        bonds = np.asarray(self.cg_bonds, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "cg_bonds", _frozen(bonds, np.int64))
        object.__setattr__(self, "bead_species", _frozen(self.bead_species, np.int64))

    @property
    def n_beads(self) -> int:
        return int(self.bead_weights.shape[0])


@dataclass(frozen=True)
class RadiusEdges:
    """Undirected bead pairs (m < n, lexicographically sorted) with minimum-image data."""

    pairs: np.ndarray      # (E, 2) int
    disp: np.ndarray       # (E, 3) minimum-image x[m] - x[n]
    dist: np.ndarray       # (E,)

    def __post_init__(self):
        object.__setattr__(self, "pairs", _frozen(np.asarray(self.pairs).reshape(-1, 2), np.int64))
        object.__setattr__(self, "disp", _frozen(np.asarray(self.disp).reshape(-1, 3), np.float64))
        object.__setattr__(self, "dist", _frozen(self.dist, np.float64))

    @property
    def n_edges(self) -> int:
        return int(self.pairs.shape[0])


@dataclass(frozen=True)
class CoarseFrame:
    positions: np.ndarray
    radius_edges: RadiusEdges
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "positions", _frozen(self.positions, np.float64))
