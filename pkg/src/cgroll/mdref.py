"""Reference MD generator: bead-spring chains under Langevin dynamics.

Reduced units throughout (sigma_LJ = 1, kT ~ 1, tau = 1). Potential is
harmonic bonds plus truncated-and-shifted Lennard-Jones with per-type epsilon
and geometric-mean mixing; LJ acts on all pairs, bonded ones included (the
stiff bond keeps r near r0 where the combined potential is still confining).

Integration is Langevin BAOAB splitting: half-kick, half-drift,
Ornstein-Uhlenbeck velocity update, half-drift, half-kick. With gamma = 0 the
O step is the identity and the scheme reduces to velocity Verlet, which the
energy-drift and momentum tests rely on.

Two system samplers mirror a chemistry split: training chains carry regular
repeating type motifs, test chains random sequences over the same alphabet.
The periodic-box scenario mixes four 24-bead chains with 16 free monomers
("ions", their own atom type). Positions are emitted unwrapped.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .cgmap import _cell_pairs
from .errors import ConfigError, NumericalError
from .graphcore import (FineTopology, Trajectory, minimum_image, save_topology,
                        wrap_positions, write_trajectory)

N_CHAIN_TYPES = 4
ION_TYPE = 4
TYPE_MASSES = np.array([1.0, 1.25, 0.8, 1.1, 1.0])
TYPE_LJ_EPS = np.array([0.2, 0.4, 0.6, 0.8, 0.3])


@dataclass
class ForceField:
    lj_eps: np.ndarray = field(default_factory=lambda: TYPE_LJ_EPS.copy())
    lj_sigma: float = 1.0
    cutoff: float = 2.5
    bond_k: float = 100.0
    bond_r0: float = 1.0

    def __post_init__(self):
        self.lj_eps = np.asarray(self.lj_eps, dtype=np.float64)
        if np.any(self.lj_eps < 0) or self.lj_sigma <= 0 or self.cutoff <= 0 \
                or self.bond_k <= 0 or self.bond_r0 <= 0:
            raise ConfigError("force-field parameters must be positive")

    def validate_box(self, box):
        if box is not None and self.cutoff > float(np.min(box)) / 2.0:
            raise ConfigError(
                f"cutoff {self.cutoff} exceeds half the smallest box edge")


@dataclass
class LangevinConfig:
    n_steps: int
    dt: float = 0.01
    kT: float = 1.0
    gamma: float = 0.5
    record_every: int = 10
    relax_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("timestep must be positive")
        if self.record_every < 1:
            raise ConfigError("record_every must be >= 1")
        if self.n_steps < 1 or self.n_steps % self.record_every:
            raise ConfigError("n_steps must be a positive multiple of record_every")
        if self.kT < 0 or self.gamma < 0 or self.relax_steps < 0:
            raise ConfigError("kT, gamma and relax_steps must be >= 0")


class _PairSource:
    """Candidate LJ pairs: cached all-pairs below 200 atoms, cell list above."""

    def __init__(self, n, box, cutoff):
        self.box = box
        self.cutoff = cutoff
        self.brute = n < 200
        if self.brute:
            iu = np.triu_indices(n, 1)
            self.pi = iu[0].astype(np.int64)
            self.pj = iu[1].astype(np.int64)

    def __call__(self, x):
        if self.brute:
            return self.pi, self.pj
        pairs = _cell_pairs(x, self.box, self.cutoff)
        return pairs[:, 0], pairs[:, 1]


def forces(positions, topology: FineTopology, ff: ForceField, box=None,
           pair_source: _PairSource = None):
    """Total force and potential energy. Pairwise antisymmetric by construction."""
    x = np.asarray(positions, dtype=np.float64)
    n = x.shape[0]
    if pair_source is None:
        pair_source = _PairSource(n, box, ff.cutoff)
    fx = np.zeros(n)
    fy = np.zeros(n)
    fz = np.zeros(n)
    pot = 0.0

    if topology.bonds.shape[0]:
        bi = topology.bonds[:, 0]
        bj = topology.bonds[:, 1]
        d = minimum_image(x[bi] - x[bj], box)
        r2 = np.einsum("ij,ij->i", d, d)
        if np.any(r2 < 1e-16):
            k = int(np.argmin(r2))
            raise NumericalError(f"atoms {bi[k]} and {bj[k]} overlap")
        r = np.sqrt(r2)
        dr = r - ff.bond_r0
        pot += 0.5 * ff.bond_k * float(np.dot(dr, dr))
        fmag = -ff.bond_k * dr / r
        g = fmag[:, None] * d
        fx += np.bincount(bi, g[:, 0], n) - np.bincount(bj, g[:, 0], n)
        fy += np.bincount(bi, g[:, 1], n) - np.bincount(bj, g[:, 1], n)
        fz += np.bincount(bi, g[:, 2], n) - np.bincount(bj, g[:, 2], n)

    pi, pj = pair_source(x)
    if pi.size:
        d = minimum_image(x[pi] - x[pj], box)
        r2 = np.einsum("ij,ij->i", d, d)
        if np.any(r2 < 1e-16):
            k = int(np.argmin(r2))
            raise NumericalError(f"atoms {pi[k]} and {pj[k]} overlap")
        mask = r2 < ff.cutoff * ff.cutoff
        if np.any(mask):
            pi, pj, d, r2 = pi[mask], pj[mask], d[mask], r2[mask]
            eps = np.sqrt(ff.lj_eps[topology.atom_type_ids[pi]]
                          * ff.lj_eps[topology.atom_type_ids[pj]])
            s2 = (ff.lj_sigma * ff.lj_sigma) / r2
            s6 = s2 * s2 * s2
            s12 = s6 * s6
            sc6 = (ff.lj_sigma / ff.cutoff) ** 6
            shift = 4.0 * (sc6 * sc6 - sc6)
            pot += float(np.sum(4.0 * eps * (s12 - s6) - eps * shift))
            fmag = 24.0 * eps * (2.0 * s12 - s6) / r2
            g = fmag[:, None] * d
            fx += np.bincount(pi, g[:, 0], n) - np.bincount(pj, g[:, 0], n)
            fy += np.bincount(pi, g[:, 1], n) - np.bincount(pj, g[:, 1], n)
            fz += np.bincount(pi, g[:, 2], n) - np.bincount(pj, g[:, 2], n)

    return np.stack([fx, fy, fz], axis=1), pot


def potential_energy(positions, topology, ff, box=None) -> float:
    return forces(positions, topology, ff, box)[1]


def initial_positions(topology: FineTopology, rng: np.random.Generator,
                      box=None, min_dist: float = 0.9,
                      bond_len: float = 1.0) -> np.ndarray:
    """Molecule-by-molecule placement: random walks at bond length for chains,
    uniform draws for free monomers; every atom keeps min_dist to all placed."""
    n = topology.n_atoms
    x = np.zeros((n, 3))
    placed = []

    def ok(p):
        if not placed:
            return True
        d = minimum_image(np.asarray(placed) - p, box)
        return bool(np.min(np.einsum("ij,ij->i", d, d)) >= min_dist * min_dist)

    mol_ids = np.unique(topology.molecule_ids)
    order = {}
    for mol in mol_ids:
        idx = np.flatnonzero(topology.molecule_ids == mol)
        order[int(mol)] = idx

    for mol in mol_ids:
        idx = order[int(mol)]
        for attempt in range(400):
            trial = []
            if box is not None:
                head = rng.uniform(0.0, 1.0, 3) * box
            else:
                head = rng.normal(0.0, 0.5, 3)
            good = ok(head)
            if good:
                trial.append(head)
                prev = head
                for _ in idx[1:]:
                    for _ in range(120):
                        u = rng.standard_normal(3)
                        u /= np.linalg.norm(u)
                        cand = prev + bond_len * u
                        d_new = minimum_image(np.asarray(trial) - cand, box)
                        if np.min(np.einsum("ij,ij->i", d_new, d_new)) < min_dist * min_dist:
                            continue
                        if ok(cand):
                            trial.append(cand)
                            prev = cand
                            break
                    else:
                        good = False
                        break
            if good and len(trial) == idx.size:
                x[idx] = np.asarray(trial)
                placed.extend(trial)
                break
        else:
            raise NumericalError(f"could not place molecule {int(mol)}")
    return x


def simulate(topology: FineTopology, ff: ForceField, cfg: LangevinConfig,
             x0=None, v0=None, observer=None, return_final_state=False):
    """Langevin BAOAB run; frames recorded every record_every steps after the
    relaxation segment, positions unwrapped.

    observer(step, x, v), when given, is called at every recording point;
    return_final_state additionally returns (x, v) after the last step."""
    ff.validate_box(topology.box)
    box = topology.box
    n = topology.n_atoms
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x3D])))
    x = np.array(x0, dtype=np.float64) if x0 is not None \
        else initial_positions(topology, rng, box)
    m = topology.atom_weights[:, None]
    v = np.array(v0, dtype=np.float64) if v0 is not None \
        else rng.standard_normal((n, 3)) * np.sqrt(cfg.kT / m)
    c1 = math.exp(-cfg.gamma * cfg.dt)
    c2 = np.sqrt(cfg.kT * (1.0 - c1 * c1) / m)
    thermostat = cfg.gamma > 0.0
    pair_source = _PairSource(n, box, ff.cutoff)

    half = 0.5 * cfg.dt
    f, pot = forces(x, topology, ff, box, pair_source)

    def step_once(step_label):
        nonlocal x, v, f, pot
        v = v + half * f / m
        x = x + half * v
        if thermostat:
            v = c1 * v + c2 * rng.standard_normal((n, 3))
        x = x + half * v
        f, pot = forces(x, topology, ff, box, pair_source)
        v = v + half * f / m
        if not math.isfinite(pot):
            raise NumericalError(f"non-finite state at step {step_label}")

    for s in range(cfg.relax_steps):
        step_once(f"relax {s}")

    n_frames = cfg.n_steps // cfg.record_every + 1
    out = np.empty((n_frames, n, 3), dtype=np.float64)
    out[0] = x
    if observer is not None:
        observer(0, x, v)
    k = 1
    for s in range(cfg.n_steps):
        step_once(s)
        if (s + 1) % cfg.record_every == 0:
            out[k] = x
            if observer is not None:
                observer(s + 1, x, v)
            k += 1
    traj = Trajectory(topology=topology, positions=out,
                      record_interval=cfg.dt * cfg.record_every, box=box)
    if return_final_state:
        return traj, (x, v)
    return traj


def kinetic_temperature(velocities, masses) -> float:
    ke = 0.5 * float(np.sum(masses[:, None] * velocities * velocities))
    return 2.0 * ke / (3.0 * velocities.shape[0])


# ------------------------------------------------------------------ samplers

def _chain_topology(sequence, box=None) -> FineTopology:
    n = len(sequence)
    seq = np.asarray(sequence, dtype=np.int64)
    bonds = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    return FineTopology(
        atom_type_ids=seq,
        atom_weights=TYPE_MASSES[seq],
        bonds=bonds,
        bond_type_ids=np.zeros(n - 1, dtype=np.int64),
        box=box,
    )


def repeat_sequence(rng: np.random.Generator, n: int) -> np.ndarray:
    """Regular repeating motif over the chain type alphabet."""
    motif = rng.permutation(N_CHAIN_TYPES)
    return np.tile(motif, n // N_CHAIN_TYPES + 1)[:n]


def random_sequence(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, N_CHAIN_TYPES, size=n)


def sample_chain(chemistry_seed: int, kind: str = "repeat") -> FineTopology:
    """Open-boundary chain of 48..96 beads; kind selects the chemistry class."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([chemistry_seed, 0xC8])))
    n = int(rng.integers(48, 97))
    if kind == "repeat":
        seq = repeat_sequence(rng, n)
    elif kind == "random":
        seq = random_sequence(rng, n)
    else:
        raise ConfigError(f"unknown chain kind {kind!r}")
    return _chain_topology(seq)


BOX_EDGE = 8.0
BOX_N_CHAINS = 4
BOX_CHAIN_LEN = 24
BOX_N_IONS = 16


def sample_box(chemistry_seed: int, kind: str = "repeat") -> FineTopology:
    """Periodic box: 4 chains of 24 beads plus 16 free single-bead ions."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([chemistry_seed, 0xB0])))
    seqs = []
    for _ in range(BOX_N_CHAINS):
        if kind == "repeat":
            seqs.append(repeat_sequence(rng, BOX_CHAIN_LEN))
        elif kind == "random":
            seqs.append(random_sequence(rng, BOX_CHAIN_LEN))
        else:
            raise ConfigError(f"unknown chain kind {kind!r}")
    types = np.concatenate(seqs + [np.full(BOX_N_IONS, ION_TYPE, dtype=np.int64)])
    bonds = []
    for c in range(BOX_N_CHAINS):
        off = c * BOX_CHAIN_LEN
        for i in range(BOX_CHAIN_LEN - 1):
            bonds.append((off + i, off + i + 1))
    bonds = np.asarray(bonds, dtype=np.int64)
    return FineTopology(
        atom_type_ids=types,
        atom_weights=TYPE_MASSES[types],
        bonds=bonds,
        bond_type_ids=np.zeros(bonds.shape[0], dtype=np.int64),
        box=np.full(3, BOX_EDGE),
    )


# ------------------------------------------------------------------ datasets

@dataclass
class DatasetRecipe:
    scenario: str = "chain"         # chain | box
    n_train: int = 20
    n_val: int = 4
    n_test: int = 8
    train_frames: int = 20000
    test_frames: int = 100000
    record_every: int = 10
    dt: float = 0.01
    kT: float = 1.0
    gamma: float = 0.5
    relax_steps: int = 40000
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in ("chain", "box"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if min(self.n_train, self.n_test) < 1 or self.n_val < 0:
            raise ConfigError("dataset needs train and test systems")


def box_recipe(seed: int = 0) -> DatasetRecipe:
    return DatasetRecipe(scenario="box", n_train=6, n_val=2, n_test=2,
                         train_frames=10000, test_frames=40000, seed=seed)


def n_atom_types(scenario: str) -> int:
    return N_CHAIN_TYPES if scenario == "chain" else N_CHAIN_TYPES + 1


def generate_dataset(recipe: DatasetRecipe, out_dir, ff: ForceField = None,
                     progress=None) -> dict:
    """Simulate every system in the recipe and write topology + trajectory
    files plus a manifest JSON; returns the manifest dict."""
    os.makedirs(out_dir, exist_ok=True)
    ff = ff or ForceField()
    sampler = sample_chain if recipe.scenario == "chain" else sample_box
    splits = (["train"] * recipe.n_train + ["val"] * recipe.n_val
              + ["test"] * recipe.n_test)
    systems = []
    for i, split in enumerate(splits):
        kind = "repeat" if split in ("train", "val") else "random"
        topo = sampler(chemistry_seed=recipe.seed * 10007 + i, kind=kind)
        frames = recipe.train_frames if split in ("train", "val") else recipe.test_frames
        cfg = LangevinConfig(
            n_steps=frames * recipe.record_every, dt=recipe.dt, kT=recipe.kT,
            gamma=recipe.gamma, record_every=recipe.record_every,
            relax_steps=recipe.relax_steps, seed=recipe.seed * 7919 + i)
        traj = simulate(topo, ff, cfg)
        name = f"{split}_{i:03d}"
        save_topology(os.path.join(out_dir, f"{name}.topo.json"), topo)
        write_trajectory(os.path.join(out_dir, f"{name}.trj"), traj)
        systems.append({
            "name": name, "split": split, "kind": kind,
            "topology": f"{name}.topo.json", "trajectory": f"{name}.trj",
            "n_frames": traj.n_frames, "n_atoms": topo.n_atoms,
            "seed": cfg.seed,
        })
        if progress is not None:
            progress(name, i + 1, len(splits))
    manifest = {
        "schema_version": 1,
        "scenario": recipe.scenario,
        "seed": recipe.seed,
        "record_interval": recipe.dt * recipe.record_every,
        "n_atom_types": n_atom_types(recipe.scenario),
        "n_bond_types": 1,
        "box": [BOX_EDGE] * 3 if recipe.scenario == "box" else None,
        "systems": systems,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_manifest(path) -> dict:
    from .errors import FileFormatError
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise FileFormatError(f"cannot read manifest: {e}") from e
    for key in ("schema_version", "scenario", "record_interval", "systems",
                "n_atom_types", "n_bond_types"):
        if key not in manifest:
            raise FileFormatError(f"manifest is missing key {key!r}")
    return manifest
