"""Long-horizon simulation driver.

Preprocessing (embedding, partitioning, pooling, history mapping) happens
exactly once; the step loop then iterates predict -> integrate -> optionally
refine while monitoring stability. Emitted frames are unwrapped so transport
estimators downstream see continuous paths.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensornet as tn
from .analysis import collision_count, radius_of_gyration_sq
from .bundle import ModelBundle
from .cgmap import cg_topology_as_fine, map_frames, pool_beads
from .dynamics import DynState, euler_step, finite_diff_velocities, radius_edges_for
from .errors import ConfigError
from .graphcore import CoarseTopology, Trajectory, wrap_positions
from .partition import partition_graph
from .refiner import langevin_refine


@dataclass
class RolloutConfig:
    horizon_steps: int
    refine_enabled: bool = False
    seed: int = 0
    collision_threshold: float = 0.3
    abort_on_nan: bool = False
    deterministic: bool = None      # None: use the model's own flag

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ConfigError(f"horizon_steps must be >= 1, got {self.horizon_steps}")
        if self.collision_threshold <= 0:
            raise ConfigError("collision_threshold must be positive")


@dataclass
class RolloutStart:
    """Initialized simulation state plus the frozen preprocessing products."""

    state: DynState
    ct: CoarseTopology
    assignment: np.ndarray
    box: np.ndarray                 # None for open boundaries
    unwrapped: np.ndarray           # (M, 3) same frame as state.positions
    t0: float


@dataclass
class StabilityLog:
    collisions: np.ndarray          # (steps_completed,) bead pairs below threshold
    nan_incidents: int
    refine_warnings: int
    aborted: bool
    abort_step: int                 # None unless aborted
    elapsed_seconds: float
    rg2_corrected: np.ndarray = None   # per emitted frame, residual head only


def preprocess(topology, bundle: ModelBundle, partition_seed: int = 0):
    """Embed atoms, partition the bond graph, pool beads. Deterministic."""
    res = partition_graph(topology, bundle.group_size, seed=partition_seed)
    with tn.no_grad():
        emb = bundle.model.embed_atoms(topology)
    ct = pool_beads(topology, emb.data, res.assignment)
    return ct, res.assignment


def initialize(traj: Trajectory, bundle: ModelBundle,
               partition_seed: int = 0) -> RolloutStart:
    """Build the start state from a fine-trajectory prefix.

    Consumes the first k+1 frames spaced by the bundle's CG step; the
    recording interval must tile that step exactly. A single-frame prefix is
    accepted only for k = 0, where the velocity history starts at rest.
    """
    cfg = bundle.model.cfg
    k = cfg.k
    h = max(k, 1)
    stride_f = bundle.dt / traj.record_interval
    stride = int(round(stride_f))
    if stride < 1 or abs(stride_f - stride) > 1e-6 * stride_f:
        raise ConfigError(
            f"history spacing mismatch: CG step {bundle.dt} is not an integer "
            f"multiple of the recording interval {traj.record_interval}")
    if traj.n_frames >= h * stride + 1:
        n_hist = h
    elif k == 0 and traj.n_frames >= 1:
        n_hist = 0
    else:
        raise ConfigError(
            f"insufficient prefix: need {h * stride + 1} frames for k={k}, "
            f"got {traj.n_frames}")

    ct, assignment = preprocess(traj.topology, bundle, partition_seed)
    idx = np.arange(n_hist + 1) * stride
    fine = traj.positions[idx]
    w = traj.topology.atom_weights
    series = map_frames(fine, assignment, w, traj.box, wrap=True)
    unwrapped = map_frames(fine[-1:], assignment, w, traj.box, wrap=False)[0]
    if n_hist:
        vel = finite_diff_velocities(series, n_hist, n_hist, bundle.dt, traj.box)
        if n_hist < h:      # unreachable today (n_hist is h or 0); keep exact
            vel = np.concatenate([vel, np.zeros((h - n_hist,) + vel.shape[1:])])
    else:
        vel = np.zeros((h, ct.n_beads, 3))
    state = DynState(positions=series[n_hist], velocities=vel, dt=bundle.dt,
                     step_index=0)
    return RolloutStart(state=state, ct=ct, assignment=assignment,
                        box=None if traj.box is None else np.array(traj.box),
                        unwrapped=unwrapped, t0=float(traj.times[idx[-1]]))


def run(bundle: ModelBundle, start: RolloutStart, config: RolloutConfig):
    """Iterate the learned step for horizon_steps; returns (Trajectory, StabilityLog).

    Inference only: no parameter or embedding is mutated. The velocity history
    stays the backward difference of the emitted frames, so a refined position
    also corrects the top history row. Bit-identical for a fixed seed.
    """
    model = bundle.model
    cfg = model.cfg
    norm = bundle.norm
    ct = start.ct
    box = start.box
    radius = cfg.connectivity_radius
    if config.refine_enabled and model.score_net is None:
        raise ConfigError("refinement requested but the model has no score net")
    schedule = bundle.refine.schedule() if config.refine_enabled else None
    lparams = bundle.refine.params() if config.refine_enabled else None
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config.seed, 0x5011])))

    state = DynState(positions=np.array(start.state.positions),
                     velocities=np.array(start.state.velocities),
                     dt=start.state.dt, step_index=start.state.step_index)
    unwrapped = np.array(start.unwrapped)
    m = ct.n_beads
    hsteps = config.horizon_steps

    frames = np.empty((hsteps + 1, m, 3))
    frames[0] = unwrapped
    collisions = np.zeros(hsteps, dtype=np.int64)
    rg2 = np.empty(hsteps + 1) if cfg.rg_head else None
    n_nan = 0
    n_warn = 0
    aborted = False
    abort_step = None

    def corrected_rg2(hidden):
        base = radius_of_gyration_sq(unwrapped, ct.bead_weights)
        with tn.no_grad():
            corr = model.rg_correction(hidden)
        return float(base + corr.data.reshape(()))

    t_begin = time.perf_counter()
    steps_done = 0
    for i in range(hsteps):
        redges = radius_edges_for(state.positions, box, radius)
        with tn.no_grad():
            feats = model.featurize(ct.bead_embeddings, ct, state, redges, box, norm)
            mu, logvar, hidden = model.predict(feats)
        if rg2 is not None:
            rg2[i] = corrected_rg2(hidden)
        accel = model.sample_accel(mu.data, logvar.data, norm, rng,
                                   config.deterministic)
        new_state, disp = euler_step(state, accel, box)
        new_unwrapped = unwrapped + disp
        if config.refine_enabled:
            refined, warn = langevin_refine(
                model, new_state.positions, hidden, ct, box, norm,
                schedule, lparams, rng, radius)
            n_warn += warn
            delta = refined - new_state.positions
            new_unwrapped = new_unwrapped + delta
            vel = np.array(new_state.velocities)
            vel[0] += delta / state.dt
            pos = wrap_positions(refined, box) if box is not None else refined
            new_state = DynState(positions=pos, velocities=vel,
                                 dt=new_state.dt, step_index=new_state.step_index)
        bad = ~(np.isfinite(new_state.positions).all(axis=1)
                & np.isfinite(new_state.velocities[0]).all(axis=1)
                & np.isfinite(new_unwrapped).all(axis=1))
        if bad.any():
            n_nan += 1
            if config.abort_on_nan:
                aborted = True
                abort_step = i
                break
            pos = np.array(new_state.positions)
            vel = np.array(new_state.velocities)
            pos[bad] = state.positions[bad]
            vel[0, bad] = 0.0
            new_unwrapped[bad] = unwrapped[bad]
            new_state = DynState(positions=pos, velocities=vel,
                                 dt=new_state.dt, step_index=new_state.step_index)
        state = new_state
        unwrapped = new_unwrapped
        frames[i + 1] = unwrapped
        collisions[i] = collision_count(state.positions,
                                        config.collision_threshold, box)
        steps_done = i + 1

    if rg2 is not None and not aborted:
        redges = radius_edges_for(state.positions, box, radius)
        with tn.no_grad():
            feats = model.featurize(ct.bead_embeddings, ct, state, redges, box, norm)
            _, _, hidden = model.predict(feats)
        rg2[hsteps] = corrected_rg2(hidden)
    elapsed = time.perf_counter() - t_begin

    n_emitted = steps_done + 1
    cg_top = cg_topology_as_fine(ct, box=box)
    traj = Trajectory(topology=cg_top, positions=frames[:n_emitted],
                      record_interval=bundle.dt, box=box,
                      times=start.t0 + np.arange(n_emitted) * bundle.dt)
    log = StabilityLog(collisions=collisions[:steps_done], nan_incidents=n_nan,
                       refine_warnings=n_warn, aborted=aborted,
                       abort_step=abort_step, elapsed_seconds=elapsed,
                       rg2_corrected=None if rg2 is None else rg2[:n_emitted])
    return traj, log


def rollout_from_trajectory(traj: Trajectory, bundle: ModelBundle,
                            config: RolloutConfig, partition_seed: int = 0):
    """initialize + run in one call; the common entry point for tools."""
    start = initialize(traj, bundle, partition_seed=partition_seed)
    return run(bundle, start, config)
