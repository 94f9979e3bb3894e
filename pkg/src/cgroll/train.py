"""Maximum-likelihood training of the CG stepper from recorded trajectories.

Each step samples (system, time) windows uniformly (system first, then a valid
start), builds the k-step history plus the one-step target, and minimizes the
Gaussian NLL of the time-integrated acceleration; the score loss and the
residual size head join the objective when enabled. Validation NLL on held-out
systems picks the checkpoint that ships.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensornet as tn
from .analysis import radius_of_gyration_sq
from .bundle import ModelBundle
from .cgmap import map_frames, pool_beads
from .config import ExperimentConfig
from .dynamics import (DynamicsModel, DynState, NormStats, compute_norm_stats,
                       finite_diff_accel, finite_diff_velocities, radius_edges_for)
from .errors import ConfigError, FileFormatError
from .graphcore import load_topology, read_trajectory
from .mdref import load_manifest
from .partition import partition_graph
from .refiner import score_loss


@dataclass
class SystemData:
    """Everything training needs about one recorded system, fine frames dropped."""

    name: str
    split: str
    topology: object
    assignment: np.ndarray
    ct: object                     # static bead topology (embeddings not used)
    cg: np.ndarray                 # (T, M, 3) wrapped CG positions, record spacing
    box: np.ndarray
    rg_residual: np.ndarray        # (T,) fine-minus-coarse Rg^2, or None


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list
    val_history: list
    best_val_nll: float
    best_step: int
    skipped_windows: int
    aborted: bool
    abort_step: int = None


def load_systems(dataset_dir, manifest: dict, cfg: ExperimentConfig,
                 splits=("train", "val"), with_rg: bool = None) -> list:
    """Load, partition, and CG-map every system in the requested splits."""
    if with_rg is None:
        with_rg = cfg.dynamics.rg_head
    out = []
    for sys in manifest["systems"]:
        if sys["split"] not in splits:
            continue
        topo = load_topology(os.path.join(dataset_dir, sys["topology"]))
        traj = read_trajectory(os.path.join(dataset_dir, sys["trajectory"]), topo)
        res = partition_graph(topo, cfg.partition.group_size, seed=cfg.seed,
                              balance_eps=cfg.partition.balance_eps)
        ct = pool_beads(topo, np.zeros((topo.n_atoms, 1)), res.assignment)
        cg = map_frames(traj.positions, res.assignment, topo.atom_weights,
                        traj.box, wrap=True)
        rg_res = None
        if with_rg:
            cg_unwrapped = cg if traj.box is None else map_frames(
                traj.positions, res.assignment, topo.atom_weights,
                traj.box, wrap=False)
            rg_res = (radius_of_gyration_sq(traj.positions, topo.atom_weights)
                      - radius_of_gyration_sq(cg_unwrapped, ct.bead_weights))
        out.append(SystemData(name=sys["name"], split=sys["split"], topology=topo,
                              assignment=res.assignment, ct=ct, cg=cg,
                              box=traj.box, rg_residual=rg_res))
    return out


def _window_loss(model: DynamicsModel, sd: SystemData, t: int, stride: int,
                 dt: float, norm: NormStats, cfg: ExperimentConfig,
                 schedule, rng):
    """Joint loss for one (system, start) window; returns (loss, parts)."""
    k = model.cfg.k
    view = sd.cg[t - k * stride: t + stride + 1: stride]
    vel = finite_diff_velocities(view, k, k, dt, sd.box)
    accel = finite_diff_accel(view, k, dt, sd.box)
    state = DynState(positions=view[k], velocities=vel, dt=dt)

    emb = model.embed_atoms(sd.topology)
    bead_emb = model.pool_embeddings(emb, sd.assignment)
    redges = radius_edges_for(view[k], sd.box, model.cfg.connectivity_radius)
    feats = model.featurize(bead_emb, sd.ct, state, redges, sd.box, norm)
    mu, logvar, hidden = model.predict(feats)
    target_norm = (accel - norm.acc_mean) / norm.acc_std
    nll = model.nll(mu, logvar, target_norm)
    loss = nll
    parts = {"nll": float(nll.data)}
    if cfg.refiner.enabled:
        sloss = score_loss(model, view[k + 1], hidden, sd.ct, sd.box, norm,
                           schedule, rng, model.cfg.connectivity_radius)
        loss = tn.add(loss, sloss)
        parts["score"] = float(sloss.data)
    if model.cfg.rg_head:
        target = sd.rg_residual[t]
        resid = tn.sub(model.rg_correction(hidden), target)
        rloss = tn.mul(tn.tsum(tn.square(resid)), cfg.train.rg_loss_weight)
        loss = tn.add(loss, rloss)
        parts["rg"] = float(rloss.data)
    return loss, parts


def _val_nll(model, systems, stride, dt, norm, n_windows) -> float:
    """Deterministic grid of windows over the validation systems."""
    k = model.cfg.k
    vals = []
    for sd in systems:
        lo, hi = k * stride, sd.cg.shape[0] - 1 - stride
        if hi < lo:
            continue
        for t in np.unique(np.linspace(lo, hi, n_windows).astype(int)):
            view = sd.cg[t - k * stride: t + stride + 1: stride]
            vel = finite_diff_velocities(view, k, k, dt, sd.box)
            accel = finite_diff_accel(view, k, dt, sd.box)
            state = DynState(positions=view[k], velocities=vel, dt=dt)
            with tn.no_grad():
                emb = model.embed_atoms(sd.topology)
                bead_emb = model.pool_embeddings(emb, sd.assignment)
                redges = radius_edges_for(view[k], sd.box,
                                          model.cfg.connectivity_radius)
                feats = model.featurize(bead_emb, sd.ct, state, redges,
                                        sd.box, norm)
                mu, logvar, _ = model.predict(feats)
                nll = model.nll(mu, logvar, (accel - norm.acc_mean) / norm.acc_std)
            vals.append(float(nll.data))
    if not vals:
        raise ConfigError("no validation windows fit any trajectory")
    return float(np.mean(vals))


def _snapshot(store) -> dict:
    return {n: t.data.copy() for n, t in store.params.items()}


def _restore(store, snap: dict):
    for n, t in store.params.items():
        t.data = snap[n].copy()


def train(cfg: ExperimentConfig, dataset_dir, progress=None) -> TrainResult:
    """Train on the dataset's train split, validate on val; returns the bundle.

    A non-finite loss aborts immediately and the result carries the best
    validated parameters seen so far (the initialization if none).
    """
    manifest = load_manifest(os.path.join(dataset_dir, "manifest.json"))
    if manifest["scenario"] != cfg.scenario:
        raise FileFormatError(
            f"dataset scenario {manifest['scenario']!r} does not match "
            f"config scenario {cfg.scenario!r}")
    systems = load_systems(dataset_dir, manifest, cfg)
    train_sys = [s for s in systems if s.split == "train"]
    val_sys = [s for s in systems if s.split == "val"] or train_sys
    if not train_sys:
        raise ConfigError("dataset has no training systems")

    stride = cfg.dynamics.dt_multiple
    dt = stride * manifest["record_interval"]
    norm = compute_norm_stats([s.cg[::stride] for s in train_sys], dt,
                              [s.box for s in train_sys])
    model = DynamicsModel(cfg.dynamics, manifest["n_atom_types"],
                          manifest["n_bond_types"], seed=cfg.seed,
                          with_score=cfg.refiner.enabled)
    schedule = cfg.refiner.schedule() if cfg.refiner.enabled else None
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, 0x7EA1])))

    k = cfg.dynamics.k
    valid = []
    for sd in train_sys:
        lo, hi = k * stride, sd.cg.shape[0] - 1 - stride
        valid.append((lo, hi))

    tcfg = cfg.train
    history, val_history = [], []
    best = {"nll": np.inf, "step": -1, "params": _snapshot(model.store)}
    skipped = 0
    aborted = False
    abort_step = None

    for step in range(tcfg.steps):
        model.store.zero_grad()
        loss = None
        parts_acc = {}
        for _ in range(tcfg.batch):
            for _try in range(100):
                i = int(rng.integers(len(train_sys)))
                lo, hi = valid[i]
                if hi >= lo:
                    break
                skipped += 1
            else:
                raise ConfigError("no system admits a training window")
            t = int(rng.integers(lo, hi + 1))
            wloss, parts = _window_loss(model, train_sys[i], t, stride, dt,
                                        norm, cfg, schedule, rng)
            loss = wloss if loss is None else tn.add(loss, wloss)
            for key, v in parts.items():
                parts_acc[key] = parts_acc.get(key, 0.0) + v / tcfg.batch
        loss = tn.mul(loss, 1.0 / tcfg.batch)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            aborted = True
            abort_step = step
            tn.backward(loss)   # drain the tape before bailing out
            break
        tn.backward(loss)
        lr = tn.lr_schedule(step, max(tcfg.steps, 1), tcfg.lr_start, tcfg.lr_end)
        gnorm = model.store.adam_step(lr, clip_norm=tcfg.clip_norm)
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            rec = {"step": step, "loss": loss_val, "lr": lr,
                   "grad_norm": float(gnorm)}
            rec.update(parts_acc)
            history.append(rec)
        if (step + 1) % tcfg.val_every == 0 or step == tcfg.steps - 1:
            v = _val_nll(model, val_sys, stride, dt, norm, tcfg.val_windows)
            val_history.append({"step": step + 1, "val_nll": v})
            if v < best["nll"]:
                best = {"nll": v, "step": step + 1,
                        "params": _snapshot(model.store)}
            if progress is not None:
                progress(step + 1, tcfg.steps, loss_val, v)

    _restore(model.store, best["params"])
    bundle = ModelBundle(model=model, norm=norm, dt=dt, refine=cfg.refiner,
                         group_size=cfg.partition.group_size)
    return TrainResult(bundle=bundle, history=history, val_history=val_history,
                       best_val_nll=float(best["nll"]), best_step=best["step"],
                       skipped_windows=skipped, aborted=aborted,
                       abort_step=abort_step)
