"""Staged experiment runner: generate -> preprocess -> train -> rollout ->
analyze -> report.

Every stage leaves its artifacts in the working directory, so a failed run
keeps everything produced so far and a rerun with the same config reuses the
expensive stages (dataset, checkpoint) when their recorded provenance matches.
The report compares learned rollouts against ground truth and closes with a
wall-clock table: generator seconds versus rollout seconds per simulated time
unit.
"""

from __future__ import annotations

import json
import os
import time

import jsonschema
import numpy as np

from . import mdref
from .analysis import (autocorrelation, collision_series, diffusivity, emd_1d,
                       mann_kendall, radius_of_gyration_sq, rdf,
                       relaxation_time, spearman)
from .bundle import ModelBundle
from .cgmap import map_trajectory, pool_beads
from .config import ExperimentConfig
from .errors import ConfigError, NumericalError, PipelineError
from .graphcore import load_topology, read_trajectory, save_topology, \
    wrap_positions, write_trajectory
from .partition import group_size_histogram, partition_graph
from .rollout import initialize, run
from .train import train

REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "scenario", "seed", "config", "timing",
                 "systems", "summary"],
    "properties": {
        "schema_version": {"const": 1},
        "scenario": {"enum": ["chain", "box"]},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "timing": {
            "type": "object",
            "additionalProperties": False,
            "required": ["stages_s", "total_s", "generator_s_per_time_unit",
                         "rollout_s_per_time_unit", "speedup_factor"],
            "properties": {
                "stages_s": {"type": "object"},
                "total_s": {"type": "number"},
                "generator_s_per_time_unit": {"type": "number"},
                "rollout_s_per_time_unit": {"type": "number"},
                "speedup_factor": {"type": "number"},
            },
        },
        "systems": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "n_atoms", "n_beads", "gt", "model"],
                "properties": {
                    "name": {"type": "string"},
                    "n_atoms": {"type": "integer"},
                    "n_beads": {"type": "integer"},
                    "gt": {"type": "object"},
                    "model": {"type": "object"},
                    "emd_model": {"type": "number"},
                    "emd_short": {"type": "number"},
                    "collision_trend": {"type": "object"},
                    "collision_series_mean": {"type": "array"},
                    "rdf_gap": {"type": ["number", "null"]},
                },
            },
        },
        "summary": {"type": "object"},
    },
}


def _noop(*a, **kw):
    pass


def stage_plan(cfg: ExperimentConfig, workdir) -> dict:
    """What a run would do, without doing it."""
    ds = cfg.dataset
    n_sys = ds.n_train + ds.n_val + ds.n_test
    return {
        "workdir": str(workdir),
        "scenario": cfg.scenario,
        "stages": ["generate", "preprocess", "train", "rollout", "analyze",
                   "report"],
        "n_systems": n_sys,
        "n_train_systems": ds.n_train + ds.n_val,
        "n_test_systems": ds.n_test,
        "train_steps": cfg.train.steps,
        "rollouts": ds.n_test * cfg.rollout.n_seeds,
        "horizon_steps": cfg.rollout.horizon_steps,
        "refine_enabled": cfg.rollout.refine_enabled,
        "artifacts": ["config.json", "data/manifest.json", "partitions.json",
                      "model.bin", "train_log.json", "rollouts/",
                      "report.json"],
    }


def _manifest_matches(man: dict, cfg: ExperimentConfig) -> bool:
    ds = cfg.dataset
    if man.get("scenario") != ds.scenario or man.get("seed") != ds.seed:
        return False
    systems = man.get("systems", [])
    counts = {"train": 0, "val": 0, "test": 0}
    for s in systems:
        counts[s["split"]] = counts.get(s["split"], 0) + 1
        want = ds.train_frames if s["split"] in ("train", "val") else ds.test_frames
        if s["n_frames"] != want + 1:
            return False
    return counts == {"train": ds.n_train, "val": ds.n_val, "test": ds.n_test} \
        and abs(man.get("record_interval", -1.0)
                - ds.dt * ds.record_every) < 1e-12


def _generate(cfg, workdir, log):
    data_dir = os.path.join(workdir, "data")
    man_path = os.path.join(data_dir, "manifest.json")
    if os.path.exists(man_path):
        man = mdref.load_manifest(man_path)
        if _manifest_matches(man, cfg):
            log("  reusing existing dataset")
            return data_dir, man
        log("  existing dataset does not match the recipe; regenerating")
    man = mdref.generate_dataset(
        cfg.dataset, data_dir,
        progress=lambda name, i, n: log(f"  [{i}/{n}] {name}"))
    return data_dir, man


def _preprocess(cfg, workdir, data_dir, man, log):
    entries = {}
    for sys in man["systems"]:
        topo = load_topology(os.path.join(data_dir, sys["topology"]))
        res = partition_graph(topo, cfg.partition.group_size, seed=cfg.seed,
                              balance_eps=cfg.partition.balance_eps)
        entries[sys["name"]] = {
            "n_atoms": topo.n_atoms,
            "n_groups": res.n_groups,
            "cut_edges": res.cut_edges,
            "group_sizes": {str(k): v for k, v
                            in sorted(group_size_histogram(res.assignment).items())},
        }
    with open(os.path.join(workdir, "partitions.json"), "w") as fh:
        json.dump(entries, fh, indent=1, sort_keys=True)
    return entries


def _train(cfg, workdir, data_dir, log):
    model_path = os.path.join(workdir, "model.bin")
    log_path = os.path.join(workdir, "train_log.json")
    if os.path.exists(model_path) and os.path.exists(log_path):
        try:
            with open(log_path) as fh:
                prev = json.load(fh)
        except (OSError, json.JSONDecodeError):
            prev = None
        if prev and prev.get("config") == cfg.to_dict() \
                and not prev.get("aborted", False):
            log("  reusing existing checkpoint")
            return ModelBundle.load(model_path), prev
    res = train(cfg, data_dir,
                progress=lambda s, n, l, v: log(
                    f"  step {s}/{n} loss {l:.4f} val_nll {v:.4f}"))
    if res.aborted:
        res.bundle.save(model_path)
        raise NumericalError(
            f"training loss went non-finite at step {res.abort_step}; "
            f"best checkpoint (val {res.best_val_nll:.4f} at step "
            f"{res.best_step}) saved")
    res.bundle.save(model_path)
    tlog = {"config": cfg.to_dict(), "history": res.history,
            "val_history": res.val_history, "best_val_nll": res.best_val_nll,
            "best_step": res.best_step, "skipped_windows": res.skipped_windows,
            "aborted": res.aborted}
    with open(log_path, "w") as fh:
        json.dump(tlog, fh, sort_keys=True)
    return res.bundle, tlog


def _log_to_dict(log_obj) -> dict:
    return {
        "collisions": [int(c) for c in log_obj.collisions],
        "nan_incidents": int(log_obj.nan_incidents),
        "refine_warnings": int(log_obj.refine_warnings),
        "aborted": bool(log_obj.aborted),
        "abort_step": None if log_obj.abort_step is None else int(log_obj.abort_step),
        "elapsed_seconds": float(log_obj.elapsed_seconds),
        "rg2_corrected": None if log_obj.rg2_corrected is None
        else [float(v) for v in log_obj.rg2_corrected],
    }


def worker_cap() -> int:
    """Worker count cap from CGROLL_THREADS (default 1, never below 1)."""
    raw = os.environ.get("CGROLL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CGROLL_THREADS must be an integer, got {raw!r}")


def _rollout(cfg, workdir, data_dir, man, bundle, log):
    roll_dir = os.path.join(workdir, "rollouts")
    os.makedirs(roll_dir, exist_ok=True)
    results = {}
    test_systems = [s for s in man["systems"] if s["split"] == "test"]
    n_workers = worker_cap()
    for si, sys in enumerate(test_systems):
        topo = load_topology(os.path.join(data_dir, sys["topology"]))
        traj = read_trajectory(os.path.join(data_dir, sys["trajectory"]), topo)
        start = initialize(traj, bundle, partition_seed=cfg.seed)
        save_topology(os.path.join(roll_dir, f"{sys['name']}.cgtopo.json"),
                      _cg_fine_topo(start))
        configs = [cfg.rollout_config(si * cfg.rollout.n_seeds + j)
                   for j in range(cfg.rollout.n_seeds)]
        if n_workers > 1 and len(configs) > 1:
            # model inference is read-only; one outer no_grad guards the
            # recording flag across threads
            from concurrent.futures import ThreadPoolExecutor
            from . import tensornet as tn
            with tn.no_grad(), ThreadPoolExecutor(max_workers=n_workers) as ex:
                pairs = list(ex.map(lambda rc: run(bundle, start, rc), configs))
        else:
            pairs = [run(bundle, start, rc) for rc in configs]
        trajs, logs = [], []
        for j, (out, slog) in enumerate(pairs):
            write_trajectory(os.path.join(roll_dir, f"{sys['name']}_s{j}.trj"),
                             out)
            with open(os.path.join(roll_dir, f"{sys['name']}_s{j}.stability.json"),
                      "w") as fh:
                json.dump(_log_to_dict(slog), fh)
            trajs.append(out)
            logs.append(slog)
            log(f"  {sys['name']} seed {j}: {out.n_frames} frames, "
                f"{slog.nan_incidents} nan incidents, "
                f"{slog.elapsed_seconds:.1f}s")
        results[sys["name"]] = {"start": start, "trajs": trajs, "logs": logs,
                                "record": sys}
    return results


def _cg_fine_topo(start):
    from .cgmap import cg_topology_as_fine
    return cg_topology_as_fine(start.ct, box=start.box)


def _series_stats(values, spacing) -> dict:
    out = {"mean_rg2": float(np.mean(values)), "std_rg2": float(np.std(values))}
    try:
        fit = relaxation_time(autocorrelation(values), lag_spacing=spacing)
        out["t_rel"] = float(fit.t_rel)
        out["t_rel_converged"] = bool(fit.converged)
    except (NumericalError, ValueError):
        out["t_rel"] = None
        out["t_rel_converged"] = False
    return out


def _analyze_chain(cfg, man, bundle, rollouts) -> list:
    entries = []
    record_dt = man["record_interval"]
    clip = cfg.dataset.train_frames
    for name, rr in rollouts.items():
        start, trajs, logs = rr["start"], rr["trajs"], rr["logs"]
        ct = start.ct
        data_dir = rr["data_dir"]
        topo = load_topology(os.path.join(data_dir, rr["record"]["topology"]))
        fine = read_trajectory(os.path.join(data_dir, rr["record"]["trajectory"]),
                               topo)
        gt_cg = map_trajectory(fine, start.assignment, ct, wrap=False)
        rg2_gt = radius_of_gyration_sq(gt_cg.positions, ct.bead_weights)
        rg2_model = [radius_of_gyration_sq(t.positions, ct.bead_weights)
                     for t in trajs]
        pooled = np.concatenate(rg2_model)
        gt_stats = _series_stats(rg2_gt, record_dt)
        model_stats = _series_stats(rg2_model[0], bundle.dt)
        model_stats["mean_rg2"] = float(np.mean(pooled))
        model_stats["std_rg2"] = float(np.std(pooled))
        model_stats["nan_incidents"] = int(sum(l.nan_incidents for l in logs))
        model_stats["aborted_seeds"] = int(sum(l.aborted for l in logs))
        model_stats["mean_collisions"] = float(
            np.mean([l.collisions.mean() if l.collisions.size else 0.0
                     for l in logs]))
        entries.append({
            "name": name,
            "n_atoms": int(topo.n_atoms),
            "n_beads": int(ct.n_beads),
            "gt": gt_stats,
            "model": model_stats,
            "emd_model": emd_1d(pooled, rg2_gt),
            "emd_short": emd_1d(rg2_gt[:clip], rg2_gt),
        })
    return entries


def _analyze_box(cfg, man, bundle, rollouts) -> list:
    entries = []
    ion = 1                       # bead species for single-atom molecules
    acfg = cfg.analysis
    for name, rr in rollouts.items():
        start, trajs, logs = rr["start"], rr["trajs"], rr["logs"]
        ct = start.ct
        box = start.box
        data_dir = rr["data_dir"]
        topo = load_topology(os.path.join(data_dir, rr["record"]["topology"]))
        fine = read_trajectory(os.path.join(data_dir, rr["record"]["trajectory"]),
                               topo)
        gt_unwrapped = map_trajectory(fine, start.assignment, ct, wrap=False)
        gt_wrapped = map_trajectory(fine, start.assignment, ct, wrap=True)
        d_gt, _ = diffusivity(gt_unwrapped.positions, gt_unwrapped.times,
                              ct.bead_species, ion)
        thin = max(1, gt_wrapped.n_frames // 2000)
        r_centers, _, rdf_gt = rdf(gt_wrapped.positions[::thin], ct.bead_species,
                                   ion, ion, acfg.rdf_dr, acfg.rdf_r_max, box)
        gt_coll = collision_series(gt_wrapped.positions[::thin],
                                   acfg.collision_threshold, box)
        gt_stats = {"diffusivity": float(d_gt),
                    "mean_collisions": float(gt_coll.mean())}
        d_model, rdf_gaps = [], []
        for t in trajs:
            d, _ = diffusivity(t.positions, t.times, ct.bead_species, ion)
            d_model.append(float(d))
            _, _, rdf_m = rdf(wrap_positions(t.positions, box), ct.bead_species,
                              ion, ion, acfg.rdf_dr, acfg.rdf_r_max, box)
            rdf_gaps.append(float(np.mean(np.abs(rdf_m - rdf_gt))))
        coll_mean = np.mean([l.collisions for l in logs], axis=0)
        mk_thin = coll_mean[::max(1, coll_mean.size // 2000)]
        if mk_thin.size >= 8:
            trend, p, z = mann_kendall(mk_thin)
        else:
            trend, p, z = 0, 1.0, 0.0
        model_stats = {
            "diffusivity": float(np.mean(d_model)),
            "diffusivity_per_seed": d_model,
            "nan_incidents": int(sum(l.nan_incidents for l in logs)),
            "aborted_seeds": int(sum(l.aborted for l in logs)),
            "mean_collisions": float(coll_mean.mean()),
            "refine_warnings": int(sum(l.refine_warnings for l in logs)),
        }
        entries.append({
            "name": name,
            "n_atoms": int(topo.n_atoms),
            "n_beads": int(ct.n_beads),
            "gt": gt_stats,
            "model": model_stats,
            "rdf_gap": float(np.mean(rdf_gaps)) if rdf_gaps else None,
            "collision_trend": {"trend": int(trend), "p": float(p),
                                "z": float(z)},
            "collision_series_mean": [float(c) for c in coll_mean],
        })
    return entries


def _probe_generator_cost(man, data_dir, cfg) -> float:
    """Seconds of generator wall-clock per simulated time unit."""
    sys = [s for s in man["systems"] if s["split"] == "test"][0]
    topo = load_topology(os.path.join(data_dir, sys["topology"]))
    ds = cfg.dataset
    n_steps = 2000
    lcfg = mdref.LangevinConfig(n_steps=n_steps, dt=ds.dt, kT=ds.kT,
                                gamma=ds.gamma,
                                record_every=ds.record_every, seed=12345)
    t0 = time.perf_counter()
    mdref.simulate(topo, mdref.ForceField(), lcfg)
    wall = time.perf_counter() - t0
    return wall / (n_steps * ds.dt)


def run_pipeline(cfg: ExperimentConfig, workdir, dry_run: bool = False,
                 log=None) -> dict:
    """Execute all stages; returns the validated report dict.

    dry_run validates the config and returns the stage plan without touching
    anything. A stage failure raises PipelineError naming the stage; artifacts
    written so far stay in place.
    """
    log = log or _noop
    plan = stage_plan(cfg, workdir)
    if dry_run:
        return plan

    os.makedirs(workdir, exist_ok=True)
    cfg.save(os.path.join(workdir, "config.json"))
    timing = {}
    t_total = time.perf_counter()

    def stage(name, fn):
        log(f"[{name}]")
        t0 = time.perf_counter()
        try:
            out = fn()
        except PipelineError:
            raise
        except Exception as e:
            raise PipelineError(name, e) from e
        timing[name] = time.perf_counter() - t0
        log(f"[{name}] done in {timing[name]:.1f}s")
        return out

    data_dir, man = stage("generate", lambda: _generate(cfg, workdir, log))
    stage("preprocess", lambda: _preprocess(cfg, workdir, data_dir, man, log))
    bundle, _tlog = stage("train", lambda: _train(cfg, workdir, data_dir, log))
    rollouts = stage("rollout",
                     lambda: _rollout(cfg, workdir, data_dir, man, bundle, log))
    for rr in rollouts.values():
        rr["data_dir"] = data_dir

    def analyze():
        if cfg.scenario == "chain":
            return _analyze_chain(cfg, man, bundle, rollouts)
        return _analyze_box(cfg, man, bundle, rollouts)

    systems = stage("analyze", analyze)

    def report():
        gen_cost = _probe_generator_cost(man, data_dir, cfg)
        roll_wall = sum(l.elapsed_seconds for rr in rollouts.values()
                        for l in rr["logs"])
        roll_time = sum(len(l.collisions) * bundle.dt for rr in rollouts.values()
                        for l in rr["logs"])
        roll_cost = roll_wall / roll_time if roll_time > 0 else float("inf")
        summary = {
            "n_test_systems": len(systems),
            "total_nan_incidents": int(sum(e["model"].get("nan_incidents", 0)
                                           for e in systems)),
            "total_aborted_seeds": int(sum(e["model"].get("aborted_seeds", 0)
                                           for e in systems)),
        }
        if cfg.scenario == "chain":
            gt_means = [e["gt"]["mean_rg2"] for e in systems]
            mod_means = [e["model"]["mean_rg2"] for e in systems]
            summary["spearman_rg2"] = (spearman(gt_means, mod_means)
                                       if len(systems) >= 2 else None)
            summary["mean_emd_model"] = float(np.mean([e["emd_model"]
                                                       for e in systems]))
            summary["mean_emd_short"] = float(np.mean([e["emd_short"]
                                                       for e in systems]))
            summary["n_beating_short"] = int(sum(e["emd_model"] <= e["emd_short"]
                                                 for e in systems))
        else:
            summary["increasing_collision_trends"] = int(sum(
                e["collision_trend"]["trend"] == 1 for e in systems))
            summary["mean_rdf_gap"] = float(np.mean(
                [e["rdf_gap"] for e in systems if e["rdf_gap"] is not None]))
        doc = {
            "schema_version": 1,
            "scenario": cfg.scenario,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "timing": {
                "stages_s": {k: round(v, 3) for k, v in timing.items()},
                "total_s": round(time.perf_counter() - t_total, 3),
                "generator_s_per_time_unit": gen_cost,
                "rollout_s_per_time_unit": roll_cost,
                "speedup_factor": (gen_cost / roll_cost
                                   if roll_cost > 0 else float("inf")),
            },
            "systems": systems,
            "summary": summary,
        }
        jsonschema.validate(doc, REPORT_SCHEMA)
        with open(os.path.join(workdir, "report.json"), "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
        return doc

    doc = stage("report", report)
    log(f"report: {os.path.join(workdir, 'report.json')}")
    log(_timing_table(doc["timing"]))
    return doc


def _timing_table(t: dict) -> str:
    lines = ["stage            seconds", "-" * 26]
    for k, v in t["stages_s"].items():
        lines.append(f"{k:<16} {v:>8.1f}")
    lines.append("-" * 26)
    lines.append(f"{'total':<16} {t['total_s']:>8.1f}")
    lines.append("")
    lines.append(f"generator s per time unit: {t['generator_s_per_time_unit']:.4f}")
    lines.append(f"rollout   s per time unit: {t['rollout_s_per_time_unit']:.4f}")
    lines.append(f"speedup factor:            {t['speedup_factor']:.1f}x")
    return "\n".join(lines)
