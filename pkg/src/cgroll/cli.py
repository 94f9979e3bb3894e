"""Command line surface.

Subcommands: generate, partition, train, rollout, analyze, pipeline,
inspect-checkpoint. Exit codes: 0 success, 2 configuration error,
3 numerical failure, 4 I/O or file-format failure. CGROLL_THREADS caps the
worker count used by fan-out stages.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .analysis import (collision_series, diffusivity_checked,
                       radius_of_gyration_sq, rdf)
from .bundle import ModelBundle
from .config import ExperimentConfig, default_config
from .errors import (ConfigError, FileFormatError, NumericalError,
                     PipelineError, ShapeError)
from .graphcore import load_topology, read_trajectory, save_topology, \
    write_trajectory
from .mdref import generate_dataset
from .partition import group_size_histogram, partition_graph
from .pipeline import run_pipeline
from .rollout import RolloutConfig, rollout_from_trajectory
from .train import train


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config)
    return default_config(getattr(args, "scenario", "chain") or "chain",
                          seed=getattr(args, "seed", 0) or 0)


def _write_json(path, doc):
    if path in (None, "-"):
        json.dump(doc, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
    else:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


# ------------------------------------------------------------- subcommands


def _cmd_generate(args) -> int:
    cfg = _load_config(args)
    man = generate_dataset(
        cfg.dataset, args.out,
        progress=lambda name, i, n: print(f"[{i}/{n}] {name}", file=sys.stderr))
    print(os.path.join(args.out, "manifest.json"))
    print(f"{len(man['systems'])} systems written", file=sys.stderr)
    return 0


def _cmd_partition(args) -> int:
    topo = load_topology(args.topo)
    res = partition_graph(topo, args.group_size, seed=args.seed,
                          balance_eps=args.balance_eps)
    doc = {
        "n_atoms": topo.n_atoms,
        "n_groups": res.n_groups,
        "cut_edges": res.cut_edges,
        "group_sizes": {str(k): v for k, v
                        in sorted(group_size_histogram(res.assignment).items())},
        "assignment": [int(g) for g in res.assignment],
    }
    _write_json(args.out, doc)
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    res = train(cfg, args.data,
                progress=lambda s, n, l, v: print(
                    f"step {s}/{n} loss {l:.4f} val_nll {v:.4f}",
                    file=sys.stderr))
    res.bundle.save(args.out)
    if args.log:
        _write_json(args.log, {
            "config": cfg.to_dict(), "history": res.history,
            "val_history": res.val_history, "best_val_nll": res.best_val_nll,
            "best_step": res.best_step,
            "skipped_windows": res.skipped_windows, "aborted": res.aborted,
            "abort_step": res.abort_step})
    if res.aborted:
        raise NumericalError(
            f"training loss went non-finite at step {res.abort_step}; "
            f"best checkpoint saved to {args.out}")
    print(args.out)
    print(f"best val NLL {res.best_val_nll:.4f} at step {res.best_step}",
          file=sys.stderr)
    return 0


def _infer_topology_path(traj_path: str) -> str:
    base = traj_path[:-4] if traj_path.endswith(".trj") else traj_path
    cand = base + ".topo.json"
    if not os.path.exists(cand):
        raise FileFormatError(
            f"no topology next to {traj_path} (expected {cand}); pass --topo")
    return cand


def _cmd_rollout(args) -> int:
    bundle = ModelBundle.load(args.model)
    topo_path = args.topo or _infer_topology_path(args.init)
    topo = load_topology(topo_path)
    traj = read_trajectory(args.init, topo)
    refine = bundle.refine.enabled if args.refine is None \
        else args.refine == "on"
    rc = RolloutConfig(horizon_steps=args.steps, refine_enabled=refine,
                       seed=args.seed,
                       collision_threshold=args.collision_threshold,
                       abort_on_nan=args.abort_on_nan,
                       deterministic=True if args.deterministic else None)
    out, log = rollout_from_trajectory(traj, bundle, rc,
                                       partition_seed=args.partition_seed)
    write_trajectory(args.out, out)
    base = args.out[:-4] if args.out.endswith(".trj") else args.out
    save_topology(base + ".cgtopo.json", out.topology)
    if args.log:
        _write_json(args.log, {
            "collisions": [int(c) for c in log.collisions],
            "nan_incidents": log.nan_incidents,
            "refine_warnings": log.refine_warnings,
            "aborted": log.aborted, "abort_step": log.abort_step,
            "elapsed_seconds": log.elapsed_seconds,
            "rg2_corrected": None if log.rg2_corrected is None
            else [float(v) for v in log.rg2_corrected]})
    print(args.out)
    print(f"{out.n_frames} frames, {log.nan_incidents} nan incidents, "
          f"{log.elapsed_seconds:.1f}s", file=sys.stderr)
    if log.aborted:
        raise NumericalError(
            f"rollout aborted at step {log.abort_step}; partial trajectory "
            f"written to {args.out}")
    return 0


def _cmd_analyze(args) -> int:
    topo = load_topology(args.topo)
    traj = read_trajectory(args.traj, topo)
    doc = {"n_frames": traj.n_frames, "n_particles": topo.n_atoms,
           "record_interval": traj.record_interval}
    rg2 = radius_of_gyration_sq(traj.positions, topo.atom_weights)
    doc["rg2"] = {"mean": float(rg2.mean()), "std": float(rg2.std()),
                  "p5": float(np.percentile(rg2, 5)),
                  "p95": float(np.percentile(rg2, 95))}
    if args.rdf:
        a, b = args.rdf
        r, raw, norm = rdf(traj.positions, topo.atom_type_ids, a, b,
                           args.rdf_dr, args.rdf_r_max, traj.box)
        doc["rdf"] = {"species": [a, b], "r": [float(x) for x in r],
                      "normalized": [float(x) for x in norm]}
    if args.diffusivity is not None:
        d, _ = diffusivity_checked(traj.positions, traj.times, traj.box,
                                   topo.atom_type_ids, args.diffusivity)
        doc["diffusivity"] = {"species": args.diffusivity, "value": float(d)}
    if args.collisions is not None:
        series = collision_series(traj.positions, args.collisions, traj.box)
        doc["collisions"] = {"threshold": args.collisions,
                             "mean": float(series.mean()),
                             "max": int(series.max()),
                             "total": int(series.sum())}
    _write_json(args.out, doc)
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        plan = run_pipeline(cfg, args.workdir, dry_run=True)
        _write_json(None, plan)
        return 0
    doc = run_pipeline(cfg, args.workdir,
                       log=lambda m: print(m, file=sys.stderr))
    print(os.path.join(args.workdir, "report.json"))
    return 0


def _cmd_inspect(args) -> int:
    bundle = ModelBundle.load(args.model)
    store = bundle.model.store
    n_params = int(sum(t.data.size for t in store.params.values()))
    doc = {
        "dt": bundle.dt,
        "group_size": bundle.group_size,
        "n_atom_types": bundle.model.n_atom_types,
        "n_bond_types": bundle.model.n_bond_types,
        "with_score": bundle.model.with_score,
        "dynamics": {f: getattr(bundle.model.cfg, f)
                     for f in ("k", "dt_multiple", "connectivity_radius",
                               "hidden", "n_mp_layers", "layer_norm",
                               "deterministic", "rg_head")},
        "refine": {"enabled": bundle.refine.enabled,
                   "sigma1": bundle.refine.sigma1,
                   "sigmaL": bundle.refine.sigmaL,
                   "n_levels": bundle.refine.n_levels,
                   "eps": bundle.refine.eps, "n_steps": bundle.refine.n_steps,
                   "denoise_final": bundle.refine.denoise_final},
        "n_parameters": n_params,
        "n_tensors": len(store.params),
        "adam_steps": int(store.step),
    }
    _write_json(args.out, doc)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cgroll",
        description="Learned coarse-grained MD: dataset generation, training, "
                    "long-horizon rollout, and analysis.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config_args(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--scenario", choices=["chain", "box"], default=None,
                        help="built-in default config when --config is absent")
        sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("generate", help="simulate and write a dataset")
    add_config_args(g)
    g.add_argument("--out", required=True, help="dataset directory")
    g.set_defaults(func=_cmd_generate)

    pa = sub.add_parser("partition", help="cluster a bond graph into beads")
    pa.add_argument("--topo", required=True)
    pa.add_argument("--group-size", type=int, required=True)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--balance-eps", type=float, default=0.1)
    pa.add_argument("--out", default=None, help="output JSON (default stdout)")
    pa.set_defaults(func=_cmd_partition)

    t = sub.add_parser("train", help="train a model on a dataset")
    add_config_args(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", default=None, help="training log JSON")
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("rollout", help="simulate with a trained model")
    r.add_argument("--model", required=True)
    r.add_argument("--init", required=True,
                   help="fine trajectory providing the history prefix")
    r.add_argument("--topo", default=None,
                   help="topology JSON (default: sibling of --init)")
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--refine", choices=["on", "off"], default=None,
                   help="default: the checkpoint's setting")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--deterministic", action="store_true")
    r.add_argument("--collision-threshold", type=float, default=0.3)
    r.add_argument("--abort-on-nan", action="store_true")
    r.add_argument("--partition-seed", type=int, default=0)
    r.add_argument("--out", required=True, help="output trajectory")
    r.add_argument("--log", default=None, help="stability log JSON")
    r.set_defaults(func=_cmd_rollout)

    a = sub.add_parser("analyze", help="property estimates for a trajectory")
    a.add_argument("--traj", required=True)
    a.add_argument("--topo", required=True)
    a.add_argument("--rdf", nargs=2, type=int, metavar=("A", "B"))
    a.add_argument("--rdf-dr", type=float, default=0.1)
    a.add_argument("--rdf-r-max", type=float, default=3.5)
    a.add_argument("--diffusivity", type=int, default=None, metavar="SPECIES")
    a.add_argument("--collisions", type=float, default=None, metavar="THRESHOLD")
    a.add_argument("--out", default=None, help="output JSON (default stdout)")
    a.set_defaults(func=_cmd_analyze)

    pl = sub.add_parser("pipeline", help="run all stages and write a report")
    add_config_args(pl)
    pl.add_argument("--workdir", required=True)
    pl.add_argument("--dry-run", action="store_true",
                    help="print the stage plan without executing")
    pl.set_defaults(func=_cmd_pipeline)

    ins = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    ins.add_argument("--model", required=True)
    ins.add_argument("--out", default=None, help="output JSON (default stdout)")
    ins.set_defaults(func=_cmd_inspect)

    return p


_EXIT_CODES = [(ConfigError, 2), (ShapeError, 2), (NumericalError, 3),
               (FileFormatError, 4), (OSError, 4)]


def _exit_code_for(e: BaseException) -> int:
    for typ, code in _EXIT_CODES:
        if isinstance(e, typ):
            return code
    return 3 if isinstance(e, ArithmeticError) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code_for(e.cause)
    except (ConfigError, ShapeError, NumericalError, FileFormatError,
            OSError) as e:
        kind = {2: "config error", 3: "numerical failure", 4: "i/o error"}
        code = _exit_code_for(e)
        print(f"{kind[code]}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
