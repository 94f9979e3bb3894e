"""Staged runner: artifact layout, provenance-checked reuse, failure naming."""

import dataclasses
import json
import os

import numpy as np
import pytest

from cgroll.config import (ExperimentConfig, PartitionSettings, RolloutSettings,
                           TrainSettings)
from cgroll.bundle import RefineSettings
from cgroll.dynamics import DynamicsConfig
from cgroll.errors import ConfigError, PipelineError
from cgroll.mdref import DatasetRecipe
from cgroll.pipeline import run_pipeline, stage_plan, worker_cap

DYN = DynamicsConfig(k=2, dt_multiple=5, connectivity_radius=3.0,
                     type_emb_dim=3, kind_emb_dim=2, emb_dim=3, emb_hidden=5,
                     hidden=6, n_mp_layers=2, n_mlp_hidden_layers=1)


def chain_cfg(seed=41, **kw):
    return ExperimentConfig(
        seed=seed, scenario="chain",
        dataset=kw.pop("dataset", None) or DatasetRecipe(
            n_train=2, n_val=1, n_test=1, train_frames=60, test_frames=50,
            record_every=5, relax_steps=200, seed=seed),
        dynamics=kw.pop("dynamics", DYN),
        partition=PartitionSettings(group_size=8),
        train=kw.pop("train", TrainSettings(steps=30, batch=1, val_every=15,
                                            val_windows=4, log_every=10)),
        rollout=kw.pop("rollout", RolloutSettings(horizon_steps=15, n_seeds=2)),
        **kw)


@pytest.fixture(scope="module")
def chain_run(tmp_path_factory):
    work = str(tmp_path_factory.mktemp("chainwork"))
    cfg = chain_cfg()
    report = run_pipeline(cfg, work)
    return {"cfg": cfg, "work": work, "report": report}


def test_artifact_layout(chain_run):
    work = chain_run["work"]
    for rel in ("config.json", "data/manifest.json", "partitions.json",
                "model.bin", "train_log.json", "report.json"):
        assert os.path.exists(os.path.join(work, rel)), rel
    rolls = os.listdir(os.path.join(work, "rollouts"))
    names = {r for r in rolls if r.endswith(".trj")}
    assert len(names) == 2                       # 1 test system x 2 seeds
    assert any(r.endswith(".stability.json") for r in rolls)
    assert any(r.endswith(".cgtopo.json") for r in rolls)


def test_report_contents(chain_run):
    rep = chain_run["report"]
    assert rep["scenario"] == "chain"
    assert len(rep["systems"]) == 1
    entry = rep["systems"][0]
    assert entry["emd_model"] > 0 and entry["emd_short"] >= 0
    assert entry["model"]["aborted_seeds"] == 0
    assert rep["summary"]["n_test_systems"] == 1
    assert rep["summary"]["spearman_rg2"] is None  # needs >= 2 test systems
    assert rep["timing"]["speedup_factor"] > 0
    stages = set(rep["timing"]["stages_s"])
    # the report stage serializes the table, so it cannot time itself
    assert stages == {"generate", "preprocess", "train", "rollout", "analyze"}
    on_disk = json.load(open(os.path.join(chain_run["work"], "report.json")))
    assert on_disk["summary"] == rep["summary"]


def test_rerun_reuses_dataset_and_checkpoint(chain_run):
    msgs = []
    rep2 = run_pipeline(chain_run["cfg"], chain_run["work"], log=msgs.append)
    joined = "\n".join(msgs)
    assert "reusing existing dataset" in joined
    assert "reusing existing checkpoint" in joined
    assert rep2["systems"][0]["gt"] == chain_run["report"]["systems"][0]["gt"]


def test_config_change_invalidates_only_training(chain_run):
    cfg2 = dataclasses.replace(
        chain_run["cfg"],
        train=TrainSettings(steps=35, batch=1, val_every=15, val_windows=4,
                            log_every=10))
    msgs = []
    run_pipeline(cfg2, chain_run["work"], log=msgs.append)
    joined = "\n".join(msgs)
    assert "reusing existing dataset" in joined
    assert "reusing existing checkpoint" not in joined
    tlog = json.load(open(os.path.join(chain_run["work"], "train_log.json")))
    assert tlog["config"]["train"]["steps"] == 35


def test_stage_failure_names_the_stage(tmp_path):
    cfg = chain_cfg(dynamics=dataclasses.replace(DYN, dt_multiple=40))
    with pytest.raises(PipelineError, match="stage 'train' failed") as exc:
        with np.errstate(invalid="ignore"):
            run_pipeline(cfg, str(tmp_path / "w"))
    assert exc.value.stage == "train"
    assert isinstance(exc.value.cause, ConfigError)
    # artifacts from the completed stages survive
    assert os.path.exists(tmp_path / "w" / "data" / "manifest.json")
    assert not os.path.exists(tmp_path / "w" / "report.json")


def test_dry_run_touches_nothing(tmp_path):
    cfg = chain_cfg()
    work = tmp_path / "never"
    plan = run_pipeline(cfg, str(work), dry_run=True)
    assert plan == stage_plan(cfg, str(work))
    assert plan["rollouts"] == 2
    assert not work.exists()


def test_box_scenario_report(tmp_path):
    cfg = ExperimentConfig(
        seed=43, scenario="box",
        dataset=DatasetRecipe(scenario="box", n_train=2, n_val=1, n_test=1,
                              train_frames=120, test_frames=100, record_every=5,
                              relax_steps=100, seed=43),
        dynamics=DYN, partition=PartitionSettings(group_size=4),
        refiner=RefineSettings(enabled=True, sigma1=0.1, sigmaL=0.01,
                               n_levels=3, n_steps=2),
        train=TrainSettings(steps=30, batch=1, val_every=15, val_windows=4,
                            log_every=10),
        rollout=RolloutSettings(horizon_steps=15, refine_enabled=True,
                                n_seeds=1))
    rep = run_pipeline(cfg, str(tmp_path / "boxwork"))
    assert rep["scenario"] == "box"
    entry = rep["systems"][0]
    assert "diffusivity" in entry["gt"] and "diffusivity" in entry["model"]
    assert entry["rdf_gap"] is not None and np.isfinite(entry["rdf_gap"])
    assert set(entry["collision_trend"]) == {"trend", "p", "z"}
    assert len(entry["collision_series_mean"]) == 15
    assert "increasing_collision_trends" in rep["summary"]
    assert "mean_rdf_gap" in rep["summary"]
    assert entry["model"]["refine_warnings"] == 0


def test_worker_cap_env(monkeypatch):
    monkeypatch.delenv("CGROLL_THREADS", raising=False)
    assert worker_cap() == 1
    monkeypatch.setenv("CGROLL_THREADS", "4")
    assert worker_cap() == 4
    monkeypatch.setenv("CGROLL_THREADS", "-2")
    assert worker_cap() == 1
    monkeypatch.setenv("CGROLL_THREADS", "lots")
    with pytest.raises(ConfigError, match="CGROLL_THREADS"):
        worker_cap()
