"""One versioned experiment document binding every stage's knobs.

The document is JSON with a pinned schema_version; unknown keys anywhere are
rejected so a typo cannot silently fall back to a default. Sections convert
into the per-module config types, and the global seed fans out to dataset
generation, partitioning, training, and rollout.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import jsonschema

from .bundle import RefineSettings
from .dynamics import DynamicsConfig
from .errors import ConfigError, FileFormatError
from .mdref import DatasetRecipe, box_recipe
from .rollout import RolloutConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 30000
    batch: int = 2
    lr_start: float = 2e-4
    lr_end: float = 2e-5
    clip_norm: float = 1.0
    val_every: int = 1000
    val_windows: int = 32
    log_every: int = 100
    rg_loss_weight: float = 1.0

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch >= 1")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if self.val_every < 1 or self.val_windows < 1 or self.log_every < 1:
            raise ConfigError("val_every, val_windows, log_every must be >= 1")


@dataclass(frozen=True)
class PartitionSettings:
    group_size: int = 8
    balance_eps: float = 0.1


@dataclass(frozen=True)
class RolloutSettings:
    horizon_steps: int = 4000
    refine_enabled: bool = False
    collision_threshold: float = 0.3
    abort_on_nan: bool = False
    n_seeds: int = 3


@dataclass(frozen=True)
class AnalysisSettings:
    rdf_dr: float = 0.1
    rdf_r_max: float = 3.5
    collision_threshold: float = 0.3
    emd_short_fraction: float = 0.2   # GT clip length, as fraction of the test series


_DATASET_FIELDS = [f.name for f in dataclasses.fields(DatasetRecipe)
                   if f.name not in ("seed", "scenario")]
_DYNAMICS_FIELDS = [f.name for f in dataclasses.fields(DynamicsConfig)]
_REFINER_FIELDS = [f.name for f in dataclasses.fields(RefineSettings)]
_TRAIN_FIELDS = [f.name for f in dataclasses.fields(TrainSettings)]
_PARTITION_FIELDS = [f.name for f in dataclasses.fields(PartitionSettings)]
_ROLLOUT_FIELDS = [f.name for f in dataclasses.fields(RolloutSettings)]
_ANALYSIS_FIELDS = [f.name for f in dataclasses.fields(AnalysisSettings)]


def _section_schema(names):
    return {"type": "object", "additionalProperties": False,
            "properties": {n: {} for n in names}}


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "scenario": {"enum": ["chain", "box"]},
        "dataset": _section_schema(_DATASET_FIELDS),
        "partition": _section_schema(_PARTITION_FIELDS),
        "dynamics": _section_schema(_DYNAMICS_FIELDS),
        "refiner": _section_schema(_REFINER_FIELDS),
        "train": _section_schema(_TRAIN_FIELDS),
        "rollout": _section_schema(_ROLLOUT_FIELDS),
        "analysis": _section_schema(_ANALYSIS_FIELDS),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    scenario: str = "chain"
    dataset: DatasetRecipe = None
    partition: PartitionSettings = field(default_factory=PartitionSettings)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    refiner: RefineSettings = field(default_factory=RefineSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    rollout: RolloutSettings = field(default_factory=RolloutSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def __post_init__(self):
        if self.scenario not in ("chain", "box"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.dataset is None:
            base = DatasetRecipe(seed=self.seed) if self.scenario == "chain" \
                else box_recipe(self.seed)
            object.__setattr__(self, "dataset", base)
        if self.dataset.scenario != self.scenario:
            raise ConfigError(
                f"dataset.scenario {self.dataset.scenario!r} does not match "
                f"scenario {self.scenario!r}")

    # ------------------------------------------------------------ converters

    def rollout_config(self, seed_index: int = 0) -> RolloutConfig:
        r = self.rollout
        return RolloutConfig(horizon_steps=r.horizon_steps,
                             refine_enabled=r.refine_enabled,
                             seed=self.seed * 1009 + seed_index,
                             collision_threshold=r.collision_threshold,
                             abort_on_nan=r.abort_on_nan)

    # --------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "scenario": self.scenario,
            "dataset": {n: getattr(self.dataset, n) for n in _DATASET_FIELDS},
            "partition": dataclasses.asdict(self.partition),
            "dynamics": dataclasses.asdict(self.dynamics),
            "refiner": dataclasses.asdict(self.refiner),
            "train": dataclasses.asdict(self.train),
            "rollout": dataclasses.asdict(self.rollout),
            "analysis": dataclasses.asdict(self.analysis),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            raise ConfigError(f"config does not match schema: {e.message}") from e
        seed = int(doc.get("seed", 0))
        scenario = doc.get("scenario", "chain")
        sections = {}
        builders = {
            "partition": (PartitionSettings, {}),
            "dynamics": (DynamicsConfig, {}),
            "refiner": (RefineSettings, {}),
            "train": (TrainSettings, {}),
            "rollout": (RolloutSettings, {}),
            "analysis": (AnalysisSettings, {}),
        }
        for name, (typ, _) in builders.items():
            sections[name] = typ(**doc.get(name, {}))
        dataset = None
        if "dataset" in doc:
            dataset = DatasetRecipe(scenario=scenario, seed=seed, **doc["dataset"])
        return cls(seed=seed, scenario=scenario, dataset=dataset, **sections)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise FileFormatError(f"config is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise FileFormatError("config document must be a JSON object")
        return cls.from_dict(doc)


def default_config(scenario: str = "chain", seed: int = 0) -> ExperimentConfig:
    """The full-scale recipe for a scenario; the starting point for overrides."""
    if scenario == "chain":
        return ExperimentConfig(seed=seed, scenario="chain")
    if scenario == "box":
        return ExperimentConfig(
            seed=seed, scenario="box",
            partition=PartitionSettings(group_size=4),
            dynamics=DynamicsConfig(dt_multiple=25),
            refiner=RefineSettings(enabled=True),
            train=TrainSettings(steps=20000),
            rollout=RolloutSettings(horizon_steps=4000, refine_enabled=True,
                                    n_seeds=1),
        )
    raise ConfigError(f"unknown scenario {scenario!r}")


def smoke_config(scenario: str = "chain", seed: int = 0) -> ExperimentConfig:
    """A minutes-scale end-to-end recipe for pipeline checks."""
    if scenario == "chain":
        dataset = DatasetRecipe(n_train=2, n_val=1, n_test=1, train_frames=2000,
                                test_frames=4000, relax_steps=2000, seed=seed)
        dynamics = DynamicsConfig(k=3, dt_multiple=10, n_mp_layers=3,
                                  hidden=32, emb_hidden=16)
    else:
        dataset = DatasetRecipe(scenario="box", n_train=2, n_val=1, n_test=1,
                                train_frames=1500, test_frames=3000,
                                relax_steps=2000, seed=seed)
        dynamics = DynamicsConfig(k=3, dt_multiple=10, n_mp_layers=3,
                                  hidden=32, emb_hidden=16)
    return ExperimentConfig(
        seed=seed, scenario=scenario, dataset=dataset, dynamics=dynamics,
        partition=PartitionSettings(group_size=8 if scenario == "chain" else 4),
        refiner=RefineSettings(enabled=(scenario == "box"), n_levels=4, n_steps=2),
        train=TrainSettings(steps=500, val_every=100, val_windows=8),
        rollout=RolloutSettings(horizon_steps=200,
                                refine_enabled=(scenario == "box")),
    )
