"""Model bundle: everything needed to roll out from a single checkpoint file.

The checkpoint's parameter section carries, besides the trainable tensors,
non-trainable "norm/*" entries (standardization statistics) and "meta/*"
entries (numeric model shape, the CG time step, refiner settings), so a saved
file reconstructs the full model without the training configuration at hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicsConfig, DynamicsModel, NormStats
from .errors import FileFormatError
from .refiner import LangevinParams, NoiseSchedule
from .tensornet import load_checkpoint, save_checkpoint

BUNDLE_META_VERSION = 1


@dataclass
class RefineSettings:
    enabled: bool = False
    sigma1: float = 1.0
    sigmaL: float = 0.01
    n_levels: int = 10
    eps: float = 2e-5
    n_steps: int = 5
    denoise_final: bool = True

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.geometric(self.sigma1, self.sigmaL, self.n_levels)

    def params(self) -> LangevinParams:
        return LangevinParams(eps=self.eps, n_steps=self.n_steps,
                              denoise_final=self.denoise_final)


_CFG_FIELDS = [
    "k", "dt_multiple", "connectivity_radius", "type_emb_dim", "kind_emb_dim",
    "emb_dim", "emb_hidden", "hidden", "n_mp_layers", "n_mlp_hidden_layers",
    "layer_norm", "logvar_min", "logvar_max", "deterministic", "rg_head",
    "rg_head_hidden",
]
_INT_CFG = {"k", "dt_multiple", "type_emb_dim", "kind_emb_dim", "emb_dim",
            "emb_hidden", "hidden", "n_mp_layers", "n_mlp_hidden_layers",
            "rg_head_hidden"}
_BOOL_CFG = {"layer_norm", "deterministic", "rg_head"}


@dataclass
class ModelBundle:
    model: DynamicsModel
    norm: NormStats
    dt: float                   # CG step in time units
    refine: RefineSettings
    group_size: int = 8         # partition target used at training time

    def save(self, path, with_opt: bool = True):
        params = {name: t.data for name, t in self.model.store.params.items()}
        params.update(self.norm.as_dict())
        meta = {
            "meta/version": BUNDLE_META_VERSION,
            "meta/n_atom_types": self.model.n_atom_types,
            "meta/n_bond_types": self.model.n_bond_types,
            "meta/with_score": int(self.model.with_score),
            "meta/dt": self.dt,
            "meta/group_size": self.group_size,
            "meta/refine_enabled": int(self.refine.enabled),
            "meta/refine_sigma1": self.refine.sigma1,
            "meta/refine_sigmaL": self.refine.sigmaL,
            "meta/refine_n_levels": self.refine.n_levels,
            "meta/refine_eps": self.refine.eps,
            "meta/refine_n_steps": self.refine.n_steps,
            "meta/refine_denoise_final": int(self.refine.denoise_final),
        }
        cfg = self.model.cfg
        for f in _CFG_FIELDS:
            meta[f"meta/cfg_{f}"] = float(getattr(cfg, f))
        params.update({k: np.asarray(v, dtype=np.float64) for k, v in meta.items()})
        opt = self.model.store.opt_entries() if with_opt else {}
        save_checkpoint(path, params, opt)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        params, opt = load_checkpoint(path)

        def meta(name):
            key = f"meta/{name}"
            if key not in params:
                raise FileFormatError(f"checkpoint is missing entry {key}")
            return float(np.ravel(params.pop(key))[0])

        version = int(meta("version"))
        if version != BUNDLE_META_VERSION:
            raise FileFormatError(f"unsupported bundle version {version}")
        kwargs = {}
        for f in _CFG_FIELDS:
            v = meta(f"cfg_{f}")
            if f in _INT_CFG:
                kwargs[f] = int(v)
            elif f in _BOOL_CFG:
                kwargs[f] = bool(int(v))
            else:
                kwargs[f] = v
        cfg = DynamicsConfig(**kwargs)
        n_atom_types = int(meta("n_atom_types"))
        n_bond_types = int(meta("n_bond_types"))
        with_score = bool(int(meta("with_score")))
        dt = meta("dt")
        group_size = int(meta("group_size"))
        refine = RefineSettings(
            enabled=bool(int(meta("refine_enabled"))),
            sigma1=meta("refine_sigma1"), sigmaL=meta("refine_sigmaL"),
            n_levels=int(meta("refine_n_levels")), eps=meta("refine_eps"),
            n_steps=int(meta("refine_n_steps")),
            denoise_final=bool(int(meta("refine_denoise_final"))))

        norm_keys = [k for k in params if k.startswith("norm/")]
        norm = NormStats.from_dict({k: params.pop(k) for k in norm_keys})

        model = DynamicsModel(cfg, n_atom_types, n_bond_types, seed=0,
                              with_score=with_score)
        store = model.store
        for name in store.params:
            if name not in params:
                raise FileFormatError(f"checkpoint is missing parameter {name}")
            data = params.pop(name)
            if data.shape != store.params[name].data.shape:
                raise FileFormatError(
                    f"checkpoint parameter {name} has shape {data.shape}, "
                    f"expected {store.params[name].data.shape}")
            store.params[name].data = data
        if params:
            raise FileFormatError(
                f"checkpoint has unknown parameter {sorted(params)[0]}")
        store.load_opt_entries(opt)
        return cls(model=model, norm=norm, dt=dt, refine=refine,
                   group_size=group_size)
