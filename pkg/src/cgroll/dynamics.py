"""Stochastic bead dynamics: embeddings, featurization, Gaussian head, Euler step.

The model is three coupled pieces sharing one parameter store:

* an embedding net over the fine bond graph whose per-atom outputs are
  mean-pooled into time-invariant bead embeddings,
* a dynamics net over the bead graph (CG bonds plus radius edges) that reads
  bead embeddings, bead weights and a history of k backward-difference
  velocities, and emits a per-bead diagonal Gaussian over the time-integrated
  acceleration in normalized units,
* optional heads: a score net (see refiner) fed from the dynamics net's node
  latents, and a residual head correcting coarse Rg^2 toward the fine level.

Positions never enter node features; geometry appears only as minimum-image
edge displacements, so predictions are translation invariant by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensornet as tn
from .cgmap import build_radius_edges
from .errors import ShapeError
from .gnn import MLP, GNNConfig, GraphNet, both_directions
from .graphcore import CoarseTopology, FineTopology, RadiusEdges, minimum_image, wrap_positions
from .tensornet import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))

KIND_CG_BOND = 0
KIND_RADIUS = 1


@dataclass
class DynamicsConfig:
    k: int = 8                      # velocity history length
    dt_multiple: int = 50           # CG step in units of the recording interval
    connectivity_radius: float = 2.5
    type_emb_dim: int = 16
    kind_emb_dim: int = 8
    emb_dim: int = 16
    emb_hidden: int = 32
    hidden: int = 64
    n_mp_layers: int = 7
    n_mlp_hidden_layers: int = 2
    layer_norm: bool = True
    logvar_min: float = -10.0
    logvar_max: float = 4.0
    deterministic: bool = False
    rg_head: bool = False
    rg_head_hidden: int = 32


@dataclass
class NormStats:
    """Per-axis standardization of velocities and target accelerations, plus
    the position scale used by the refiner's noise schedule."""

    vel_mean: np.ndarray
    vel_std: np.ndarray
    acc_mean: np.ndarray
    acc_std: np.ndarray
    pos_std: np.ndarray

    def as_dict(self):
        return {
            "norm/vel_mean": self.vel_mean, "norm/vel_std": self.vel_std,
            "norm/acc_mean": self.acc_mean, "norm/acc_std": self.acc_std,
            "norm/pos_std": self.pos_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(vel_mean=d["norm/vel_mean"], vel_std=d["norm/vel_std"],
                   acc_mean=d["norm/acc_mean"], acc_std=d["norm/acc_std"],
                   pos_std=d["norm/pos_std"])

    @classmethod
    def identity(cls):
        one, zero = np.ones(3), np.zeros(3)
        return cls(zero, one, zero, one, one)


@dataclass
class DynState:
    """Rollout state.

    velocities holds the max(k, 1) most recent backward-difference velocities,
    most recent first; the integrator consumes row 0 even when the model's
    feature window k is zero.
    """

    positions: np.ndarray       # (M, 3), wrapped into the box when periodic
    velocities: np.ndarray      # (max(k, 1), M, 3), most recent first
    dt: float                   # CG step in time units
    step_index: int = 0


@dataclass
class Featurized:
    node_feats: Tensor
    edge_feats: Tensor
    senders: np.ndarray
    receivers: np.ndarray
    pairs: np.ndarray           # undirected pairs backing the directed edges
    kinds: np.ndarray


def finite_diff_velocities(series: np.ndarray, i: int, k: int, dt: float, box=None) -> np.ndarray:
    """k backward-difference velocities ending at frame i, most recent first."""
    if i < k:
        raise ShapeError(f"frame {i} has no {k}-step history")
    out = np.empty((k, series.shape[1], 3))
    for j in range(k):
        out[j] = minimum_image(series[i - j] - series[i - j - 1], box) / dt
    return out


def finite_diff_accel(series: np.ndarray, i: int, dt: float, box=None) -> np.ndarray:
    """Second central difference at frame i: the time-integrated acceleration target."""
    fwd = minimum_image(series[i + 1] - series[i], box)
    bwd = minimum_image(series[i] - series[i - 1], box)
    return (fwd - bwd) / (dt * dt)


def compute_norm_stats(series_list, dt: float, boxes) -> NormStats:
    """Pool per-axis moments over a list of (T, M, 3) CG position series."""
    vels, accs, pos = [], [], []
    for series, box in zip(series_list, boxes):
        v = minimum_image(series[1:] - series[:-1], box) / dt
        vels.append(v.reshape(-1, 3))
        accs.append(((v[1:] - v[:-1]) / dt).reshape(-1, 3))
        if box is None:
            centered = series - series.mean(axis=1, keepdims=True)
            pos.append(centered.reshape(-1, 3))
        else:
            pos.append(wrap_positions(series, box).reshape(-1, 3))
    vel = np.concatenate(vels)
    acc = np.concatenate(accs)
    p = np.concatenate(pos)
    floor = 1e-8
    return NormStats(
        vel_mean=vel.mean(axis=0), vel_std=np.maximum(vel.std(axis=0), floor),
        acc_mean=acc.mean(axis=0), acc_std=np.maximum(acc.std(axis=0), floor),
        pos_std=np.maximum(p.std(axis=0), floor),
    )


class DynamicsModel:
    """All learnable pieces over one parameter store."""

    def __init__(self, cfg: DynamicsConfig, n_atom_types: int, n_bond_types: int,
                 seed: int = 0, with_score: bool = False, store: tn.ParamStore = None):
        self.cfg = cfg
        self.n_atom_types = n_atom_types
        self.n_bond_types = n_bond_types
        self.with_score = with_score
        self.store = store or tn.ParamStore()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6D0DE1])))
        d = cfg.type_emb_dim
        self.atom_table = self.store.create(
            "tables/atom_type", rng.uniform(-1, 1, (n_atom_types, d)) * np.sqrt(3.0 / d))
        self.bond_table = self.store.create(
            "tables/bond_type", rng.uniform(-1, 1, (max(n_bond_types, 1), d)) * np.sqrt(3.0 / d))
        self.kind_table = self.store.create(
            "tables/edge_kind", rng.uniform(-1, 1, (2, cfg.kind_emb_dim)) * np.sqrt(3.0 / cfg.kind_emb_dim))
        self.embed_net = GraphNet(self.store, "embed", GNNConfig(
            node_in=d + 1, edge_in=d, hidden=cfg.emb_hidden, node_out=cfg.emb_dim,
            n_mp_layers=cfg.n_mp_layers, n_mlp_hidden_layers=cfg.n_mlp_hidden_layers,
            layer_norm=cfg.layer_norm), rng)
        self.dyn_net = GraphNet(self.store, "dyn", GNNConfig(
            node_in=cfg.emb_dim + 1 + 3 * cfg.k, edge_in=4 + cfg.kind_emb_dim,
            hidden=cfg.hidden, node_out=6, n_mp_layers=cfg.n_mp_layers,
            n_mlp_hidden_layers=cfg.n_mlp_hidden_layers, layer_norm=cfg.layer_norm), rng)
        self.score_net = None
        if with_score:
            self.score_net = GraphNet(self.store, "score", GNNConfig(
                node_in=cfg.hidden, edge_in=4 + cfg.kind_emb_dim, hidden=cfg.hidden,
                node_out=3, n_mp_layers=cfg.n_mp_layers,
                n_mlp_hidden_layers=cfg.n_mlp_hidden_layers, layer_norm=cfg.layer_norm), rng)
        self.rg_mlp = None
        if cfg.rg_head:
            self.rg_mlp = MLP(self.store, "rg_head", cfg.hidden, cfg.rg_head_hidden, 1,
                              cfg.n_mlp_hidden_layers, rng, zero_output=True)

    # -------------------------------------------------------------- fine level

    def embed_atoms(self, topology: FineTopology) -> Tensor:
        """Per-atom embeddings from types, weights, and the bond graph."""
        a = tn.gather_rows(self.atom_table, topology.atom_type_ids)
        node_feats = tn.concat([a, topology.atom_weights[:, None]], axis=1)
        senders, receivers = both_directions(topology.bonds)
        bond_types = np.concatenate([topology.bond_type_ids, topology.bond_type_ids])
        edge_feats = tn.add(
            tn.add(tn.gather_rows(self.atom_table, topology.atom_type_ids[senders]),
                   tn.gather_rows(self.atom_table, topology.atom_type_ids[receivers])),
            tn.gather_rows(self.bond_table, bond_types))
        out, _ = self.embed_net.forward(node_feats, edge_feats, senders, receivers)
        return out

    def pool_embeddings(self, atom_embeddings: Tensor, assignment: np.ndarray) -> Tensor:
        """Differentiable group-mean pooling; matches cgmap.pool_beads."""
        assignment = np.asarray(assignment, dtype=np.int64)
        m = int(assignment.max()) + 1
        counts = np.bincount(assignment, minlength=m).astype(np.float64)
        sums = tn.scatter_add_rows(atom_embeddings, assignment, m)
        return tn.mul(sums, (1.0 / counts)[:, None])

    # ------------------------------------------------------------ coarse level

    def combine_edges(self, ct: CoarseTopology, positions: np.ndarray,
                      redges: RadiusEdges, box):
        """Union of CG bonds and radius edges; CG-bond kind wins on overlap."""
        cg = ct.cg_bonds
        cg_set = {(int(a), int(b)) for a, b in cg}
        if redges.n_edges:
            mask = np.array([(int(a), int(b)) not in cg_set for a, b in redges.pairs])
            rad = redges.pairs[mask]
        else:
            rad = np.zeros((0, 2), dtype=np.int64)
        pairs = np.concatenate([cg, rad], axis=0) if cg.shape[0] or rad.shape[0] \
            else np.zeros((0, 2), dtype=np.int64)
        kinds = np.concatenate([
            np.full(cg.shape[0], KIND_CG_BOND, dtype=np.int64),
            np.full(rad.shape[0], KIND_RADIUS, dtype=np.int64),
        ])
        disp = minimum_image(positions[pairs[:, 0]] - positions[pairs[:, 1]], box) \
            if pairs.shape[0] else np.zeros((0, 3))
        return pairs, kinds, disp

    def featurize(self, bead_embeddings, ct: CoarseTopology, state: DynState,
                  redges: RadiusEdges, box, norm: NormStats) -> Featurized:
        m = ct.n_beads
        k = self.cfg.k
        if state.velocities.ndim != 3 or state.velocities.shape[0] < k \
                or state.velocities.shape[1:] != (m, 3):
            raise ShapeError(
                f"velocity history shape {state.velocities.shape} is not (>={k}, {m}, 3)")
        vel_norm = (state.velocities[:k] - norm.vel_mean) / norm.vel_std
        vel_flat = np.transpose(vel_norm, (1, 0, 2)).reshape(m, 3 * k)
        node_feats = tn.concat([
            tn.as_tensor(bead_embeddings),
            ct.bead_weights[:, None],
            vel_flat,
        ], axis=1)
        edge_feats, senders, receivers, pairs, kinds = self.edge_features(
            ct, state.positions, redges, box)
        return Featurized(node_feats=node_feats, edge_feats=edge_feats,
                          senders=senders, receivers=receivers,
                          pairs=pairs, kinds=kinds)

    def edge_features(self, ct: CoarseTopology, positions: np.ndarray,
                      redges: RadiusEdges, box):
        """Directed [displacement, distance, kind embedding] edge features.

        Shared by the dynamics featurizer and the score net so both read
        identical geometry for a given configuration.
        """
        pairs, kinds, disp = self.combine_edges(ct, positions, redges, box)
        disp_dir = np.concatenate([disp, -disp], axis=0)
        dist = np.sqrt(np.einsum("ij,ij->i", disp_dir, disp_dir))[:, None] \
            if disp_dir.shape[0] else np.zeros((0, 1))
        kinds_dir = np.concatenate([kinds, kinds])
        geo = np.concatenate([disp_dir, dist], axis=1) if disp_dir.shape[0] \
            else np.zeros((0, 4))
        edge_feats = tn.concat([
            tn.as_tensor(geo),
            tn.gather_rows(self.kind_table, kinds_dir),
        ], axis=1)
        senders, receivers = both_directions(pairs)
        return edge_feats, senders, receivers, pairs, kinds

    def predict(self, feats: Featurized):
        """Per-bead Gaussian over normalized acceleration: (mu, log_var, node latents)."""
        out, hidden = self.dyn_net.forward(feats.node_feats, feats.edge_feats,
                                           feats.senders, feats.receivers)
        mu = tn.slice_cols(out, 0, 3)
        logvar = tn.clip(tn.slice_cols(out, 3, 6), self.cfg.logvar_min, self.cfg.logvar_max)
        return mu, logvar, hidden

    def nll(self, mu: Tensor, logvar: Tensor, target_norm) -> Tensor:
        """Gaussian negative log likelihood, averaged over beads and axes."""
        resid = tn.sub(tn.as_tensor(target_norm), mu)
        return tn.tmean(tn.mul(tn.add(tn.add(LOG_2PI, logvar),
                                      tn.mul(tn.square(resid), tn.exp(tn.mul(logvar, -1.0)))),
                               0.5))

    def rg_correction(self, node_hidden: Tensor) -> Tensor:
        """Scalar fine-minus-coarse Rg^2 correction from mean-pooled latents."""
        if self.rg_mlp is None:
            raise ShapeError("model was built without the residual Rg head")
        m = node_hidden.shape[0]
        pooled = tn.matmul(tn.as_tensor(np.full((1, m), 1.0 / m)), node_hidden)
        return self.rg_mlp(pooled)

    # --------------------------------------------------------------- stepping

    def sample_accel(self, mu: np.ndarray, logvar: np.ndarray, norm: NormStats,
                     rng: np.random.Generator = None, deterministic: bool = None) -> np.ndarray:
        """Draw (or take the mean of) the predicted Gaussian, in physical units."""
        if deterministic is None:
            deterministic = self.cfg.deterministic
        if deterministic:
            a_norm = mu
        else:
            if rng is None:
                raise ShapeError("stochastic sampling requires an rng")
            a_norm = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
        return a_norm * norm.acc_std + norm.acc_mean


def euler_step(state: DynState, accel: np.ndarray, box=None):
    """Semi-implicit Euler: v' = v + a dt, x' = x + v' dt.

    Returns (new state, pre-wrap displacement). Positions are wrapped into the
    box when periodic; the returned displacement is exact for unwrap tracking.
    """
    if state.velocities.shape[0] < 1:
        raise ShapeError("state must carry at least one velocity")
    v_new = state.velocities[0] + accel * state.dt
    disp = v_new * state.dt
    x_new = state.positions + disp
    if box is not None:
        x_new = wrap_positions(x_new, box)
    vel_hist = np.concatenate([v_new[None], state.velocities[:-1]], axis=0)
    return DynState(positions=x_new, velocities=vel_hist, dt=state.dt,
                    step_index=state.step_index + 1), disp


def radius_edges_for(positions: np.ndarray, box, radius: float) -> RadiusEdges:
    """Neighbor edges for featurization; positions may be unwrapped."""
    return build_radius_edges(wrap_positions(positions, box) if box is not None
                              else positions, box, radius)


def rotation_diagnostic(model: DynamicsModel, norm: NormStats, windows,
                        rotations=None, n_rotations: int = 8, seed: int = 0) -> float:
    """Mean |NLL(rotated window) - NLL(window)| over an evaluation set.

    windows: iterable of (bead_embeddings, ct, state, target) with open
    boundaries; each rotation is applied jointly to positions, every
    velocity-history row, and the target. Normalization stays fixed, so the
    gap reflects the architecture together with its per-axis statistics. The
    architecture does not enforce rotational symmetry, so nonzero gaps are
    expected; this only quantifies them.
    """
    if rotations is None:
        from .analysis import random_rotation
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x407A7E])))
        rotations = [random_rotation(rng) for _ in range(n_rotations)]
    radius = model.cfg.connectivity_radius
    gaps = []
    with tn.no_grad():
        for emb, ct, state, target in windows:
            redges = radius_edges_for(state.positions, None, radius)
            feats = model.featurize(emb, ct, state, redges, None, norm)
            mu, logvar, _ = model.predict(feats)
            base = model.nll(mu, logvar, (target - norm.acc_mean) / norm.acc_std).item()
            for rot in rotations:
                rstate = DynState(positions=state.positions @ rot.T,
                                  velocities=state.velocities @ rot.T,
                                  dt=state.dt, step_index=state.step_index)
                redges_r = radius_edges_for(rstate.positions, None, radius)
                feats_r = model.featurize(emb, ct, rstate, redges_r, None, norm)
                mu_r, logvar_r, _ = model.predict(feats_r)
                tgt_r = (target @ rot.T - norm.acc_mean) / norm.acc_std
                gaps.append(abs(model.nll(mu_r, logvar_r, tgt_r).item() - base))
    return float(np.mean(gaps))
