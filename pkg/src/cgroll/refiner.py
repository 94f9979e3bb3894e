"""Score-based position refinement.

A second graph net reads the dynamics net's last-layer node latents together
with edge geometry of a noisy configuration and outputs GN_S ~ sigma * score
of the noised position density. Because the denoising target at level sigma
is -eps_draw regardless of sigma, one network serves every noise level; the
division by sigma happens at the use sites.

Annealed Langevin dynamics then walks a configuration down a geometric noise
ladder, taking T stochastic steps per level with step size
alpha_i = eps * sigma_i^2 / sigma_L^2, and optionally applies a final
noise-free mean shift x += sigma_L * GN_S(x).

Sigma values and Langevin increments live in normalized position units (the
per-axis position std of the training set); edge geometry is always built in
physical units. The generic ladder core accepts any callable score, which
lets tests drive it with closed-form scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensornet as tn
from .cgmap import build_radius_edges
from .dynamics import DynamicsModel, NormStats
from .errors import ConfigError
from .graphcore import CoarseTopology, wrap_positions
from .tensornet import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Decreasing positive sigmas with a constant ratio."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "sigmas", s)
        if s.ndim != 1 or s.size < 1:
            raise ConfigError("noise schedule needs at least one level")
        if np.any(s <= 0):
            raise ConfigError("noise levels must be positive")
        if s.size > 1:
            ratios = s[:-1] / s[1:]
            if np.any(ratios <= 1.0 - 1e-12):
                raise ConfigError("noise levels must decrease")
            if np.any(np.abs(ratios - ratios[0]) > 1e-9 * ratios[0]):
                raise ConfigError("noise levels must form a geometric sequence")

    @property
    def n_levels(self) -> int:
        return int(self.sigmas.size)

    @classmethod
    def geometric(cls, sigma1: float = 1.0, sigmaL: float = 0.01, n_levels: int = 10):
        if n_levels == 1:
            if not np.isclose(sigma1, sigmaL):
                raise ConfigError("a single-level schedule needs sigma1 == sigmaL")
            return cls(np.array([sigma1]))
        return cls(np.geomspace(sigma1, sigmaL, n_levels))


@dataclass
class LangevinParams:
    eps: float = 2e-5           # base step size; alpha_i = eps * sigma_i^2 / sigma_L^2
    n_steps: int = 5            # Langevin steps per noise level
    denoise_final: bool = True  # final noise-free mean shift

    def __post_init__(self):
        if self.eps < 0:
            raise ConfigError("Langevin step size must be >= 0")
        if self.n_steps < 1:
            raise ConfigError("Langevin needs at least one step per level")


def score_forward(model: DynamicsModel, node_hidden, noisy_positions: np.ndarray,
                  ct: CoarseTopology, box, radius: float) -> Tensor:
    """GN_S of a noisy configuration, conditioned on fixed dynamics latents.

    Node features are the latents alone; all geometry enters through edge
    features rebuilt from the noisy positions.
    """
    if model.score_net is None:
        raise ConfigError("model was built without a score net")
    pos = wrap_positions(noisy_positions, box) if box is not None else noisy_positions
    redges = build_radius_edges(pos, box, radius)
    edge_feats, senders, receivers, _, _ = model.edge_features(ct, pos, redges, box)
    out, _ = model.score_net.forward(tn.as_tensor(node_hidden), edge_feats,
                                     senders, receivers)
    return out


def score_loss(model: DynamicsModel, gt_next_positions: np.ndarray, node_hidden,
               ct: CoarseTopology, box, norm: NormStats, schedule: NoiseSchedule,
               rng: np.random.Generator, radius: float) -> Tensor:
    """Denoising loss at one uniformly drawn noise level.

    With x~ = x + sigma * s * eps_draw (s the per-axis position scale), the
    sigma^2-weighted objective
        0.5 * sigma^2 * ||GN_S(x~)/sigma - (x - x~)/sigma^2||^2
    collapses to 0.5 * ||GN_S(x~) + eps_draw||^2, averaged over beads. Noise
    is synthetic on ground-truth positions; no gradient reaches them.
    """
    i = int(rng.integers(schedule.n_levels))
    sigma = float(schedule.sigmas[i])
    eps_draw = rng.standard_normal(gt_next_positions.shape)
    noisy = gt_next_positions + sigma * (norm.pos_std * eps_draw)
    gn = score_forward(model, node_hidden, noisy, ct, box, radius)
    m = gt_next_positions.shape[0]
    resid = tn.add(gn, eps_draw)
    return tn.mul(tn.tsum(tn.square(resid)), 0.5 / m)


def anneal_langevin(x0: np.ndarray, score_fn, schedule: NoiseSchedule,
                    params: LangevinParams, rng: np.random.Generator):
    """Generic annealed Langevin ladder.

    score_fn(x, sigma) must return GN_S ~ sigma * grad log p_sigma(x), shaped
    like x; x is whatever coordinate array the score understands. Returns
    (x, ok); ok is False when a non-finite value appeared, in which case x is
    the last finite iterate.
    """
    x = np.array(x0, dtype=np.float64)
    sigma_L = float(schedule.sigmas[-1])
    for sigma in schedule.sigmas:
        alpha = params.eps * (sigma * sigma) / (sigma_L * sigma_L)
        for _ in range(params.n_steps):
            gn = np.asarray(score_fn(x, float(sigma)))
            z = rng.standard_normal(x.shape)
            x_new = x + (alpha / 2.0) * gn / sigma + np.sqrt(alpha) * z
            if not np.all(np.isfinite(x_new)):
                return x, False
            x = x_new
    if params.denoise_final:
        gn = np.asarray(score_fn(x, sigma_L))
        x_new = x + sigma_L * gn
        if not np.all(np.isfinite(x_new)):
            return x, False
        x = x_new
    return x, True


def langevin_refine(model: DynamicsModel, start_positions: np.ndarray, node_hidden,
                    ct: CoarseTopology, box, norm: NormStats,
                    schedule: NoiseSchedule, params: LangevinParams,
                    rng: np.random.Generator, radius: float):
    """Refine one CG frame with the trained score net.

    The ladder runs in normalized coordinates; geometry is rebuilt in physical
    units for every score evaluation. Returns (positions, n_warnings): the
    output continues the input frame without wrapping (callers wrap), and on
    any non-finite value the input is returned untouched with n_warnings = 1.
    """
    hidden = node_hidden.data if isinstance(node_hidden, Tensor) else np.asarray(node_hidden)
    scale = norm.pos_std

    def score_fn(x_norm, sigma):
        with tn.no_grad():
            out = score_forward(model, hidden, x_norm * scale, ct, box, radius)
        return out.data

    x_norm, ok = anneal_langevin(start_positions / scale, score_fn, schedule, params, rng)
    if not ok:
        return np.array(start_positions), 1
    return x_norm * scale, 0
