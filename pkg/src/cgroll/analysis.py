"""Property estimators applied identically to ground-truth and learned runs.

Estimators are pure functions over position arrays. Diffusivity requires
unwrapped coordinates by producer contract; a wrapped input is detected by
impossible inter-frame jumps and rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from .errors import ConfigError, NumericalError, ShapeError
from .graphcore import minimum_image


def radius_of_gyration_sq(positions, weights=None):
    """Mass-weighted mean squared distance to the weighted center of mass.

    positions: (N, 3) or (F, N, 3); returns a scalar or an (F,) series.
    """
    x = np.asarray(positions, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    n = x.shape[1]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = float(w.sum())
    com = np.einsum("fnd,n->fd", x, w) / wsum
    d = x - com[:, None, :]
    rg2 = np.einsum("fnd,fnd,n->f", d, d, w) / wsum
    return float(rg2[0]) if single else rg2


def autocorrelation(series, max_lag=None):
    """Normalized autocorrelation of a scalar series via FFT.

    ACF(0) = 1; lags default to len(series) // 4. Applied to a squared
    quantity (e.g. Rg^2), this reproduces the fourth-moment form
    (<q(t) q(t+y)> - <q>^2) / (<q^2> - <q>^2) with q = Rg^2.
    """
    y = np.asarray(series, dtype=np.float64)
    if y.ndim != 1 or y.size < 4:
        raise ShapeError("autocorrelation needs a 1-D series of length >= 4")
    n = y.size
    if max_lag is None:
        max_lag = n // 4
    max_lag = int(min(max_lag, n - 1))
    yc = y - y.mean()
    var = float(np.dot(yc, yc)) / n
    if var <= 1e-30 * max(1.0, float(np.dot(y, y)) / n):
        raise NumericalError("degenerate series")
    m = 1
    while m < 2 * n:
        m *= 2
    f = np.fft.rfft(yc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[: max_lag + 1]
    acov /= n  # biased estimator, standard for ACF normalization
    return acov / acov[0]


@dataclass
class RelaxationFit:
    t_rel: float
    converged: bool
    n_lags_used: int


def relaxation_time(acf, lag_spacing: float = 1.0) -> RelaxationFit:
    """Exponential fit ACF(y) ~ exp(-y / t_rel) by no-intercept linear
    regression of log ACF on lags before the first dip below 0.05.

    When the ACF never reaches 1/e inside the usable window the fit is
    flagged unconverged and t_rel is a lower bound.
    """
    a = np.asarray(acf, dtype=np.float64)
    if a.ndim != 1 or a.size < 2:
        raise ShapeError("relaxation_time needs an ACF curve")
    below = np.flatnonzero(a < 0.05)
    end = int(below[0]) if below.size else a.size
    ys = np.arange(end, dtype=np.float64) * lag_spacing
    vals = a[:end]
    pos = vals > 0
    ys, vals = ys[pos], vals[pos]
    if ys.size < 2:
        raise NumericalError("ACF has no usable positive segment")
    # minimize sum (log a_y + y/t)^2 -> 1/t = -sum(y log a) / sum(y^2)
    denom = float(np.dot(ys, ys))
    slope = -float(np.dot(ys, np.log(vals))) / denom
    converged = bool(np.any(vals <= np.exp(-1.0))) and slope > 0
    if slope <= 0:
        t_rel = float(ys[-1])  # no decay resolved; report window as bound
    else:
        t_rel = 1.0 / slope
    if not converged:
        t_rel = max(t_rel, float(ys[-1]))
    return RelaxationFit(t_rel=float(t_rel), converged=converged,
                         n_lags_used=int(ys.size))


def rdf(positions, type_ids, species_a, species_b, dr, r_max, box=None):
    """Pair-distance histogram for one species pair.

    positions: (F, N, 3). Returns (r_centers, raw, normalized): raw is the
    per-frame mean pair count divided by 4 pi r^2 dr; normalized additionally
    divides by the ideal-gas pair density so a uniform system tends to 1.
    Self-pairs are excluded for A == B.
    """
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if box is not None and r_max > float(np.min(box)) / 2.0:
        raise ConfigError("r_max exceeds half the smallest box edge")
    types = np.asarray(type_ids)
    ia = np.flatnonzero(types == species_a)
    ib = np.flatnonzero(types == species_b)
    if ia.size == 0 or ib.size == 0:
        nb = int(np.ceil(r_max / dr))
        r = (np.arange(nb) + 0.5) * dr
        return r, np.zeros(nb), np.zeros(nb)
    same = species_a == species_b
    if same:
        pi, pj = np.triu_indices(ia.size, 1)
        pi, pj = ia[pi], ia[pj]
    else:
        pi = np.repeat(ia, ib.size)
        pj = np.tile(ib, ia.size)
    nb = int(np.ceil(r_max / dr))
    counts = np.zeros(nb)
    for f in range(x.shape[0]):
        d = minimum_image(x[f, pi] - x[f, pj], box)
        r = np.sqrt(np.einsum("ij,ij->i", d, d))
        h, _ = np.histogram(r, bins=nb, range=(0.0, nb * dr))
        counts += h
    counts /= x.shape[0]
    r_centers = (np.arange(nb) + 0.5) * dr
    shell = 4.0 * np.pi * r_centers * r_centers * dr
    raw = counts / shell
    if box is None:
        return r_centers, raw, np.zeros(nb)
    vol = float(np.prod(box))
    n_pairs_ideal = (ia.size * (ia.size - 1) / 2.0) if same else float(ia.size * ib.size)
    normalized = raw / (n_pairs_ideal / vol)
    return r_centers, raw, normalized


def _check_unwrapped(x, box):
    if box is None:
        return
    if x.shape[0] < 16:
        return  # window too short to distinguish wrapped from slow motion
    # wrapped input betrays itself by staying confined to [0, L] over a long
    # window; genuinely unwrapped diffusive motion escapes the box
    lo = x.min(axis=(0, 1))
    hi = x.max(axis=(0, 1))
    if np.all(lo >= -1e-9) and np.all(hi <= np.asarray(box) + 1e-9):
        raise NumericalError(
            "positions look wrapped (confined to the box); diffusivity "
            "needs unwrapped coordinates")


def diffusivity(positions, times, type_ids=None, species=None):
    """End-to-end displacement estimator D = <|x(T) - x(0)|^2> / 6T averaged
    over the selected particles, plus the D(t) convergence curve.

    positions must be unwrapped; times is the per-frame time axis.
    """
    x = np.asarray(positions, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if x.ndim != 3 or t.shape != (x.shape[0],):
        raise ShapeError("diffusivity needs (F, N, 3) positions and (F,) times")
    if x.shape[0] < 2:
        raise ShapeError("diffusivity needs at least two frames")
    sel = np.arange(x.shape[1])
    if species is not None:
        if type_ids is None:
            raise ConfigError("species selection needs type_ids")
        sel = np.flatnonzero(np.asarray(type_ids) == species)
        if sel.size == 0:
            raise ConfigError(f"no particles of species {species}")
    d = x[:, sel, :] - x[0, sel, :]
    sq = np.einsum("fnd,fnd->fn", d, d).mean(axis=1)
    dt = t - t[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        curve = np.where(dt > 0, sq / (6.0 * dt), 0.0)
    return float(curve[-1]), curve


def diffusivity_checked(positions, times, box, type_ids=None, species=None):
    """diffusivity plus the wrapped-input guard for periodic systems."""
    _check_unwrapped(np.asarray(positions, dtype=np.float64), box)
    return diffusivity(positions, times, type_ids, species)


def emd_1d(samples_a, samples_b, n_quantiles: int = 1024) -> float:
    """Wasserstein-1 distance via matched sorted quantiles."""
    a = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ShapeError("emd_1d needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    q = (np.arange(n_quantiles) + 0.5) / n_quantiles
    qa = np.quantile(a, q)
    qb = np.quantile(b, q)
    return float(np.mean(np.abs(qa - qb)))


def collision_count(positions, threshold: float, box=None) -> int:
    """Unordered pairs closer than threshold under minimum image."""
    x = np.asarray(positions, dtype=np.float64)
    if threshold <= 0:
        raise ConfigError("collision threshold must be positive")
    n = x.shape[0]
    if n < 2:
        return 0
    pi, pj = np.triu_indices(n, 1)
    d = minimum_image(x[pi] - x[pj], box)
    r2 = np.einsum("ij,ij->i", d, d)
    return int(np.count_nonzero(r2 < threshold * threshold))


def collision_series(positions, threshold: float, box=None) -> np.ndarray:
    x = np.asarray(positions, dtype=np.float64)
    return np.array([collision_count(x[f], threshold, box)
                     for f in range(x.shape[0])], dtype=np.int64)


def pairwise_distance_features(positions, box=None) -> np.ndarray:
    """Flattened upper-triangle pair distances per frame: (F, M(M-1)/2)."""
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    pi, pj = np.triu_indices(x.shape[1], 1)
    d = minimum_image(x[:, pi, :] - x[:, pj, :], box)
    return np.sqrt(np.einsum("fij,fij->fi", d, d))


@dataclass
class EnergySurface:
    components: np.ndarray     # (2, n_features) principal directions
    mean: np.ndarray
    eigenvalues: np.ndarray    # top-2 reference covariance eigenvalues
    edges_x: np.ndarray
    edges_y: np.ndarray
    reference: np.ndarray      # -log density over the 2-D grid
    query: np.ndarray


def pca_energy_surface(reference_features, query_features, bins: int = 32,
                       pseudocount: float = 1e-6) -> EnergySurface:
    """Project both feature sets on the reference's top-2 principal
    directions and return -log normalized histograms over a shared grid."""
    ref = np.asarray(reference_features, dtype=np.float64)
    qry = np.asarray(query_features, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[0] < 3:
        raise ShapeError("reference needs >= 3 frames of features")
    mean = ref.mean(axis=0)
    rc = ref - mean
    cov = rc.T @ rc / (ref.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    if evals.size < 2 or evals[1] <= 1e-12 * max(1.0, evals[0]):
        raise NumericalError("reference features are rank-deficient")
    comps = evecs[:, order[:2]].T
    pr = rc @ comps.T
    pq = (qry - mean) @ comps.T
    both = np.concatenate([pr, pq], axis=0)
    ex = np.histogram_bin_edges(both[:, 0], bins=bins)
    ey = np.histogram_bin_edges(both[:, 1], bins=bins)

    def neg_log(p):
        h, _, _ = np.histogram2d(p[:, 0], p[:, 1], bins=(ex, ey))
        h = h / h.sum()
        return -np.log(h + pseudocount)

    return EnergySurface(components=comps, mean=mean, eigenvalues=evals[:2],
                         edges_x=ex, edges_y=ey,
                         reference=neg_log(pr), query=neg_log(pq))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (QR of a Gaussian with sign fix)."""
    a = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def mann_kendall(series, alpha: float = 0.05):
    """Mann-Kendall trend test with tie correction.

    Returns (trend, p_value, z): trend is -1, 0, +1 for decreasing, none,
    increasing at the given significance level.
    """
    y = np.asarray(series, dtype=np.float64)
    n = y.size
    if n < 8:
        raise ShapeError("mann_kendall needs at least 8 observations")
    s = 0
    for i in range(n - 1):
        s += int(np.sum(np.sign(y[i + 1:] - y[i])))
    _, tie_counts = np.unique(y, return_counts=True)
    var = (n * (n - 1) * (2 * n + 5)
           - np.sum(tie_counts * (tie_counts - 1) * (2 * tie_counts + 5))) / 18.0
    if var <= 0:
        return 0, 1.0, 0.0
    if s > 0:
        z = (s - 1) / np.sqrt(var)
    elif s < 0:
        z = (s + 1) / np.sqrt(var)
    else:
        z = 0.0
    p = 2.0 * (1.0 - sstats.norm.cdf(abs(z)))
    trend = 0
    if p < alpha:
        trend = 1 if z > 0 else -1
    return trend, float(p), float(z)


def spearman(a, b) -> float:
    rho, _ = sstats.spearmanr(np.asarray(a, dtype=np.float64),
                              np.asarray(b, dtype=np.float64))
    return float(rho)


def wilcoxon_paired(a, b):
    """One-sided Wilcoxon signed-rank test that a < b; returns (stat, p)."""
    res = sstats.wilcoxon(np.asarray(a, dtype=np.float64),
                          np.asarray(b, dtype=np.float64),
                          alternative="less", zero_method="wilcox")
    return float(res.statistic), float(res.pvalue)
