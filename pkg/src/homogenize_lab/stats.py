"""Distribution comparison and convergence diagnostics."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class StatsError(ValueError):
    pass


@dataclass
class SampleSet:
    values: np.ndarray
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size == 0:
            raise StatsError(f"sample set {self.label!r} is empty")
        if not np.all(np.isfinite(v)):
            raise StatsError(f"sample set {self.label!r} contains non-finite values")
        self.values = v

    def __len__(self):
        return self.values.size


def _vals(a) -> np.ndarray:
    return a.values if isinstance(a, SampleSet) else SampleSet(a).values


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """Asymptotic Kolmogorov tail ``2 sum_k (-1)^(k-1) exp(-2 k^2 lam^2)``."""
    if lam <= 0:
        return 1.0
    k = np.arange(1, terms + 1)
    val = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k * k * lam * lam))
    return float(min(1.0, max(0.0, val)))


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Sup-distance between the two ECDFs, evaluated at every merged sample point."""
    a = np.sort(a)
    b = np.sort(b)
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    a, b = _vals(a), _vals(b)
    if a.size < 50 or b.size < 50:
        raise StatsError(f"KS needs at least 50 values per sample, got {a.size} and {b.size}")
    stat = ks_statistic(a, b)
    ne = a.size * b.size / (a.size + b.size)
    return stat, kolmogorov_sf(math.sqrt(ne) * stat)


def wasserstein1(a, b) -> float:
    """W1 between empirical laws: ``int |F_a - F_b| dx``.

    For equal sizes this is the mean absolute difference of the sorted
    samples.
    """
    a, b = np.sort(_vals(a)), np.sort(_vals(b))
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    pts = np.concatenate([a, b])
    pts.sort()
    fa = np.searchsorted(a, pts[:-1], side="right") / a.size
    fb = np.searchsorted(b, pts[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * np.diff(pts)))


def bootstrap_ci(stat, samples, n_boot: int = 500, level: float = 0.95, rng=None):
    """Percentile CI of ``stat(*resampled)`` resampling each sample independently."""
    rng = np.random.default_rng(0) if rng is None else rng
    arrs = [_vals(s) for s in samples]
    reps = np.empty(n_boot)
    for i in range(n_boot):
        reps[i] = stat(*[x[rng.integers(0, x.size, x.size)] for x in arrs])
    lo, hi = np.quantile(reps, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def correlation_ci(x, y, n_boot: int = 2000, level: float = 0.95, rng=None):
    """Pearson correlation of paired samples with a percentile bootstrap CI."""
    x, y = _vals(x), _vals(y)
    if x.size != y.size:
        raise StatsError(f"paired samples differ in size: {x.size} vs {y.size}")
    if x.size < 100:
        raise StatsError("correlation_ci needs at least 100 pairs")
    rng = np.random.default_rng(0) if rng is None else rng
    r = _pearson(x, y)
    reps = np.empty(n_boot)
    chunk = max(1, 2_000_000 // x.size)
    for lo in range(0, n_boot, chunk):
        hi = min(n_boot, lo + chunk)
        idx = rng.integers(0, x.size, (hi - lo, x.size))
        reps[lo:hi] = _pearson(x[idx], y[idx])
    q = np.quantile(reps, [(1 - level) / 2, (1 + level) / 2])
    return r, (float(q[0]), float(q[1]))


def _pearson(x, y):
    xc = x - x.mean(axis=-1, keepdims=True)
    yc = y - y.mean(axis=-1, keepdims=True)
    den = np.sqrt(np.sum(xc * xc, axis=-1) * np.sum(yc * yc, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sum(xc * yc, axis=-1) / den
    r = np.where(den > 0, r, 0.0)
    return float(r) if np.ndim(r) == 0 else r


@dataclass
class WeakAverage:
    per_realization: np.ndarray
    mean: float
    variance: float
    se_mean: float


def weak_average(u_samples, phi_weights, cell_volume: float) -> WeakAverage:
    """Quadrature ``sum_i u(x_i) phi(x_i) dx`` per field realization.

    ``u_samples`` is ``(R, n_x)``: row r holds the values at all starts for
    one field realization.
    """
    u = np.asarray(u_samples, dtype=float)
    w = np.asarray(phi_weights, dtype=float)
    if u.ndim != 2 or u.shape[1] != w.size:
        raise StatsError("u_samples must be (realizations, starts) matching phi_weights")
    if w.size < 20:
        warnings.warn(f"only {w.size} quadrature starts; quadrature bias may dominate", stacklevel=2)
    vals = u @ w * cell_volume
    r = vals.size
    var = float(vals.var(ddof=1)) if r > 1 else 0.0
    return WeakAverage(vals, float(vals.mean()), var, math.sqrt(var / r) if r > 1 else 0.0)


def variance_ci(values, level: float = 0.95):
    """Chi-square CI for the variance of Gaussian-ish samples."""
    from scipy.stats import chi2

    v = _vals(values)
    n = v.size
    s2 = v.var(ddof=1)
    lo = (n - 1) * s2 / chi2.ppf((1 + level) / 2, n - 1)
    hi = (n - 1) * s2 / chi2.ppf((1 - level) / 2, n - 1)
    return float(s2), (float(lo), float(hi))


def gaussian_expectation(func, mean, cov, order: int = 40) -> float:
    """``E[func(mean + L Z)]`` with ``L L^T = cov`` by tensor Gauss-Hermite quadrature.

    Degenerate directions of ``cov`` are dropped from the tensor grid.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    keep = w > 1e-12 * max(1.0, abs(w).max())
    L = V[:, keep] * np.sqrt(w[keep])
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / weights.sum()
    k = L.shape[1]
    if k == 0:
        return float(func(mean[None])[0])
    grids = np.meshgrid(*([nodes] * k), indexing="ij")
    z = np.stack([g.ravel() for g in grids], axis=-1)
    wt = np.ones(z.shape[0])
    for gi in np.meshgrid(*([weights] * k), indexing="ij"):
        wt = wt * gi.ravel()
    pts = mean + z @ L.T
    return float(np.sum(wt * func(pts)))


@dataclass
class LadderRow:
    epsilon: object
    metric: str
    value: float
    ci_lo: float
    ci_hi: float
    n: int


@dataclass
class ConvergenceLadder:
    """Metric per epsilon, epsilons strictly decreasing."""

    epsilons: list
    values: list
    ci: list
    metric: str = "ks"
    n: list = field(default_factory=list)

    def __post_init__(self):
        e = list(self.epsilons)
        if any(b >= a for a, b in zip(e, e[1:])):
            raise StatsError("ladder epsilons must be strictly decreasing")

    def violations(self):
        """Indices i where the metric failed to decrease from step i-1 to i.

        Each entry is ``(i, hard)``; ``hard`` means the CIs do not even overlap.
        """
        out = []
        for i in range(1, len(self.values)):
            if self.values[i] >= self.values[i - 1]:
                hard = self.ci[i][0] > self.ci[i - 1][1]
                out.append((i, hard))
        return out

    @property
    def monotone_trend(self) -> bool:
        v = self.violations()
        return len(v) <= 1 and not any(h for _, h in v)

    def rows(self) -> list[LadderRow]:
        ns = self.n or [0] * len(self.values)
        return [LadderRow(e, self.metric, v, c[0], c[1], k) for e, v, c, k in zip(self.epsilons, self.values, self.ci, ns)]


def ks_ladder(samples_by_eps: dict, limit, n_boot: int = 200, rng=None) -> ConvergenceLadder:
    """KS distance of each eps-sample to the limit sample, with bootstrap CIs."""
    rng = np.random.default_rng(0) if rng is None else rng
    eps = sorted(samples_by_eps, reverse=True)
    vals, cis, ns = [], [], []
    for e in eps:
        s = _vals(samples_by_eps[e])
        stat, _ = ks_two_sample(s, limit)
        vals.append(stat)
        cis.append(bootstrap_ci(ks_statistic, [s, limit], n_boot=n_boot, rng=rng))
        ns.append(s.size)
    return ConvergenceLadder(eps, vals, cis, "ks", ns)


def triangle_ok(a, b, c, tol: float = 1e-12) -> bool:
    """W1 triangle inequality on all orderings of a triple."""
    sets = [a, b, c]
    for x, y, z in itertools.permutations(sets):
        if wasserstein1(x, z) > wasserstein1(x, y) + wasserstein1(y, z) + tol:
            return False
    return True
