"""Homogenized coefficients from Lagrangian correlation integrals.

Every limit coefficient is a time integral of a stationary correlation of
the environment process (the field seen from a unit-scale particle). With
``C_ab(t) = E[O_a(eta_0) O_b(eta_t)]`` for observables ``O = (v_1..v_d,
Phi_1..Phi_M)``:

* effective covariance rate ``A = 2 * sym(int C_vv)``;
* drift constants ``lambda[p, m] = int C_{v_p Phi_m}`` and
  ``mu[m, n] = int C_{Phi_n Phi_m}``;
* noise constants ``kappa_v[j, m] = (int C_{Phi_m v_j} + int C_{v_j Phi_m}) / 2``
  and ``kappa0 = sym(int C_PhiPhi)``.

For a separable nonlinearity ``f = sum_m g_m Phi_m`` the limit SDE
coefficients follow by contracting these constants with ``g`` and its partials:

    b    = sum_{m,p} d_p g_m lambda[p, m] + sum_{m,n} d_u g_m g_n mu[m, n]
    C0   = 2 g^T kappa0 g,   C = 2 kappa_v g,   S c~ = C,   c~0^2 = C0 - |c~|^2.

The factor 2 in ``A``, ``C0`` and ``C`` is the variance rate of the additive
functional CLT; the drift ``b`` carries no such factor.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nonlinearity as nl
from .errors import ConfigError, NumericQualityError
from .microscale import MicroConfig, integrate_batch, sample_environment
from .rng import STREAM_GREEN_KUBO, STREAM_MSD, streams
from .spectral_field import SpectralMeasure

logger = logging.getLogger(__name__)

NORM = 2.0
BATCH = 250


@dataclass
class CorrelatorTable:
    """Lagged correlations of ``(v, Phi)`` along the environment process.

    ``mean[l, a, b]`` estimates ``E[O_a(0) O_b(t_l)]``; ``per_path`` keeps the
    per-path time-averaged curves so integrals get honest standard errors.
    """

    time_grid: np.ndarray
    per_path: np.ndarray          # (N, L+1, K, K)
    dim: int
    alpha_star: float
    functionals: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.per_path.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.per_path.mean(axis=0)

    @property
    def std_errors(self) -> np.ndarray:
        return self.per_path.std(axis=0, ddof=1) / math.sqrt(self.n_paths)

    def _block(self, arr, a, b):
        d = self.dim
        sl = {"v": slice(0, d), "phi": slice(d, None)}
        return arr[..., sl[a], sl[b]]

    @property
    def C_vv(self):
        return self._block(self.mean, "v", "v")

    @property
    def C_vPhi(self):
        return self._block(self.mean, "v", "phi")

    @property
    def C_Phiv(self):
        return self._block(self.mean, "phi", "v")

    @property
    def C_PhiPhi(self):
        return self._block(self.mean, "phi", "phi")

    @property
    def T_GK(self) -> float:
        return float(self.time_grid[-1])

    def path_integrals(self) -> np.ndarray:
        """Per-path ``int_0^T_GK C dt`` plus exponential tail closure, shape ``(N, K, K)``."""
        dt = self.time_grid[1] - self.time_grid[0]
        c = self.per_path
        trap = dt * (c[:, 1:-1].sum(axis=1) + 0.5 * (c[:, 0] + c[:, -1]))
        tail = c[:, -1] / self.alpha_star
        return trap + tail

    def integrals(self):
        ints = self.path_integrals()
        return ints.mean(axis=0), ints.std(axis=0, ddof=1) / math.sqrt(self.n_paths)

    def tail_bound(self) -> np.ndarray:
        var0 = np.abs(np.diagonal(self.mean[0]))
        scale = np.sqrt(np.outer(var0, var0))
        return scale * math.exp(-self.alpha_star * self.T_GK) + 4 * self.std_errors[-1]

    def check_invariants(self):
        """Tail decay and PSD-ness of the zero-lag matrices, within statistical error."""
        end = np.abs(self.mean[-1])
        bad = end > self.tail_bound() + 1e-15
        if np.any(bad):
            raise NumericQualityError(
                f"correlations at T_GK={self.T_GK:g} exceed the exponential tail bound; increase T_GK")
        c0 = self.mean[0]
        se0 = self.std_errors[0]
        for name, sl in (("C_vv(0)", slice(0, self.dim)), ("C_PhiPhi(0)", slice(self.dim, None))):
            blk = c0[sl, sl]
            if blk.size == 0:
                continue
            tol = 4 * float(se0[sl, sl].max()) + 1e-12
            if np.max(np.abs(blk - blk.T)) > 2 * tol or np.linalg.eigvalsh(0.5 * (blk + blk.T)).min() < -tol:
                raise NumericQualityError(f"{name} is not symmetric PSD within statistical error")

    def to_csv_rows(self):
        d = self.dim
        names = [f"v{i + 1}" for i in range(d)] + [f"phi{m + 1}" for m in range(self.mean.shape[-1] - d)]
        header = ["t", "a", "b", "value", "se"]
        rows = []
        mean, se = self.mean, self.std_errors
        for l, t in enumerate(self.time_grid):
            for a, na in enumerate(names):
                for b, nb in enumerate(names):
                    rows.append([repr(float(t)), na, nb, repr(float(mean[l, a, b])), repr(float(se[l, a, b]))])
        return header, rows


def _centered_observables(spec: nl.NonlinearitySpec | None) -> nl.NonlinearitySpec:
    """Replace constant functionals (whose centered part vanishes) by zero observables."""
    if spec is None:
        return nl.ZERO
    return spec


def _lagged_products(obs: np.ndarray, n_lags: int, n_origins: int) -> np.ndarray:
    """Per-path ``mean_{t0 < n_origins} O_a(t0) O_b(t0 + l)`` via FFT; obs is ``(n_t, N, K)``."""
    n_t, n, k = obs.shape
    size = 1 << int(math.ceil(math.log2(n_t + n_origins)))
    head = np.zeros((size, n, k))
    head[:n_origins] = obs[:n_origins]
    full = np.zeros((size, n, k))
    full[:n_t] = obs
    fh = np.fft.rfft(head, axis=0)
    ff = np.fft.rfft(full, axis=0)
    cross = np.fft.irfft(np.conj(fh)[:, :, :, None] * ff[:, :, None, :], n=size, axis=0)
    return np.moveaxis(cross[: n_lags + 1], 0, 1) / n_origins


def estimate_correlators(measure: SpectralMeasure, spec: nl.NonlinearitySpec | None, n_paths: int, T_GK: float,
                         dtau: float | None = None, seed: int = 0, window: float | None = None,
                         threads: int = 1) -> CorrelatorTable:
    """Monte Carlo estimate of the ``(v, Phi)`` correlators up to lag ``T_GK``.

    Each path starts stationary and is averaged over ``window`` worth of time
    origins; paths are i.i.d., which gives the standard errors.
    """
    if T_GK < 5 / measure.alpha_star:
        raise ConfigError("T_GK", f"must be >= 5/alpha_star = {5 / measure.alpha_star:g} for the tail closure")
    if n_paths < 2:
        raise ConfigError("n_paths", "need at least two paths for standard errors")
    spec = _centered_observables(spec)
    bound = MicroConfig.dtau_bound(measure)
    dt_out = min(0.05 / measure.alpha_star, 10 * (dtau if dtau is not None else bound))
    sub = max(1, math.ceil(dt_out / min(bound, dtau if dtau is not None else bound) - 1e-9))
    h = dt_out / sub
    n_lags = int(round(T_GK / dt_out))
    window = 2 * T_GK if window is None else float(window)
    n_origins = max(1, int(round(window / dt_out)))
    horizon = (n_lags + n_origins) * dt_out
    funcs = spec.functionals
    const_mask = np.array([phi.kind == "constant" for phi in funcs], dtype=bool)

    def run(lo, hi):
        times, vs, ph = sample_environment(measure, horizon, h, streams(seed, STREAM_GREEN_KUBO, 0, range(lo, hi)),
                                           spec=spec, out_every=sub)
        if const_mask.any():
            ph[..., const_mask] = 0.0
        return _lagged_products(np.concatenate([vs, ph], axis=-1), n_lags, n_origins)

    bounds = [(lo, min(lo + BATCH, n_paths)) for lo in range(0, n_paths, BATCH)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        parts = list(ex.map(lambda b: run(*b), bounds))
    per_path = np.concatenate(parts, axis=0)
    return CorrelatorTable(
        time_grid=dt_out * np.arange(n_lags + 1),
        per_path=per_path,
        dim=measure.dim,
        alpha_star=measure.alpha_star,
        functionals=[phi.to_dict() for phi in funcs],
        meta={"T_GK": T_GK, "n_paths": n_paths, "seed": seed, "dt_out": dt_out, "dtau": h, "window": window},
    )


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _psd_sqrt(A: np.ndarray, eig_tol: float):
    w, V = np.linalg.eigh(A)
    keep = w > eig_tol
    root = np.where(keep, np.sqrt(np.clip(w, 0, None)), 0.0)
    inv_root = np.where(keep, 1.0 / np.where(keep, root, 1.0), 0.0)
    S = (V * root) @ V.T
    S_pinv = (V * inv_root) @ V.T
    return S, S_pinv, keep, V


def _psd_project(M: np.ndarray, tol: float, name: str):
    """Clamp small negative eigenvalues of a symmetric matrix; raise if beyond ``tol``."""
    w, V = np.linalg.eigh(M)
    if w.size and w.min() < -tol:
        raise NumericQualityError(f"{name} has eigenvalue {w.min():.3g} below -{tol:.3g}; estimates inconsistent")
    clamped = bool(w.size and w.min() < 0)
    if clamped and w.min() < -1e-12 * max(1.0, abs(w).max()):
        logger.warning("%s: clamped negative eigenvalue %.3g within statistical error", name, w.min())
    return (V * np.clip(w, 0, None)) @ V.T, clamped


def effective_diffusivity(table: CorrelatorTable, n_boot: int = 200, boot_seed: int = 0):
    """``A = 2 sym(int C_vv)`` with standard errors and PSD projection."""
    table.check_invariants()
    ints = table.path_integrals()
    d = table.dim
    per = NORM * _sym(ints[:, :d, :d])
    A = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / math.sqrt(per.shape[0])
    A, _ = _psd_project(A, 4 * float(se.max()) + 1e-15, "effective diffusivity")
    return A, se


@dataclass
class HomogenizedCoefficients:
    A: np.ndarray
    S: np.ndarray
    S_pinv: np.ndarray
    lam: np.ndarray          # (d, M)
    mu: np.ndarray           # (M, M)
    kappa_v: np.ndarray      # (d, M)
    kappa0: np.ndarray       # (M, M)
    Q: np.ndarray            # (M, M) quadratic form of c~0^2 in g
    std_errors: dict
    nondegenerate: np.ndarray
    clamped: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def to_json(self) -> dict:
        arr = lambda a: np.asarray(a).tolist()
        return {
            "A": arr(self.A), "S": arr(self.S), "lambda": arr(self.lam), "mu": arr(self.mu),
            "kappa_v": arr(self.kappa_v), "kappa0": arr(self.kappa0), "Q": arr(self.Q),
            "std_errors": {k: arr(v) for k, v in self.std_errors.items()},
            "nondegenerate": arr(self.nondegenerate), "clamped": self.clamped,
            "meta": self.meta,
        }

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, doc: dict) -> "HomogenizedCoefficients":
        A = np.array(doc["A"], dtype=float)
        d = A.shape[0]
        S, S_pinv, keep, _ = _psd_sqrt(A, 1e-8 * max(np.trace(A), 1e-300))
        m = len(doc.get("kappa0", []))
        shape = lambda key, s: np.array(doc.get(key, np.zeros(s)), dtype=float).reshape(s)
        return cls(A=A, S=S, S_pinv=S_pinv, lam=shape("lambda", (d, m)), mu=shape("mu", (m, m)),
                   kappa_v=shape("kappa_v", (d, m)), kappa0=shape("kappa0", (m, m)), Q=shape("Q", (m, m)),
                   std_errors={k: np.array(v) for k, v in doc.get("std_errors", {}).items()},
                   nondegenerate=np.array(doc.get("nondegenerate", keep), dtype=bool),
                   clamped=bool(doc.get("clamped", False)), meta=doc.get("meta", {}))

    @classmethod
    def load(cls, path) -> "HomogenizedCoefficients":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _constants(ints: np.ndarray, d: int):
    A = NORM * _sym(ints[..., :d, :d])
    lam = ints[..., :d, d:]
    mu = np.swapaxes(ints[..., d:, d:], -1, -2)
    kappa_v = 0.5 * (np.swapaxes(ints[..., d:, :d], -1, -2) + ints[..., :d, d:])
    kappa0 = _sym(ints[..., d:, d:])
    return A, lam, mu, kappa_v, kappa0


def _q_form(A, kappa_v, kappa0, eig_tol):
    _, S_pinv, _, _ = _psd_sqrt(A, eig_tol)
    Cv = NORM * kappa_v
    proj = S_pinv @ Cv
    return NORM * kappa0 - proj.T @ proj


def assemble_coefficients(spec: nl.NonlinearitySpec | None, table: CorrelatorTable, n_boot: int = 200,
                          boot_seed: int = 0) -> HomogenizedCoefficients:
    """Contract the correlator integrals into limit-SDE constants.

    ``c~0^2(g) = g^T Q g`` with ``Q = 2 kappa0 - (2 kappa_v)^T A^+ (2 kappa_v)``;
    Cauchy-Schwarz makes ``Q`` PSD in exact arithmetic, so negative eigenvalues
    are clamped when within 4 bootstrap standard errors and rejected otherwise.
    """
    table.check_invariants()
    d = table.dim
    ints = table.path_integrals()
    n = ints.shape[0]
    A, lam, mu, kappa_v, kappa0 = _constants(ints.mean(axis=0), d)
    per_A = NORM * _sym(ints[:, :d, :d])
    se_A = per_A.std(axis=0, ddof=1) / math.sqrt(n)
    A, _ = _psd_project(A, 4 * float(se_A.max()) + 1e-15, "effective diffusivity")
    A = _sym(A)
    eig_tol = 1e-8 * max(float(np.trace(A)), 1e-300)
    S, S_pinv, keep, V = _psd_sqrt(A, eig_tol)

    se_ints = ints.std(axis=0, ddof=1) / math.sqrt(n)
    _, se_lam, se_mu, se_kv, se_k0 = _constants(se_ints, d)

    Q = _q_form(A, kappa_v, kappa0, eig_tol)
    Q = _sym(Q)
    m = Q.shape[0]
    clamped = False
    se_Q = np.zeros_like(Q)
    if m:
        rng = np.random.default_rng(boot_seed)
        eig_boot = []
        q_boot = []
        for _ in range(n_boot):
            idx = rng.integers(0, n, n)
            Ab, _, _, kvb, k0b = _constants(ints[idx].mean(axis=0), d)
            qb = _sym(_q_form(Ab, kvb, k0b, eig_tol))
            q_boot.append(qb)
            eig_boot.append(np.linalg.eigvalsh(qb).min())
        se_Q = np.std(q_boot, axis=0, ddof=1)
        tol = 4 * float(np.std(eig_boot, ddof=1)) + 1e-12 * max(1.0, float(np.abs(Q).max()))
        Q, clamped = _psd_project(Q, tol, "c~0^2 form")

    # components of C along degenerate directions of A must vanish
    null = V[:, ~keep]
    if null.size and m:
        leak = np.abs(null.T @ (NORM * kappa_v))
        lim = 4 * np.abs(null.T) @ (NORM * se_kv) + 1e-12
        if np.any(leak > lim):
            raise NumericQualityError("noise coupling has a component along a degenerate direction of A")

    return HomogenizedCoefficients(
        A=A, S=S, S_pinv=S_pinv, lam=lam, mu=mu, kappa_v=kappa_v, kappa0=kappa0, Q=Q,
        std_errors={"A": se_A, "lambda": se_lam, "mu": se_mu, "kappa_v": se_kv, "kappa0": se_k0, "Q": se_Q},
        nondegenerate=keep, clamped=clamped,
        meta=dict(table.meta, functionals=table.functionals, spec=spec.to_list() if spec is not None else []),
    )


def coefficients_for_spec(coeffs: HomogenizedCoefficients, spec: nl.NonlinearitySpec) -> "LimitCoefficients":
    if coeffs.lam.shape[1] != spec.num_terms:
        raise ConfigError("f", f"coefficients were computed for {coeffs.lam.shape[1]} terms, spec has {spec.num_terms}")
    return LimitCoefficients(coeffs, spec)


@dataclass
class LimitCoefficients:
    """Closed-form ``b``, ``c~_0..c~_d`` and their u-derivatives for a separable spec."""

    coeffs: HomogenizedCoefficients
    spec: nl.NonlinearitySpec

    def _g(self, s, y, u):
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float)
        ys = y.reshape(y.shape[:-1] + (1,) * (u.ndim - (y.ndim - 1)) + y.shape[-1:])
        terms = self.spec.terms
        shape = np.broadcast_shapes(ys.shape[:-1], u.shape)
        if not terms:
            z = np.zeros(shape + (0,))
            return z, z, np.zeros(shape + (y.shape[-1], 0))
        g = np.stack([np.broadcast_to(t[0](s, ys, u), shape) for t in terms], axis=-1)
        gu = np.stack([np.broadcast_to(t[0].du(s, ys, u), shape) for t in terms], axis=-1)
        gx = np.stack([np.broadcast_to(t[0].dx(s, ys, u), shape + (y.shape[-1],)) for t in terms], axis=-1)
        return g, gu, gx

    def _b(self, g, gu, gx):
        c = self.coeffs
        return np.einsum("...pm,pm->...", gx, c.lam) + np.einsum("...m,mn,...n->...", gu, c.mu, g)

    def b(self, s, y, u):
        return self._b(*self._g(s, y, u))

    def noise(self, s, y, u):
        """``(c~, dc~/du)``, each of shape ``batch + (d + 1,)``; index 0 is the extra driver."""
        g, gu, _ = self._g(s, y, u)
        return self._noise(g, gu)

    def step_terms(self, s, y, u, h: float = 1e-5):
        """``(b, db/du, c~, dc~/du)`` sharing one coefficient evaluation at ``u``."""
        g, gu, gx = self._g(s, y, u)
        db = (self.b(s, y, u + h) - self.b(s, y, u - h)) / (2 * h)
        c, cu = self._noise(g, gu)
        return self._b(g, gu, gx), db, c, cu

    def _noise(self, g, gu):
        c = self.coeffs
        L = c.S_pinv @ (NORM * c.kappa_v)            # (d, M)
        ct = np.einsum("jm,...m->...j", L, g)
        ct_u = np.einsum("jm,...m->...j", L, gu)
        q = np.einsum("...m,mn,...n->...", g, c.Q, g)
        c0 = np.sqrt(np.clip(q, 0, None))
        dq = 2 * np.einsum("...m,mn,...n->...", gu, c.Q, g)
        pos = c0 > 1e-12
        c0_u = np.where(pos, dq / (2 * np.where(pos, c0, 1.0)), 0.0)
        return np.concatenate([c0[..., None], ct], axis=-1), np.concatenate([c0_u[..., None], ct_u], axis=-1)

    def db_du(self, s, y, u, h: float = 1e-5):
        return (self.b(s, y, u + h) - self.b(s, y, u - h)) / (2 * h)

    def C0(self, s, y, u):
        g, _, _ = self._g(s, y, u)
        return NORM * np.einsum("...m,mn,...n->...", g, self.coeffs.kappa0, g)

    def C(self, s, y, u):
        g, _, _ = self._g(s, y, u)
        return NORM * np.einsum("jm,...m->...j", self.coeffs.kappa_v, g)


def compute_coefficients(measure, spec, n_paths=2000, T_GK=10.0, dtau=None, seed=0, threads=1, window=None):
    table = estimate_correlators(measure, spec, n_paths, T_GK, dtau=dtau, seed=seed, threads=threads, window=window)
    return assemble_coefficients(spec, table), table


def msd_diffusivity(measure, epsilon: float, n_paths: int, T: float = 1.0, seed: int = 0, dtau=None,
                    threads: int = 1):
    """Covariance rate of eps-level displacements, ``Cov[X(T) - x] / (T - t)``, with standard errors."""
    cfg = MicroConfig(epsilon, 0.0, T, dtau=dtau)
    x0 = np.zeros(measure.dim)

    def run(lo, hi):
        res = integrate_batch(measure, cfg, np.tile(x0, (hi - lo, 1)), streams(seed, STREAM_MSD, 0, range(lo, hi)))
        return res.positions[-1] - x0

    bounds = [(lo, min(lo + BATCH, n_paths)) for lo in range(0, n_paths, BATCH)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        disp = np.concatenate(list(ex.map(lambda b: run(*b), bounds)), axis=0)
    centered = disp - disp.mean(axis=0)
    prods = centered[:, :, None] * centered[:, None, :]
    A = prods.mean(axis=0) * n_paths / (n_paths - 1) / T
    se = prods.std(axis=0, ddof=1) / math.sqrt(n_paths) / T
    return A, se, disp
