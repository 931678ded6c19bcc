"""Divergence-free Gaussian velocity field with Ornstein-Uhlenbeck modes.

The field is a finite sum of Fourier modes

    V(t, x) = sum_j A_j(t) cos(k_j . x) + B_j(t) sin(k_j . x),

where every amplitude A_j, B_j is a stationary OU process in R^d with
covariance ``sigma_j * P(k_j)`` and relaxation rate ``alpha_j``. ``P(k)`` is
the projector onto the plane orthogonal to ``k``, which keeps every
realization exactly incompressible. The resulting space-time covariance is

    R(t, x) = sum_j sigma_j P(k_j) exp(-alpha_j |t|) cos(k_j . x).

Amplitude arrays have shape ``(..., M, 2, d)``: the leading axes index
independent realizations, axis ``-2`` holds the (cos, sin) pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class FieldError(ValueError):
    """Invalid spectral measure or field operation."""


def projector(k) -> np.ndarray:
    """Incompressible projection ``I - k k^T / |k|^2``.

    >>> projector([1.0, 0.0])
    array([[0., 0.],
           [0., 1.]])
    """
    k = np.asarray(k, dtype=float)
    nrm2 = float(k @ k)
    if nrm2 == 0.0:
        raise FieldError("projector is undefined for the zero wavevector")
    return np.eye(k.size) - np.outer(k, k) / nrm2


@dataclass(frozen=True)
class SpectralMode:
    k: tuple[float, ...]
    sigma: float
    alpha: float


@dataclass(frozen=True, eq=False)
class SpectralMeasure:
    """Discrete spectral measure: wavevectors, weights and decay rates.

    Parameters
    ----------
    k : array (M, d)
        Wavevectors, nonzero, ``|k| <= K0``; no two may coincide.
    sigma : array (M,)
        Positive mode weights (velocity squared).
    alpha : array (M,)
        Temporal decay rates in ``[alpha_star, A_star]``.
    """

    k: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    K0: float | None = None
    alpha_star: float | None = None
    A_star: float | None = None
    proj: np.ndarray = field(init=False, repr=False)
    _noise_map: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = np.atleast_2d(np.asarray(self.k, dtype=float))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if k.shape[0] == 0:
            raise FieldError("spectral measure needs at least one mode")
        m, d = k.shape
        if d < 2:
            raise FieldError(f"dimension must be >= 2, got {d}")
        if sigma.shape != (m,) or alpha.shape != (m,):
            raise FieldError("sigma and alpha must have one entry per mode")
        norms = np.linalg.norm(k, axis=1)
        if np.any(norms == 0):
            raise FieldError("zero wavevector in spectral measure")
        if np.any(sigma <= 0):
            raise FieldError("mode weights must be strictly positive")
        if np.any(alpha <= 0):
            raise FieldError("decay rates must be strictly positive")
        K0 = float(norms.max()) if self.K0 is None else float(self.K0)
        a_lo = float(alpha.min()) if self.alpha_star is None else float(self.alpha_star)
        a_hi = float(alpha.max()) if self.A_star is None else float(self.A_star)
        if np.any(norms > K0 * (1 + 1e-12)):
            raise FieldError(f"wavevector outside spectral cutoff K0={K0}")
        if np.any(alpha < a_lo * (1 - 1e-12)) or np.any(alpha > a_hi * (1 + 1e-12)):
            raise FieldError(f"decay rates must lie in [{a_lo}, {a_hi}]")
        for i in range(m):
            if np.any(np.all(np.isclose(k[i + 1:], k[i], rtol=0, atol=1e-14), axis=1)):
                raise FieldError(f"duplicate wavevector {k[i].tolist()}")
        for name, val in (("k", k), ("sigma", sigma), ("alpha", alpha), ("K0", K0),
                          ("alpha_star", a_lo), ("A_star", a_hi)):
            object.__setattr__(self, name, val)
        proj = np.eye(d)[None] - np.einsum("mi,mj->mij", k, k) / (norms ** 2)[:, None, None]
        object.__setattr__(self, "proj", proj)
        # sqrt(sigma) P(k), used as a right factor on row-vector noise
        object.__setattr__(self, "_noise_map", np.sqrt(sigma)[:, None, None] * proj)
        for arr in (k, sigma, alpha, proj):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.k.shape[1]

    @property
    def num_modes(self) -> int:
        return self.k.shape[0]

    @property
    def modes(self) -> list[SpectralMode]:
        return [SpectralMode(tuple(k), float(s), float(a)) for k, s, a in zip(self.k, self.sigma, self.alpha)]

    @property
    def v_rms(self) -> float:
        """``sqrt(trace R(0,0)) / d``, the speed scale used for step bounds."""
        return float(np.sqrt(np.trace(self.covariance(0.0, np.zeros(self.dim)))) / self.dim)

    def scaled(self, factor: float) -> "SpectralMeasure":
        """Same measure with every weight multiplied by ``factor``."""
        return SpectralMeasure(self.k, self.sigma * factor, self.alpha, self.K0, self.alpha_star, self.A_star)

    def covariance(self, t: float, x) -> np.ndarray:
        return covariance_exact(self, t, x)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "K0": self.K0,
            "alpha_star": self.alpha_star,
            "A_star": self.A_star,
            "modes": [{"k": k.tolist(), "sigma": float(s), "alpha": float(a)}
                      for k, s, a in zip(self.k, self.sigma, self.alpha)],
        }


def shear_measure(sigma: float = 1.0, alpha: float = 1.0, kappa: float = 1.0, dim: int = 2) -> SpectralMeasure:
    """Single mode ``k = (kappa, 0, ...)``; the field only has components orthogonal to e_1."""
    k = np.zeros((1, dim))
    k[0, 0] = kappa
    return SpectralMeasure(k, [sigma], [alpha])


def isotropic_shell(num_modes: int = 16, K0: float = 1.0, energy: float = 1.0, alpha: float = 1.0,
                    A_star: float | None = None, seed: int = 0) -> SpectralMeasure:
    """2-D shell spectrum with ``2 * num_modes`` directions equally spaced on the circle.

    Magnitudes are uniform on ``[K0/2, K0]`` (drawn from ``seed``), weights are
    equal and sum to ``energy``. With ``A_star`` given, the decay rate grows
    linearly in ``|k|`` from ``alpha`` at ``|k| = 0`` to ``A_star`` at ``K0``.
    """
    if num_modes < 1:
        raise FieldError("num_modes must be >= 1")
    n = 2 * num_modes
    rng = np.random.default_rng(seed)
    mags = rng.uniform(K0 / 2, K0, size=n)
    ang = np.pi * np.arange(n) / num_modes
    k = mags[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
    sig = np.full(n, energy / n)
    if A_star is None:
        alph = np.full(n, alpha)
        return SpectralMeasure(k, sig, alph, K0=K0, alpha_star=alpha, A_star=alpha)
    alph = alpha + (A_star - alpha) * mags / K0
    return SpectralMeasure(k, sig, alph, K0=K0, alpha_star=alpha, A_star=A_star)


def measure_from_dict(spec: dict) -> SpectralMeasure:
    """Build a measure from a config block (explicit ``modes`` or a ``preset``)."""
    spec = dict(spec)
    preset = spec.pop("preset", None)
    if preset == "shear":
        return shear_measure(**spec)
    if preset == "isotropic-shell":
        return isotropic_shell(**spec)
    if preset is not None:
        raise FieldError(f"unknown measure preset {preset!r}")
    modes = spec.get("modes")
    if not modes:
        raise FieldError("measure needs 'modes' or 'preset'")
    k = np.array([m["k"] for m in modes], dtype=float)
    dim = spec.get("dim", k.shape[1])
    if k.shape[1] != dim:
        raise FieldError(f"mode wavevectors have length {k.shape[1]}, expected dim={dim}")
    return SpectralMeasure(k, [m["sigma"] for m in modes], [m["alpha"] for m in modes],
                           K0=spec.get("K0"), alpha_star=spec.get("alpha_star"), A_star=spec.get("A_star"))


@dataclass
class FieldState:
    """Field amplitudes at fast time ``time``; ``amps`` has shape ``(M, 2, d)``."""

    time: float
    amps: np.ndarray

    def copy(self) -> "FieldState":
        return FieldState(self.time, self.amps.copy())


def project_noise(measure: SpectralMeasure, noise: np.ndarray) -> np.ndarray:
    """Map standard normals of shape ``(..., M, 2, d)`` to ``N(0, sigma_j P(k_j))`` draws."""
    return noise @ measure._noise_map


def ou_step(measure: SpectralMeasure, amps: np.ndarray, dt: float, noise: np.ndarray) -> np.ndarray:
    """Exact OU transition over ``dt`` given standard normal ``noise``."""
    decay = np.exp(-measure.alpha * dt)[:, None, None]
    kick = np.sqrt(-np.expm1(-2.0 * measure.alpha * dt))[:, None, None]
    return decay * amps + kick * project_noise(measure, noise)


def _noise_shape(measure: SpectralMeasure) -> tuple[int, int, int]:
    return (measure.num_modes, 2, measure.dim)


def sample_stationary(measure: SpectralMeasure, rng: np.random.Generator, time: float = 0.0) -> FieldState:
    amps = project_noise(measure, rng.standard_normal(_noise_shape(measure)))
    return FieldState(time, amps)


def evolve(state: FieldState, dt: float, rng: np.random.Generator, measure: SpectralMeasure) -> FieldState:
    """Advance the state by ``dt`` with the exact OU transition.

    One normal d-vector per amplitude is drawn even when ``dt == 0`` so
    that stream consumption does not depend on the step size.
    """
    if dt < 0:
        raise FieldError(f"negative time step {dt}")
    noise = rng.standard_normal(_noise_shape(measure))
    return FieldState(state.time + dt, ou_step(measure, state.amps, dt, noise))


def _phases(measure: SpectralMeasure, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # explicit sum over the few coordinates: a BLAS product would round
    # differently depending on the batch size
    x = np.asarray(x, dtype=float)
    ph = x[..., 0, None] * measure.k[:, 0]
    for i in range(1, measure.dim):
        ph = ph + x[..., i, None] * measure.k[:, i]
    return np.cos(ph), np.sin(ph)


def evaluate_amps(measure: SpectralMeasure, amps: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Velocity for batched amplitudes ``(..., M, 2, d)`` at points ``(..., d)``."""
    c, s = _phases(measure, x)
    cs = np.stack([c, s], axis=-1)
    cs = cs.reshape(cs.shape[:-2] + (1, -1))
    flat = amps.reshape(amps.shape[:-3] + (-1, amps.shape[-1]))
    return (cs @ flat)[..., 0, :]


def gradient_amps(measure: SpectralMeasure, amps: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``dV_i/dx_l`` for batched amplitudes; shape ``(..., d, d)``."""
    c, s = _phases(measure, x)
    coef = -s[..., None] * amps[..., 0, :] + c[..., None] * amps[..., 1, :]
    return np.einsum("...mi,ml->...il", coef, measure.k)


def evaluate(state: FieldState, x, measure: SpectralMeasure) -> np.ndarray:
    return evaluate_amps(measure, state.amps, np.asarray(x, dtype=float))


def evaluate_gradient(state: FieldState, x, measure: SpectralMeasure) -> np.ndarray:
    return gradient_amps(measure, state.amps, np.asarray(x, dtype=float))


def covariance_exact(measure: SpectralMeasure, t: float, x) -> np.ndarray:
    """Exact ``R_il(t, x) = E[V_i(s + t, y + x) V_l(s, y)]``."""
    x = np.asarray(x, dtype=float)
    w = measure.sigma * np.exp(-measure.alpha * abs(t)) * np.cos(measure.k @ x)
    return np.einsum("m,mij->ij", w, measure.proj)
