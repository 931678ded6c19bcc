"""Limit objects: effective Brownian paths, the integral equation and the limit SDE flow."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nonlinearity as nl
from .green_kubo import HomogenizedCoefficients, LimitCoefficients
from .microscale import FlowTable, assert_monotone, check_grid, invert_flow

logger = logging.getLogger(__name__)


@dataclass
class LimitPath:
    """Effective Brownian path on a uniform grid over ``[t, T]``.

    ``increments`` holds the ``d + 1`` standard Brownian increments per step
    (driver 0 is the extra noise of the limit SDE, drivers 1..d generate X);
    ``positions`` is ``x + S * cumsum(increments[:, 1:])``.
    """

    times: np.ndarray        # (n+1,)
    increments: np.ndarray   # (..., n, d+1)
    positions: np.ndarray    # (..., n+1, d)
    S: np.ndarray

    @property
    def endpoint(self) -> np.ndarray:
        return self.positions[..., -1, :]

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def refined(self, rng) -> "LimitPath":
        """Halve the grid by Brownian-bridge midpoints; grid-point values are kept.

        ``rng`` is a generator or a list of generators (one per leading path).
        """
        inc = self.increments
        dt = self.times[1] - self.times[0]
        gens = rng if isinstance(rng, (list, tuple)) else None
        if gens is not None:
            z = np.stack([g.standard_normal(inc.shape[-2:]) for g in gens])
        else:
            z = rng.standard_normal(inc.shape)
        half = 0.5 * inc + 0.5 * np.sqrt(dt) * z
        new_inc = np.stack([half, inc - half], axis=-2).reshape(inc.shape[:-2] + (2 * inc.shape[-2], inc.shape[-1]))
        times = np.linspace(self.times[0], self.times[-1], 2 * self.n_steps + 1)
        return LimitPath(times, new_inc, _positions(self.positions[..., 0, :], self.S, new_inc), self.S)


def _positions(x0, S, increments):
    d = S.shape[0]
    steps = sum(increments[..., 1 + j, None] * S[:, j] for j in range(d))
    cum = np.cumsum(steps, axis=-2)
    x0 = np.asarray(x0, dtype=float)
    return np.concatenate([np.broadcast_to(x0[..., None, :], cum.shape[:-2] + (1, cum.shape[-1])),
                           x0[..., None, :] + cum], axis=-2)


def sample_effective_bm(coeffs: HomogenizedCoefficients, t: float, T: float, n_steps: int, rng, x=None) -> LimitPath:
    """Exact Gaussian sample of ``x + S beta`` (plus the extra driver) on a grid.

    ``rng`` may be one generator (one path) or a list of generators (one path
    each, stacked along a leading axis). Directions where ``A`` is degenerate
    have zero rows in ``S``, so those coordinates stay frozen at ``x``.
    """
    d = coeffs.dim
    x = np.zeros(d) if x is None else np.asarray(x, dtype=float)
    dt = (T - t) / n_steps
    if isinstance(rng, (list, tuple)):
        z = np.stack([g.standard_normal((n_steps, d + 1)) for g in rng])
        x = np.broadcast_to(x, (len(rng), d))
    else:
        z = rng.standard_normal((n_steps, d + 1))
    inc = np.sqrt(dt) * z
    return LimitPath(np.linspace(t, T, n_steps + 1), inc, _positions(x, coeffs.S, inc), coeffs.S)


def solve_linear_limit(u0, path: LimitPath):
    """``u0(X(T))``."""
    return u0(path.endpoint)


def _path_at(path: LimitPath, i: int, frac: float) -> np.ndarray:
    p = path.positions
    if frac == 0.0:
        return p[..., i, :]
    if frac == 1.0:
        return p[..., i + 1, :]
    return (1 - frac) * p[..., i, :] + frac * p[..., i + 1, :]


def solve_integral_equation(spec: nl.NonlinearitySpec, path: LimitPath, u0, substeps: int = 1):
    """Solve ``u0(X(T)) - U(s) = int_s^T f_bar(r, X(r), U(r)) dr`` for ``U(t)``.

    Equivalent to the terminal-value ODE ``dU/ds = f_bar(s, X(s), U)``,
    ``U(T) = u0(X(T))``, integrated backward with RK4 along the piecewise
    linear path; ``substeps`` RK4 steps are taken per path segment.
    """
    times = path.times
    n = times.size - 1
    u = np.asarray(u0(path.endpoint), dtype=float)
    fbar = lambda s, x, v: nl.mean_f(spec, s, x, v)
    for i in range(n - 1, -1, -1):
        seg = times[i + 1] - times[i]
        for j in range(substeps, 0, -1):
            a1, a0 = j / substeps, (j - 1) / substeps
            s1 = times[i] + a1 * seg
            h = -seg / substeps
            x1 = _path_at(path, i, a1)
            xm = _path_at(path, i, 0.5 * (a0 + a1))
            x0 = _path_at(path, i, a0)
            k1 = fbar(s1, x1, u)
            k2 = fbar(s1 + h / 2, xm, u + h / 2 * k1)
            k3 = fbar(s1 + h / 2, xm, u + h / 2 * k2)
            k4 = fbar(s1 + h, x0, u + h * k3)
            u = u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


@dataclass
class LimitFlow:
    times: np.ndarray
    u_grid: np.ndarray
    values: np.ndarray     # (..., n+1, n_u)
    xi: np.ndarray         # (..., n+1, n_u)
    flagged: bool = False

    @property
    def terminal(self) -> np.ndarray:
        return self.values[..., -1, :]

    def as_table(self, positions) -> FlowTable:
        return FlowTable(self.times, self.u_grid, self.values, self.xi, positions)


def simulate_limit_flow(limit: LimitCoefficients, u_grid, path: LimitPath, *, check_every: int = 1,
                        store_every: int | None = None, trajectory_ids=None) -> LimitFlow:
    """Euler-Maruyama for all u-columns of the limit SDE with common drivers.

    ``xi = exp(Z)`` where ``Z`` accumulates ``(db/du - |dc~/du|^2 / 2) ds +
    dc~/du . dbeta``; ordering of the columns is asserted every
    ``check_every`` steps and at the end. Only the initial and terminal
    columns are stored unless ``store_every`` is given.
    """
    g = check_grid(u_grid)
    inc = path.increments
    batch = inc.shape[:-2]
    n = path.n_steps
    u = np.broadcast_to(g, batch + g.shape).astype(float).copy()
    z = np.zeros_like(u)
    stride = n if store_every is None else int(store_every)
    if n % stride:
        raise ValueError("store_every must divide the number of steps")
    vals = np.empty(batch + (n // stride + 1,) + g.shape)
    xis = np.empty_like(vals)
    vals[..., 0, :] = u
    xis[..., 0, :] = 1.0
    ids = np.arange(int(np.prod(batch))) if trajectory_ids is None else np.asarray(trajectory_ids)
    flagged = False
    for i in range(n):
        s = path.times[i]
        ds = path.times[i + 1] - s
        x = path.positions[..., i, :]
        dB = inc[..., i, :]
        b, db, c, cu = limit.step_terms(s, x, u)
        if not flagged and limit.coeffs.clamped and np.any((c[..., 0] == 0) & (cu[..., 0] == 0)):
            flagged = True
        dBu = dB[..., None, :]
        u = u + b * ds + np.sum(c * dBu, axis=-1)
        z = z + (db - 0.5 * np.sum(cu ** 2, axis=-1)) * ds + np.sum(cu * dBu, axis=-1)
        if (i + 1) % stride == 0:
            vals[..., (i + 1) // stride, :] = u
            xis[..., (i + 1) // stride, :] = np.exp(z)
        if (i + 1) % check_every == 0 or i + 1 == n:
            assert_monotone(u.reshape(-1, g.size), ids, where=f"s={path.times[i + 1]:.6g} (limit SDE)")
    if flagged:
        logger.warning("c~0 was clamped at zero on part of the run; its u-derivative was set to 0 there")
    return LimitFlow(path.times[::stride], g, vals, xis, flagged)


def invert_limit_flow(flow: LimitFlow, u0, path: LimitPath):
    """``s_T^{-1}(u0(X(T)))`` for one or many paths."""
    target = np.asarray(u0(path.endpoint), dtype=float)
    term = flow.terminal
    if term.ndim == 1:
        return invert_flow(term, flow.u_grid, target)
    return np.array([invert_flow(v, flow.u_grid, tg) for v, tg in zip(term, target)])
