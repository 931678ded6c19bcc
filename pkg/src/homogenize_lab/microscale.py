"""Integrators for the eps-level characteristics, solution flows and environment.

All integration runs in fast time ``tau = s / eps^2``. With ``Y = X / eps`` the
characteristic equation ``dX/ds = V(s/eps^2, X/eps) / eps`` becomes
``dX/dtau = eps V(tau, X/eps)``; along it the semilinear solution obeys

    dU/dtau = eps   f(eps^2 tau, X, U, V(tau, X/eps + .))   (alpha_exponent = 1)
    dU/dtau = eps^2 f(...)                                   (alpha_exponent = 0)

Steps are Heun (explicit trapezoid) and the field is advanced between step
endpoints by the exact OU transition, never interpolated. Batches of paths are
integrated together; each path reads its own random stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nonlinearity as nl
from .errors import ConfigError, FlowMonotonicityError
from .rng import BatchNormals
from .spectral_field import SpectralMeasure, evaluate_amps, ou_step, project_noise


@dataclass(frozen=True)
class MicroConfig:
    epsilon: float
    t_start: float
    T: float
    dtau: float | None = None
    out_stride: int | None = None
    n_out: int = 1
    field_substeps: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon", f"must be positive, got {self.epsilon}")
        if not self.T > self.t_start:
            raise ConfigError("T", "must exceed t")
        if self.field_substeps < 1:
            raise ConfigError("field_substeps", "must be >= 1")

    @staticmethod
    def dtau_bound(measure: SpectralMeasure) -> float:
        """Largest admissible fast-time step for ``measure``.

        Temporal: a tenth of the fastest relaxation time. Spatial: a step moves
        ``X / eps`` by at most a tenth of the shortest wavelength.
        """
        spatial = 0.1 * (2 * math.pi / measure.K0) / max(measure.v_rms, 1e-300)
        return min(0.1 / measure.A_star, spatial)

    def resolve(self, measure: SpectralMeasure) -> "ResolvedGrid":
        bound = self.dtau_bound(measure)
        dtau = bound if self.dtau is None else float(self.dtau)
        if dtau <= 0:
            raise ConfigError("dtau", "must be positive")
        if dtau > bound * (1 + 1e-9):
            raise ConfigError("dtau", f"{dtau:g} exceeds the stability bound {bound:g} for this measure")
        span = (self.T - self.t_start) / self.epsilon ** 2
        n_steps = max(1, math.ceil(span / dtau - 1e-9))
        stride = self.out_stride
        if stride is None:
            n_out = max(1, min(self.n_out, n_steps))
            if n_steps % n_out:
                n_steps = n_out * math.ceil(n_steps / n_out)
            stride = n_steps // n_out
        elif n_steps % stride:
            n_steps = stride * math.ceil(n_steps / stride)
        return ResolvedGrid(self.epsilon, self.t_start, self.T, span / n_steps, n_steps, stride)


@dataclass(frozen=True)
class ResolvedGrid:
    epsilon: float
    t_start: float
    T: float
    h: float
    n_steps: int
    stride: int

    @property
    def tau0(self) -> float:
        return self.t_start / self.epsilon ** 2

    @property
    def times(self) -> np.ndarray:
        n_out = self.n_steps // self.stride
        return self.t_start + (self.T - self.t_start) * np.arange(n_out + 1) / n_out


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    positions: np.ndarray
    u_values: np.ndarray | None = None
    xi_values: np.ndarray | None = None
    seed_id: object = None

    def to_csv_rows(self):
        d = self.positions.shape[-1]
        header = ["s"] + [f"x{i + 1}" for i in range(d)] + ["u", "xi"]
        rows = []
        for i, s in enumerate(self.times):
            u = "" if self.u_values is None else repr(float(np.ravel(self.u_values[i])[0]))
            xi = "" if self.xi_values is None else repr(float(np.ravel(self.xi_values[i])[0]))
            rows.append([repr(float(s))] + [repr(float(v)) for v in self.positions[i]] + [u, xi])
        return header, rows


@dataclass
class BatchResult:
    times: np.ndarray
    positions: np.ndarray          # (n_out+1, N, d) or (n_out+1, N, P, d)
    u_values: np.ndarray | None    # (n_out+1, N, n_u)
    xi_values: np.ndarray | None   # (n_out+1, N, n_u)


def _noise_source(measure: SpectralMeasure, rngs, normals):
    if normals is not None:
        return normals
    return BatchNormals(list(rngs), (measure.num_modes, 2, measure.dim))


def integrate_batch(
    measure: SpectralMeasure,
    cfg: MicroConfig,
    x0,
    rngs=None,
    *,
    spec: nl.NonlinearitySpec | None = None,
    alpha_exponent: int = 1,
    u_init=None,
    track_xi: bool = False,
    normals=None,
    null_field: bool = False,
    check_monotone: bool = False,
    trajectory_ids=None,
) -> BatchResult:
    """Integrate characteristics (and optionally U columns and xi) for a batch.

    ``x0`` is ``(N, d)``; ``u_init`` is ``(N, n_u)`` or ``(n_u,)`` shared by all
    paths. Each path consumes one ``(M, 2, d)`` normal draw for its stationary
    start, then ``field_substeps`` draws per step.
    """
    grid = cfg.resolve(measure)
    eps = grid.epsilon
    x = np.array(x0, dtype=float, ndmin=2)
    n = x.shape[0]
    # (N, P, d) starts: P points share the field of each path
    multi = x.ndim == 3
    expand = (lambda a: a[:, None]) if multi else (lambda a: a)
    draw = _noise_source(measure, rngs, normals)
    amps = expand(project_noise(measure, draw()))
    if null_field:
        amps = np.zeros_like(amps)

    with_u = spec is not None and u_init is not None
    if with_u and multi:
        raise ValueError("solution columns are only supported with one start per path")
    if with_u:
        if alpha_exponent not in (0, 1):
            raise ValueError("alpha_exponent must be 0 or 1")
        if alpha_exponent == 1 and not spec.centered():
            raise ConfigError("f", "the alpha=1 scaling requires a centered nonlinearity (f_bar == 0)")
        u = np.array(u_init, dtype=float, ndmin=1)
        if u.ndim == 1:
            u = np.tile(u, (n, 1))
        u_scale = eps if alpha_exponent == 1 else eps ** 2
        logxi = np.zeros_like(u) if track_xi else None
    else:
        u = logxi = None

    def rhs(tau, x, u, amps):
        y = x / eps
        vel = evaluate_amps(measure, amps, y)
        dx = eps * vel
        du = dl = None
        if with_u:
            s = eps ** 2 * tau
            phis = np.stack([phi.values(measure, vel) for phi in spec.functionals], axis=-1) if spec.terms \
                else np.zeros((n, 0))
            du = u_scale * nl.combine(spec, s, x, u, phis)
            if track_xi:
                dl = u_scale * nl.combine_du(spec, s, x, u, phis)
        return dx, du, dl

    h = grid.h
    sub = cfg.field_substeps
    h_sub = h / sub
    n_out = grid.n_steps // grid.stride
    pos = np.empty((n_out + 1,) + x.shape)
    pos[0] = x
    us = xis = None
    if with_u:
        us = np.empty((n_out + 1,) + u.shape)
        us[0] = u
        if track_xi:
            xis = np.empty_like(us)
            xis[0] = 1.0
    ids = trajectory_ids if trajectory_ids is not None else np.arange(n)
    tau = grid.tau0
    for step in range(1, grid.n_steps + 1):
        k1x, k1u, k1l = rhs(tau, x, u, amps)
        new_amps = amps
        for _ in range(sub):
            noise = draw()
            if not null_field:
                new_amps = ou_step(measure, new_amps, h_sub, expand(noise))
        xp = x + h * k1x
        up = u + h * k1u if with_u else None
        k2x, k2u, k2l = rhs(tau + h, xp, up, new_amps)
        x = x + 0.5 * h * (k1x + k2x)
        if with_u:
            u = u + 0.5 * h * (k1u + k2u)
            if track_xi:
                logxi = logxi + 0.5 * h * (k1l + k2l)
        amps = new_amps
        tau = grid.tau0 + step * h
        if step % grid.stride == 0:
            j = step // grid.stride
            pos[j] = x
            if with_u:
                us[j] = u
                if track_xi:
                    xis[j] = np.exp(logxi)
                if check_monotone:
                    assert_monotone(u, ids, where=f"s={grid.times[j]:.6g}")
    return BatchResult(grid.times, pos, us, xis)


def assert_monotone(columns: np.ndarray, ids, where: str = ""):
    """Raise if any row of ``columns`` is not strictly increasing."""
    bad = np.any(np.diff(columns, axis=-1) <= 0, axis=-1)
    if np.any(bad):
        ids = [int(i) for i in np.asarray(ids)[np.nonzero(bad)[0]]]
        raise FlowMonotonicityError(
            f"solution flow lost strict ordering {where} for trajectories {ids[:10]}"
            f"{' ...' if len(ids) > 10 else ''}; reduce the step size or check the nonlinearity regime",
            ids,
        )


def simulate_characteristic(measure, cfg: MicroConfig, x0, rng, *, null_field=False, seed_id=None) -> TrajectoryRecord:
    res = integrate_batch(measure, cfg, np.asarray(x0, dtype=float)[None], [rng], null_field=null_field)
    return TrajectoryRecord(res.times, res.positions[:, 0], seed_id=seed_id)


def simulate_semilinear(measure, cfg: MicroConfig, spec, alpha_exponent: int, x0, u0_init: float, rng,
                        *, seed_id=None) -> TrajectoryRecord:
    res = integrate_batch(measure, cfg, np.asarray(x0, dtype=float)[None], [rng], spec=spec,
                          alpha_exponent=alpha_exponent, u_init=np.array([u0_init]))
    return TrajectoryRecord(res.times, res.positions[:, 0], res.u_values[:, 0, 0], seed_id=seed_id)


@dataclass
class FlowTable:
    """Solution flow ``S(s, u_i)`` and its u-derivative on a fixed u-grid."""

    times: np.ndarray
    u_grid: np.ndarray
    values: np.ndarray   # (n_out+1, n_u)
    xi: np.ndarray       # (n_out+1, n_u)
    positions: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


def check_grid(u_grid) -> np.ndarray:
    g = np.asarray(u_grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
        raise ConfigError("u_grid", "must be a strictly increasing list of at least two values")
    return g


def default_u_grid(u0_sup: float, n: int = 41) -> np.ndarray:
    r = 2 * u0_sup + 1
    return np.linspace(-r, r, n)


def simulate_flow_map(measure, cfg: MicroConfig, spec, u_grid, x0, rng=None, *, alpha_exponent: int = 1,
                      normals=None, seed_id=None) -> FlowTable:
    """Flow map on ``u_grid`` driven by one field realization and one shared characteristic."""
    g = check_grid(u_grid)
    res = integrate_batch(measure, cfg, np.asarray(x0, dtype=float)[None], None if rng is None else [rng],
                          spec=spec, alpha_exponent=alpha_exponent, u_init=g, track_xi=True,
                          normals=normals, check_monotone=True,
                          trajectory_ids=[seed_id if seed_id is not None else 0])
    return FlowTable(res.times, g, res.u_values[:, 0], res.xi_values[:, 0], res.positions[:, 0])


def invert_flow(values, u_grid, target):
    """Solve ``S(T, u) = target`` on a monotone table by piecewise-linear inversion.

    Targets outside the image ``[values[0], values[-1]]`` are returned
    unchanged (identity tail beyond the support of the nonlinearity).
    """
    values = np.asarray(values, dtype=float)
    u_grid = np.asarray(u_grid, dtype=float)
    if np.any(np.diff(values) <= 0):
        raise FlowMonotonicityError("cannot invert a non-monotone flow table")
    target = np.asarray(target, dtype=float)
    inside = (target >= values[0]) & (target <= values[-1])
    out = np.where(inside, np.interp(target, values, u_grid), target)
    return out if out.ndim else float(out)


def invert_flows(values, u_grid, targets) -> np.ndarray:
    """Row-wise :func:`invert_flow` for ``values`` of shape ``(N, n_u)``."""
    return np.array([invert_flow(v, u_grid, t) for v, t in zip(values, targets)])


def sample_environment(measure, horizon: float, dtau: float, rng=None, *, spec=None, out_every: int = 1,
                       normals=None, n_paths: int | None = None):
    """Lagrangian observables of the unit-scale environment process.

    Starts from a stationary field with the particle at the origin and returns
    ``(times, v, phi)`` with ``v`` of shape ``(n_t, N, d)`` (the velocity at the
    particle) and ``phi`` of shape ``(n_t, N, M)`` (the functionals of ``spec``
    at the particle).
    """
    if rng is not None and normals is None:
        rngs = rng if isinstance(rng, (list, tuple)) else [rng]
    else:
        rngs = None
    draw = _noise_source(measure, rngs, normals)
    n_steps = max(1, math.ceil(horizon / dtau - 1e-9))
    n_steps = out_every * math.ceil(n_steps / out_every)
    h = horizon / n_steps
    amps = project_noise(measure, draw())
    n = amps.shape[0]
    x = np.zeros((n, measure.dim))
    funcs = spec.functionals if spec is not None else []
    n_t = n_steps // out_every + 1
    vs = np.empty((n_t, n, measure.dim))
    ph = np.empty((n_t, n, len(funcs)))

    def observe(j, vel):
        vs[j] = vel
        for m, f in enumerate(funcs):
            ph[j, :, m] = f.values(measure, vel)

    vel = evaluate_amps(measure, amps, x)
    observe(0, vel)
    for step in range(1, n_steps + 1):
        new_amps = ou_step(measure, amps, h, draw())
        xp = x + h * vel
        vel_p = evaluate_amps(measure, new_amps, xp)
        x = x + 0.5 * h * (vel + vel_p)
        amps = new_amps
        vel = evaluate_amps(measure, amps, x)
        if step % out_every == 0:
            observe(step // out_every, vel)
    times = h * out_every * np.arange(n_t)
    return times, vs, ph
