"""Separable reaction terms ``f(t, x, u, w) = sum_m g_m(t, x, u) * Phi_m(w)``.

``g_m`` comes from a small closed-form library with analytic partials and
``Phi_m`` is a functional of the field seen from a shift point: a constant,
a velocity component, or a centered product of two components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral_field import SpectralMeasure, covariance_exact, evaluate_amps


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Field functionals


@dataclass(frozen=True)
class ChaosFunctional:
    kind: str  # "constant" | "field" | "quadratic"
    p: int = 0
    q: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "field", "quadratic"):
            raise SpecError(f"unknown functional kind {self.kind!r}")
        if self.p < 0 or self.q < 0:
            raise SpecError("axis indices must be non-negative")

    @property
    def centered(self) -> bool:
        return self.kind != "constant"

    def check_dim(self, dim: int):
        if self.kind == "field" and self.p >= dim:
            raise SpecError(f"FieldComponent axis {self.p} out of range for d={dim}")
        if self.kind == "quadratic" and max(self.p, self.q) >= dim:
            raise SpecError(f"CenteredQuadratic axes ({self.p}, {self.q}) out of range for d={dim}")

    def values(self, measure: SpectralMeasure, velocity: np.ndarray) -> np.ndarray:
        """Evaluate on the velocity at the shift point, ``velocity`` shape ``(..., d)``."""
        if self.kind == "constant":
            return np.ones(velocity.shape[:-1])
        if self.kind == "field":
            return velocity[..., self.p]
        r0 = covariance_exact(measure, 0.0, np.zeros(measure.dim))[self.p, self.q]
        return velocity[..., self.p] * velocity[..., self.q] - r0

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind in ("field", "quadratic"):
            out["p"] = self.p
        if self.kind == "quadratic":
            out["q"] = self.q
        return out


def Constant() -> ChaosFunctional:
    return ChaosFunctional("constant")


def FieldComponent(p: int) -> ChaosFunctional:
    return ChaosFunctional("field", p)


def CenteredQuadratic(p: int, q: int) -> ChaosFunctional:
    return ChaosFunctional("quadratic", p, q)


# ---------------------------------------------------------------------------
# Smooth coefficients


@dataclass(frozen=True)
class SmoothCoefficient:
    """Closed-form ``g(t, x, u)`` from the expression library.

    ``expr`` is one of

    * ``"const"``: ``c``
    * ``"cos"``: ``offset + amp * cos(w_t t + w_x . x + w_u u + phase)``
    * ``"sin"``: same with ``sin``
    * ``"bump"``: ``offset + amp * exp(-|x - center|^2 / (2 width^2) - (u - u_center)^2 / (2 u_width^2))``

    Parameters not relevant to ``expr`` are ignored.
    """

    expr: str
    c: float = 0.0
    amp: float = 1.0
    offset: float = 0.0
    w_t: float = 0.0
    w_x: tuple[float, ...] = ()
    w_u: float = 0.0
    phase: float = 0.0
    center: tuple[float, ...] = ()
    width: float = 1.0
    u_center: float = 0.0
    u_width: float = float("inf")

    def __post_init__(self):
        if self.expr not in ("const", "cos", "sin", "bump"):
            raise SpecError(f"unknown expression id {self.expr!r}")
        if self.expr == "bump" and (self.width <= 0 or self.u_width <= 0):
            raise SpecError("bump widths must be positive")

    def _wx(self, dim):
        w = np.zeros(dim)
        w[: len(self.w_x)] = self.w_x
        return w

    def _arg(self, t, x, u):
        return self.w_t * t + x @ self._wx(x.shape[-1]) + self.w_u * u + self.phase

    def _bump(self, x, u):
        c = np.zeros(x.shape[-1])
        c[: len(self.center)] = self.center
        r2 = np.sum((x - c) ** 2, axis=-1) / (2 * self.width ** 2)
        if np.isfinite(self.u_width):
            r2 = r2 + (u - self.u_center) ** 2 / (2 * self.u_width ** 2)
        return np.exp(-r2), c

    def __call__(self, t, x, u):
        """Evaluate with broadcasting; ``x`` has trailing axis d."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape)
        if self.expr == "const":
            return np.full(shape, self.c)
        if self.expr == "cos":
            return self.offset + self.amp * np.cos(self._arg(t, x, u)) + np.zeros(shape)
        if self.expr == "sin":
            return self.offset + self.amp * np.sin(self._arg(t, x, u)) + np.zeros(shape)
        e, _ = self._bump(x, u)
        return self.offset + self.amp * e + np.zeros(shape)

    def du(self, t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape)
        if self.expr == "const":
            return np.zeros(shape)
        if self.expr == "cos":
            return -self.amp * self.w_u * np.sin(self._arg(t, x, u)) + np.zeros(shape)
        if self.expr == "sin":
            return self.amp * self.w_u * np.cos(self._arg(t, x, u)) + np.zeros(shape)
        if not np.isfinite(self.u_width):
            return np.zeros(shape)
        e, _ = self._bump(x, u)
        return -self.amp * e * (u - self.u_center) / self.u_width ** 2 + np.zeros(shape)

    def dx(self, t, x, u):
        """Gradient in x, shape ``broadcast(x[..., :-1], u) + (d,)``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        d = x.shape[-1]
        shape = np.broadcast_shapes(x.shape[:-1], u.shape) + (d,)
        if self.expr == "const":
            return np.zeros(shape)
        if self.expr == "cos":
            return -self.amp * np.sin(self._arg(t, x, u))[..., None] * self._wx(d) + np.zeros(shape)
        if self.expr == "sin":
            return self.amp * np.cos(self._arg(t, x, u))[..., None] * self._wx(d) + np.zeros(shape)
        e, c = self._bump(x, u)
        return -self.amp * e[..., None] * (x - c) / self.width ** 2 + np.zeros(shape)

    @property
    def depends_on_u(self) -> bool:
        if self.expr in ("cos", "sin"):
            return self.w_u != 0.0 and self.amp != 0.0
        if self.expr == "bump":
            return np.isfinite(self.u_width) and self.amp != 0.0
        return False

    @property
    def sup_bound(self) -> float:
        """Upper bound for ``|g|`` on the whole domain."""
        if self.expr == "const":
            return abs(self.c)
        return abs(self.offset) + abs(self.amp)

    @property
    def is_zero(self) -> bool:
        if self.expr == "const":
            return self.c == 0.0
        return self.offset == 0.0 and self.amp == 0.0

    def to_dict(self) -> dict:
        defaults = SmoothCoefficient(self.expr)
        out = {"expr": self.expr}
        for name in ("c", "amp", "offset", "w_t", "w_x", "w_u", "phase", "center", "width", "u_center", "u_width"):
            val = getattr(self, name)
            if val != getattr(defaults, name):
                out[name] = list(val) if isinstance(val, tuple) else val
        return out


def coefficient_from_dict(spec: dict) -> SmoothCoefficient:
    spec = dict(spec)
    expr = spec.pop("expr", None)
    if expr is None:
        raise SpecError("coefficient needs an 'expr' id")
    for key in ("w_x", "center"):
        if key in spec:
            spec[key] = tuple(float(v) for v in spec[key])
    try:
        return SmoothCoefficient(expr, **spec)
    except TypeError as exc:
        raise SpecError(f"bad parameters for expression {expr!r}: {exc}") from None


# ---------------------------------------------------------------------------
# Separable nonlinearity


@dataclass(frozen=True)
class NonlinearitySpec:
    terms: tuple[tuple[SmoothCoefficient, ChaosFunctional], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((g, phi) for g, phi in self.terms))

    @property
    def num_terms(self) -> int:
        return len(self.terms)

    @property
    def functionals(self) -> list[ChaosFunctional]:
        return [phi for _, phi in self.terms]

    def centered(self) -> bool:
        """True iff the mean part ``f_bar`` vanishes identically."""
        return not any(phi.kind == "constant" and not g.is_zero for g, phi in self.terms)

    def is_zero(self) -> bool:
        return all(g.is_zero for g, _ in self.terms)

    def check_dim(self, dim: int):
        for _, phi in self.terms:
            phi.check_dim(dim)

    @property
    def sup_bound(self) -> float:
        """Bound for ``sum_m |g_m|``."""
        return sum(g.sup_bound for g, _ in self.terms)

    def to_list(self) -> list[dict]:
        return [{"g": g.to_dict(), "phi": phi.to_dict()} for g, phi in self.terms]


ZERO = NonlinearitySpec(())


def spec_from_list(items) -> NonlinearitySpec:
    terms = []
    for i, item in enumerate(items or []):
        try:
            g = coefficient_from_dict(item["g"])
            ph = dict(item["phi"])
            phi = ChaosFunctional(ph.pop("kind"), int(ph.get("p", 0)), int(ph.get("q", 0)))
        except KeyError as exc:
            raise SpecError(f"f[{i}]: missing key {exc}") from None
        except SpecError as exc:
            raise SpecError(f"f[{i}]: {exc}") from None
        terms.append((g, phi))
    return NonlinearitySpec(tuple(terms))


def functional_values(spec: NonlinearitySpec, measure: SpectralMeasure, amps: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """All ``Phi_m`` on the field shifted by ``shift``; shape ``batch + (M,)``."""
    vel = evaluate_amps(measure, amps, shift)
    if not spec.terms:
        return np.zeros(vel.shape[:-1] + (0,))
    return np.stack([phi.values(measure, vel) for phi in spec.functionals], axis=-1)


def combine(spec: NonlinearitySpec, t, x, u, phis: np.ndarray) -> np.ndarray:
    """``sum_m g_m(t, x, u) Phi_m`` with ``phis`` broadcast against ``u``.

    ``x`` has shape ``batch + (d,)``, ``u`` shape ``batch + extra`` and ``phis``
    shape ``batch + (M,)``; extra trailing axes of ``u`` (flow-map columns)
    are handled by inserting singleton axes into ``x`` and ``phis``.
    """
    u = np.asarray(u, dtype=float)
    x = np.asarray(x, dtype=float)
    extra = u.ndim - (x.ndim - 1)
    xs = x.reshape(x.shape[:-1] + (1,) * extra + x.shape[-1:])
    out = np.zeros(np.broadcast_shapes(xs.shape[:-1], u.shape))
    for m, (g, _) in enumerate(spec.terms):
        ph = phis[..., m].reshape(phis.shape[:-1] + (1,) * extra)
        out = out + g(t, xs, u) * ph
    return out


def combine_du(spec: NonlinearitySpec, t, x, u, phis: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    x = np.asarray(x, dtype=float)
    extra = u.ndim - (x.ndim - 1)
    xs = x.reshape(x.shape[:-1] + (1,) * extra + x.shape[-1:])
    out = np.zeros(np.broadcast_shapes(xs.shape[:-1], u.shape))
    for m, (g, _) in enumerate(spec.terms):
        if not g.depends_on_u:
            continue
        ph = phis[..., m].reshape(phis.shape[:-1] + (1,) * extra)
        out = out + g.du(t, xs, u) * ph
    return out


def evaluate_f(spec: NonlinearitySpec, t, x, u, amps: np.ndarray, shift, measure: SpectralMeasure):
    """``f(t, x, u, V(., shift + .))`` for one or many field states.

    The state's fast time must already match ``t / eps^2``; that alignment is
    the caller's job.
    """
    phis = functional_values(spec, measure, amps, np.asarray(shift, dtype=float))
    return combine(spec, t, x, u, phis)


def mean_f(spec: NonlinearitySpec, t, x, u):
    """Exact ``f_bar``: the sum of the coefficients carried by constant functionals."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    out = np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape))
    for g, phi in spec.terms:
        if phi.kind == "constant":
            out = out + g(t, x, u)
    return out


def mean_f_du(spec: NonlinearitySpec, t, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    out = np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape))
    for g, phi in spec.terms:
        if phi.kind == "constant":
            out = out + g.du(t, x, u)
    return out


def partials_f(spec: NonlinearitySpec, t, x, u, amps: np.ndarray, shift, measure: SpectralMeasure):
    """``(df/dx, df/du)``; only the ``g_m`` factors depend on ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    phis = functional_values(spec, measure, amps, np.asarray(shift, dtype=float))
    dx = 0.0
    du = 0.0
    for m, (g, _) in enumerate(spec.terms):
        dx = dx + g.dx(t, x, u) * phis[..., m, None]
        du = du + g.du(t, x, u) * phis[..., m]
    d = x.shape[-1]
    return np.broadcast_to(dx, np.broadcast_shapes(np.shape(dx), (d,))), np.asarray(du, dtype=float)


# ---------------------------------------------------------------------------
# Built-in demos

DEMO_MEAN = NonlinearitySpec((
    (SmoothCoefficient("cos", amp=0.5, w_u=1.0), Constant()),
    (SmoothCoefficient("cos", amp=0.3, w_x=(1.0, 0.0)), FieldComponent(1)),
))

DEMO_ZERO = NonlinearitySpec((
    (SmoothCoefficient("const", c=0.4), FieldComponent(1)),
))

DEMO_ZERO_U = NonlinearitySpec((
    (SmoothCoefficient("sin", offset=0.3, amp=0.2, w_u=1.0), FieldComponent(1)),
))

DEMOS = {"DEMO_MEAN": DEMO_MEAN, "DEMO_ZERO": DEMO_ZERO, "DEMO_ZERO_U": DEMO_ZERO_U}
