"""Terminal conditions and test functions: smooth compactly supported bumps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Bump:
    """``height * exp(1 - 1 / (1 - |x - center|^2 / radius^2))`` inside the ball, 0 outside.

    C-infinity with compact support; peak value ``height`` at ``center``.
    """

    center: tuple[float, ...]
    radius: float
    height: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("bump radius must be positive")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r2 = np.sum((x - np.asarray(self.center)) ** 2, axis=-1) / self.radius ** 2
        inside = r2 < 1.0
        safe = np.where(inside, r2, 0.0)
        return np.where(inside, self.height * np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)

    @property
    def sup(self) -> float:
        return abs(self.height)

    def integral(self, n: int = 4001) -> float:
        """Integral over R^d (radial quadrature; d inferred from ``center``)."""
        from scipy.integrate import quad
        from scipy.special import gamma

        d = len(self.center)
        surface = 2 * np.pi ** (d / 2) / gamma(d / 2)
        f = lambda r: np.exp(1.0 - 1.0 / (1.0 - r * r)) * r ** (d - 1) if r < 1 else 0.0
        val, _ = quad(f, 0.0, 1.0, limit=200)
        return float(self.height * surface * val * self.radius ** d)

    def normalized(self) -> "Bump":
        """Same shape scaled to unit integral."""
        return Bump(self.center, self.radius, self.height / self.integral())

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius, "height": self.height}


def bump_from_dict(spec: dict) -> Bump:
    return Bump(tuple(float(c) for c in spec["center"]), float(spec["radius"]), float(spec.get("height", 1.0)))
