"""Experiment configuration: parsing and validation with field-path errors."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nonlinearity as nl
from .errors import ConfigError
from .spectral_field import FieldError, SpectralMeasure, measure_from_dict
from .terminal import Bump, bump_from_dict

EXPERIMENTS = (
    "field-check", "diffusivity", "linear", "two-point", "weak-average",
    "semilinear-mean", "semilinear-zero", "coefficients",
)
NO_F = ("linear", "two-point", "weak-average")
NEEDS_U0 = ("linear", "two-point", "weak-average", "semilinear-mean", "semilinear-zero")
NEEDS_EPS = NEEDS_U0 + ("diffusivity",)

NUMERIC_DEFAULTS = {
    "dtau": None,            # fast-time step; None -> stability bound of the measure
    "n_steps": 2048,         # limit-path grid for SDE / linear / weak-average
    "n_steps_integral": 512, # limit-path grid for the integral equation
    "T_GK": 10.0,
    "gk_paths": 2000,
    "gk_window": None,
    "u_grid": None,          # list, {lo, hi, n}, or None -> default from sup|u0|
    "n_boot": 200,
    "field_substeps": 1,
    "n_limit": None,         # limit sample size; None -> n_paths
}


@dataclass
class ExperimentConfig:
    experiment: str
    measure: SpectralMeasure
    measure_raw: dict
    spec: nl.NonlinearitySpec | None
    u0: Bump | None
    t: float
    T: float
    x: np.ndarray
    x2: np.ndarray | None
    epsilons: list
    n_paths: int
    seed: int
    output_dir: str
    numerics: dict
    stream_key: int = 0
    phi: Bump | None = None
    grid: dict = field(default_factory=dict)
    realizations: int = 200
    coefficients_file: str | None = None
    raw: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.measure.dim

    def u_grid(self) -> np.ndarray:
        ug = self.numerics.get("u_grid")
        if ug is None:
            r = 2 * (self.u0.sup if self.u0 is not None else 1.0) + 1
            return np.linspace(-r, r, 41)
        if isinstance(ug, dict):
            return np.linspace(float(ug["lo"]), float(ug["hi"]), int(ug.get("n", 41)))
        return np.asarray(ug, dtype=float)

    def start_grid(self) -> tuple[np.ndarray, float]:
        """Square grid of starts for the weak average and the cell volume."""
        n = int(self.grid.get("n_side", 5))
        half = float(self.grid.get("half_width", 0.5))
        center = np.asarray(self.grid.get("center", self.phi.center if self.phi else np.zeros(self.dim)), dtype=float)
        axis = np.linspace(-half, half, n)
        h = axis[1] - axis[0] if n > 1 else 2 * half
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        pts = center + np.stack([m.ravel() for m in mesh], axis=-1)
        return pts, h ** self.dim

    def content_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_raw(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
    import yaml

    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from None


def _num(raw, key, path=None, default=None, required=False):
    if key not in raw or raw[key] is None:
        if required:
            raise ConfigError(path or key, "is required")
        return default
    try:
        return float(raw[key])
    except (TypeError, ValueError):
        raise ConfigError(path or key, f"must be a number, got {raw[key]!r}") from None


def _point(raw, key, dim, required=True):
    if key not in raw or raw[key] is None:
        if required:
            raise ConfigError(key, "is required")
        return None
    try:
        p = np.asarray(raw[key], dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(key, "must be a list of numbers") from None
    if p.shape != (dim,):
        raise ConfigError(key, f"must have length {dim}")
    return p


def parse_spec(raw_f, dim) -> nl.NonlinearitySpec:
    if isinstance(raw_f, str):
        if raw_f not in nl.DEMOS:
            raise ConfigError("f", f"unknown demo {raw_f!r}; choose from {sorted(nl.DEMOS)}")
        spec = nl.DEMOS[raw_f]
    else:
        try:
            spec = nl.spec_from_list(raw_f)
        except nl.SpecError as exc:
            raise ConfigError("f", str(exc)) from None
    try:
        spec.check_dim(dim)
    except nl.SpecError as exc:
        raise ConfigError("f", str(exc)) from None
    return spec


def validate(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a mapping")
    raw = copy.deepcopy(raw)
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"must be one of {list(EXPERIMENTS)}, got {exp!r}")

    if "measure" not in raw:
        raise ConfigError("measure", "is required")
    try:
        measure = measure_from_dict(raw["measure"])
    except (FieldError, TypeError, KeyError) as exc:
        raise ConfigError("measure", str(exc)) from None
    dim = measure.dim

    spec = None
    if raw.get("f") is not None:
        if exp in NO_F:
            raise ConfigError("f", f"the {exp!r} pipeline takes no nonlinearity")
        spec = parse_spec(raw["f"], dim)
    if exp == "semilinear-mean":
        if spec is None:
            raise ConfigError("f", "is required for semilinear-mean")
        if spec.centered():
            raise ConfigError("f", "semilinear-mean needs a nonzero mean part (a constant functional)")
    if exp == "semilinear-zero":
        if spec is None:
            raise ConfigError("f", "is required for semilinear-zero")
        if not spec.centered():
            raise ConfigError("f", "semilinear-zero needs a centered nonlinearity (no constant functional)")

    u0 = None
    if exp in NEEDS_U0 or raw.get("u0") is not None:
        if raw.get("u0") is None:
            raise ConfigError("u0", "is required")
        try:
            u0 = bump_from_dict(raw["u0"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("u0", f"bad bump: {exc}") from None
        if len(u0.center) != dim:
            raise ConfigError("u0.center", f"must have length {dim}")

    t = _num(raw, "t", default=0.0)
    T = _num(raw, "T", default=1.0)
    if not T > t:
        raise ConfigError("T", "must exceed t")
    x = _point(raw, "x", dim, required=False)
    x = np.zeros(dim) if x is None else x
    x2 = _point(raw, "x2", dim, required=exp == "two-point")
    if exp == "two-point" and np.allclose(x, x2):
        raise ConfigError("x2", "must differ from x (distinct points)")

    eps = raw.get("epsilons", [])
    if exp in NEEDS_EPS and not eps:
        raise ConfigError("epsilons", "at least one value is required")
    if not isinstance(eps, list):
        raise ConfigError("epsilons", "must be a list")
    for i, e in enumerate(eps):
        if not isinstance(e, (int, float)) or not 0 < e <= 1:
            raise ConfigError(f"epsilons[{i}]", f"must lie in (0, 1], got {e!r}")
        if i and e >= eps[i - 1]:
            raise ConfigError(f"epsilons[{i}]", "epsilons must be strictly decreasing")

    n_paths = raw.get("n_paths", 1000)
    if not isinstance(n_paths, int) or n_paths < 100:
        raise ConfigError("n_paths", f"must be an integer >= 100, got {n_paths!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    stream_key = raw.get("stream_key", 0)
    if not isinstance(stream_key, int) or not 0 <= stream_key < 1000:
        raise ConfigError("stream_key", "must be an integer in [0, 1000)")

    numerics = dict(NUMERIC_DEFAULTS)
    user_num = raw.get("numerics", {}) or {}
    for key, val in user_num.items():
        if key not in NUMERIC_DEFAULTS:
            raise ConfigError(f"numerics.{key}", "unknown numeric override")
        numerics[key] = val
    for key in ("n_steps", "n_steps_integral", "gk_paths", "n_boot", "field_substeps"):
        if not isinstance(numerics[key], int) or numerics[key] < 1:
            raise ConfigError(f"numerics.{key}", "must be a positive integer")
    if numerics["dtau"] is not None and not (isinstance(numerics["dtau"], (int, float)) and numerics["dtau"] > 0):
        raise ConfigError("numerics.dtau", "must be positive")
    if numerics["T_GK"] < 5 / measure.alpha_star:
        raise ConfigError("numerics.T_GK", f"must be >= 5/alpha_star = {5 / measure.alpha_star:g}")
    if numerics["n_limit"] is not None and (not isinstance(numerics["n_limit"], int) or numerics["n_limit"] < 100):
        raise ConfigError("numerics.n_limit", "must be an integer >= 100")

    phi = None
    if exp == "weak-average":
        raw_phi = raw.get("phi") or {"center": (u0.center if u0 else [0.0] * dim), "radius": 0.75}
        try:
            phi = bump_from_dict(dict(raw_phi, height=1.0)).normalized()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("phi", f"bad bump: {exc}") from None
    grid = raw.get("grid", {}) or {}
    realizations = raw.get("realizations", 200)
    if exp == "weak-average" and (not isinstance(realizations, int) or realizations < 2):
        raise ConfigError("realizations", "must be an integer >= 2")

    cfg = ExperimentConfig(
        experiment=exp, measure=measure, measure_raw=raw["measure"], spec=spec, u0=u0, t=t, T=T, x=x, x2=x2,
        epsilons=list(eps), n_paths=n_paths, seed=seed, output_dir=str(raw.get("output_dir", "out")),
        numerics=numerics, stream_key=stream_key, phi=phi, grid=grid, realizations=realizations,
        coefficients_file=raw.get("coefficients_file"), raw=raw,
    )
    if cfg.u0 is not None and exp in ("semilinear-mean", "semilinear-zero"):
        g = cfg.u_grid()
        if g.ndim != 1 or g.size < 3 or np.any(np.diff(g) <= 0):
            raise ConfigError("numerics.u_grid", "must be strictly increasing with at least 3 points")
    return cfg
