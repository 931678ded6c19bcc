"""Experiment pipelines and result files.

Every trajectory reads the stream keyed by ``(seed, experiment_id, eps_index,
trajectory_index)``. Trajectories are processed in fixed-size index batches
on a thread pool and written into index-addressed buffers, so results do not
depend on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import green_kubo as gk
from . import macroscale as macro
from . import microscale as micro
from . import nonlinearity as nl
from . import stats
from .config import ExperimentConfig
from .rng import STREAM_FIELD_CHECK, STREAM_LIMIT_OFFSET, streams
from .spectral_field import covariance_exact, gradient_amps, project_noise

logger = logging.getLogger(__name__)

BATCH = 250
LIMIT_BATCH = 500


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)   # (epsilon | "limit" | "-", statistic, value, ci_lo, ci_hi, n)
    samples: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    coefficients: gk.HomogenizedCoefficients | None = None
    wall_times: dict = field(default_factory=dict)

    def add(self, eps, name, value, ci=(float("nan"), float("nan")), n=0):
        self.rows.append((eps, name, float(value), float(ci[0]), float(ci[1]), int(n)))

    def get(self, eps, name):
        for row in self.rows:
            if row[0] == eps and row[1] == name:
                return row
        raise KeyError((eps, name))

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "metric", "value", "ci_lo", "ci_hi", "n"])
        for eps, name, val, lo, hi, n in self.rows:
            w.writerow([_fmt_eps(eps), name, repr(val), repr(lo), repr(hi), n])
        return buf.getvalue()


def _fmt_eps(eps):
    return eps if isinstance(eps, str) else repr(float(eps))


def _batched(n: int, threads: int, fn, size: int = BATCH):
    bounds = [(lo, min(lo + size, n)) for lo in range(0, n, size)]
    if threads <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda b: fn(*b), bounds))


class Runner:
    def __init__(self, cfg: ExperimentConfig, threads: int = 1):
        self.cfg = cfg
        self.threads = max(1, int(threads))
        self.result = ResultTable()

    # -- streams -----------------------------------------------------------

    def micro_streams(self, eps_index, lo, hi):
        return streams(self.cfg.seed, self.cfg.stream_key, eps_index, range(lo, hi))

    def limit_streams(self, which, lo, hi):
        return streams(self.cfg.seed, STREAM_LIMIT_OFFSET + self.cfg.stream_key, which, range(lo, hi))

    def boot_rng(self, tag: int):
        return np.random.default_rng(np.random.SeedSequence(self.cfg.seed, spawn_key=(9999, tag)))

    def micro_cfg(self, eps) -> micro.MicroConfig:
        n = self.cfg.numerics
        return micro.MicroConfig(eps, self.cfg.t, self.cfg.T, dtau=n["dtau"], field_substeps=n["field_substeps"])

    @property
    def n_limit(self) -> int:
        return self.cfg.numerics["n_limit"] or self.cfg.n_paths

    # -- coefficients --------------------------------------------------------

    def coefficients(self, spec=None) -> gk.HomogenizedCoefficients:
        if self.result.coefficients is not None:
            return self.result.coefficients
        cfg = self.cfg
        path = cfg.coefficients_file
        if path and Path(path).exists():
            coeffs = gk.HomogenizedCoefficients.load(path)
            coeffs.meta.setdefault("source", str(path))
        else:
            t0 = time.perf_counter()
            n = cfg.numerics
            table = gk.estimate_correlators(cfg.measure, spec, n["gk_paths"], n["T_GK"], dtau=n["dtau"],
                                            seed=cfg.seed, window=n["gk_window"], threads=self.threads)
            coeffs = gk.assemble_coefficients(spec, table, boot_seed=cfg.seed)
            self.result.extras["correlators"] = table
            self.result.wall_times["green_kubo"] = time.perf_counter() - t0
        self.result.coefficients = coeffs
        return coeffs

    # -- pipelines -----------------------------------------------------------

    def run(self) -> ResultTable:
        dispatch = {
            "field-check": self.field_check,
            "diffusivity": self.diffusivity,
            "coefficients": self.coefficients_only,
            "linear": self.linear,
            "two-point": self.two_point,
            "weak-average": self.weak_average,
            "semilinear-mean": self.semilinear_mean,
            "semilinear-zero": self.semilinear_zero,
        }
        dispatch[self.cfg.experiment]()
        return self.result

    def coefficients_only(self):
        c = self.coefficients(self.cfg.spec)
        d = c.dim
        for i in range(d):
            for j in range(i, d):
                se = c.std_errors["A"][i, j]
                self.result.add("limit", f"A{i + 1}{j + 1}", c.A[i, j], (c.A[i, j] - 2 * se, c.A[i, j] + 2 * se))

    def _micro_endpoints(self, eps_index, eps, starts=None):
        """Endpoints X_eps(T) for n_paths trajectories; ``starts`` (P, d) share each field."""
        cfg = self.cfg
        mc = self.micro_cfg(eps)
        x0 = cfg.x if starts is None else starts

        def job(lo, hi):
            xs = np.broadcast_to(x0, (hi - lo,) + np.shape(x0)).copy()
            res = micro.integrate_batch(cfg.measure, mc, xs, self.micro_streams(eps_index, lo, hi))
            return res.positions[-1]

        return np.concatenate(_batched(cfg.n_paths, self.threads, job), axis=0)

    def _limit_paths(self, which, n, n_steps, fn, x=None):
        """Apply ``fn(path, lo, hi)`` to limit-path batches and concatenate."""
        cfg = self.cfg
        coeffs = self.coefficients(self._gk_spec())
        x = cfg.x if x is None else x

        def job(lo, hi):
            path = macro.sample_effective_bm(coeffs, cfg.t, cfg.T, n_steps, self.limit_streams(which, lo, hi), x=x)
            return fn(path, lo, hi)

        return np.concatenate(_batched(n, self.threads, job, LIMIT_BATCH), axis=0)

    def _gk_spec(self):
        return self.cfg.spec if self.cfg.experiment == "semilinear-zero" else None

    def _ladder(self, samples: dict, limit: np.ndarray, limit2: np.ndarray):
        cfg = self.cfg
        res = self.result
        rng = self.boot_rng(1)
        nb = cfg.numerics["n_boot"]
        ks = stats.ks_ladder(samples, limit, n_boot=nb, rng=rng)
        for row in ks.rows():
            res.add(row.epsilon, "ks", row.value, (row.ci_lo, row.ci_hi), row.n)
            s = samples[row.epsilon]
            w = stats.wasserstein1(s, limit)
            res.add(row.epsilon, "w1", w, stats.bootstrap_ci(stats.wasserstein1, [s, limit], n_boot=nb, rng=rng), s.size)
        self_ks, _ = stats.ks_two_sample(limit, limit2)
        res.add("limit", "ks_self", self_ks, stats.bootstrap_ci(stats.ks_statistic, [limit, limit2], n_boot=nb, rng=rng),
                limit.size)
        res.add("limit", "ks_monotone_trend", float(ks.monotone_trend))
        res.extras["ks_ladder"] = ks
        res.samples.update({e: v for e, v in samples.items()})
        res.samples["limit"] = limit

    def linear(self):
        cfg = self.cfg
        samples = {}
        for i, eps in enumerate(cfg.epsilons):
            t0 = time.perf_counter()
            samples[eps] = cfg.u0(self._micro_endpoints(i, eps))
            self.result.wall_times[f"eps={eps}"] = time.perf_counter() - t0
        n_steps = cfg.numerics["n_steps"]
        limit = self._limit_paths(0, self.n_limit, n_steps, lambda p, lo, hi: macro.solve_linear_limit(cfg.u0, p))
        limit2 = self._limit_paths(1, self.n_limit, n_steps, lambda p, lo, hi: macro.solve_linear_limit(cfg.u0, p))
        self._ladder(samples, limit, limit2)

    def two_point(self):
        cfg = self.cfg
        starts = np.stack([cfg.x, cfg.x2])
        rng = self.boot_rng(2)
        for i, eps in enumerate(cfg.epsilons):
            ends = self._micro_endpoints(i, eps, starts)
            u = cfg.u0(ends)
            r, ci = stats.correlation_ci(u[:, 0], u[:, 1], rng=rng)
            self.result.add(eps, "corr", r, ci, cfg.n_paths)
            self.result.samples[eps] = u
        n_steps = cfg.numerics["n_steps"]
        u1 = self._limit_paths(0, self.n_limit, n_steps, lambda p, lo, hi: cfg.u0(p.endpoint), x=cfg.x)
        u2 = self._limit_paths(1, self.n_limit, n_steps, lambda p, lo, hi: cfg.u0(p.endpoint), x=cfg.x2)
        r, ci = stats.correlation_ci(u1, u2, rng=rng)
        self.result.add("limit", "corr", r, ci, u1.size)
        self.result.samples["limit"] = np.stack([u1, u2], axis=-1)

    def weak_average(self):
        cfg = self.cfg
        pts, vol = cfg.start_grid()
        w = cfg.phi(pts)
        mc_n = cfg.realizations
        for i, eps in enumerate(cfg.epsilons):
            mc = self.micro_cfg(eps)

            def job(lo, hi):
                xs = np.broadcast_to(pts, (hi - lo,) + pts.shape).copy()
                res = micro.integrate_batch(cfg.measure, mc, xs, self.micro_streams(i, lo, hi))
                return cfg.u0(res.positions[-1])

            u = np.concatenate(_batched(mc_n, self.threads, job, max(1, BATCH // pts.shape[0] * 4)), axis=0)
            wa = stats.weak_average(u, w, vol)
            s2, ci = stats.variance_ci(wa.per_realization)
            self.result.add(eps, "weak_var", s2, ci, mc_n)
            self.result.add(eps, "weak_mean", wa.mean, (wa.mean - 1.96 * wa.se_mean, wa.mean + 1.96 * wa.se_mean), mc_n)
            self.result.samples[eps] = wa.per_realization
        coeffs = self.coefficients(None)
        mean, ci = weak_limit_oracle(cfg, coeffs, pts, w, vol)
        self.result.add("limit", "weak_mean", mean, ci, 0)

    def semilinear_mean(self):
        cfg = self.cfg
        spec = cfg.spec
        g = cfg.u_grid()
        samples = {}
        for i, eps in enumerate(cfg.epsilons):
            samples[eps] = self._micro_flow_inverted(i, eps, spec, alpha_exponent=0, grid=g)
        n_steps = cfg.numerics["n_steps_integral"]
        sol = lambda p, lo, hi: macro.solve_integral_equation(spec, p, cfg.u0)
        limit = self._limit_paths(0, self.n_limit, n_steps, sol)
        limit2 = self._limit_paths(1, self.n_limit, n_steps, sol)
        self._ladder(samples, limit, limit2)

    def _micro_flow_inverted(self, eps_index, eps, spec, alpha_exponent, grid, record=None):
        cfg = self.cfg
        mc = self.micro_cfg(eps)

        def job(lo, hi):
            xs = np.tile(cfg.x, (hi - lo, 1))
            res = micro.integrate_batch(cfg.measure, mc, xs, self.micro_streams(eps_index, lo, hi), spec=spec,
                                        alpha_exponent=alpha_exponent, u_init=grid, track_xi=record is not None,
                                        check_monotone=True, trajectory_ids=np.arange(lo, hi))
            vals = res.u_values[-1]
            out = micro.invert_flows(vals, grid, cfg.u0(res.positions[-1]))
            if record is None:
                return out[:, None]
            return np.column_stack([out, vals - grid, res.xi_values[-1].min(axis=1)])

        return np.concatenate(_batched(cfg.n_paths, self.threads, job), axis=0)[:, 0] if record is None else \
            np.concatenate(_batched(cfg.n_paths, self.threads, job), axis=0)

    def semilinear_zero(self):
        cfg = self.cfg
        spec = cfg.spec
        g = cfg.u_grid()
        samples = {}
        res = self.result
        mid = int(np.argmin(np.abs(g)))
        for i, eps in enumerate(cfg.epsilons):
            t0 = time.perf_counter()
            out = self._micro_flow_inverted(i, eps, spec, alpha_exponent=1, grid=g, record=True)
            samples[eps] = out[:, 0]
            incr = out[:, 1 + mid]
            v, ci = stats.variance_ci(incr)
            res.add(eps, "flow_increment_var", v, ci, incr.size)
            res.add(eps, "micro_min_xi", float(out[:, -1].min()), n=cfg.n_paths)
            res.add(eps, "micro_monotone_fraction", 1.0, n=cfg.n_paths)
            res.wall_times[f"eps={eps}"] = time.perf_counter() - t0
        coeffs = self.coefficients(spec)
        limit_c = gk.coefficients_for_spec(coeffs, spec)
        n_steps = cfg.numerics["n_steps"]
        stash = []

        def sol(p, lo, hi):
            flow = macro.simulate_limit_flow(limit_c, g, p, trajectory_ids=np.arange(lo, hi))
            u = macro.invert_limit_flow(flow, cfg.u0, p)
            stash.append((lo, flow.terminal[:, mid] - g[mid], flow.xi[:, -1].min(axis=1), xi_fd_error(flow)))
            return u

        limit = self._limit_paths(0, self.n_limit, n_steps, sol)
        limit2 = self._limit_paths(1, self.n_limit, n_steps,
                                   lambda p, lo, hi: macro.invert_limit_flow(
                                       macro.simulate_limit_flow(limit_c, g, p, trajectory_ids=np.arange(lo, hi)),
                                       cfg.u0, p))
        stash.sort(key=lambda item: item[0])
        incr = np.concatenate([s[1] for s in stash])
        v, ci = stats.variance_ci(incr)
        res.add("limit", "flow_increment_var", v, ci, incr.size)
        res.add("limit", "macro_min_xi", float(min(s[2].min() for s in stash)), n=self.n_limit)
        fd = np.concatenate([s[3] for s in stash])
        res.add("limit", "macro_xi_fd_median_relerr", float(np.median(fd)), n=fd.size)
        res.add("limit", "macro_monotone_fraction", 1.0, n=self.n_limit)
        self._ladder(samples, limit, limit2)

    def diffusivity(self):
        cfg = self.cfg
        coeffs = self.coefficients(None)
        d = cfg.dim
        for i in range(d):
            for j in range(i, d):
                se = coeffs.std_errors["A"][i, j]
                self.result.add("limit", f"A{i + 1}{j + 1}", coeffs.A[i, j], (coeffs.A[i, j] - 2 * se, coeffs.A[i, j] + 2 * se),
                                cfg.numerics["gk_paths"])
        for k, eps in enumerate(cfg.epsilons):
            A, se, _ = gk.msd_diffusivity(cfg.measure, eps, cfg.n_paths, T=cfg.T - cfg.t,
                                          seed=cfg.seed + k, dtau=cfg.numerics["dtau"], threads=self.threads)
            for i in range(d):
                for j in range(i, d):
                    self.result.add(eps, f"A{i + 1}{j + 1}", A[i, j], (A[i, j] - 2 * se[i, j], A[i, j] + 2 * se[i, j]),
                                    cfg.n_paths)

    def field_check(self):
        cfg = self.cfg
        fc = field_check(cfg.measure, cfg.n_paths, cfg.seed)
        self.result.add("-", "max_abs_divergence", fc["max_div"], n=fc["n_div"])
        self.result.add("-", "cov_max_abs_z", fc["max_z"], n=cfg.n_paths)
        self.result.add("-", "cov_frac_within_4se", fc["frac_within"], n=fc["n_entries"])
        self.result.extras["field_check"] = fc


def xi_fd_error(flow: macro.LimitFlow) -> np.ndarray:
    """Per-path median relative error of xi against centered differences of the terminal columns."""
    g = flow.u_grid
    vals = flow.terminal
    fd = (vals[:, 2:] - vals[:, :-2]) / (g[2:] - g[:-2])
    xi = flow.xi[:, -1, 1:-1]
    return np.median(np.abs(xi - fd) / np.abs(fd), axis=1)


def weak_limit_oracle(cfg: ExperimentConfig, coeffs: gk.HomogenizedCoefficients, pts, weights, vol, order: int = 40):
    """``sum_i phi(x_i) dx E[u0(x_i + beta_{T-t})]`` by Gauss-Hermite, with a CI from the A standard errors."""
    span = cfg.T - cfg.t

    def value(A):
        cov = A * span
        return sum(w * vol * stats.gaussian_expectation(cfg.u0, p, cov, order) for p, w in zip(pts, weights) if w != 0)

    base = value(coeffs.A)
    # delta method on the independent A entries
    var = 0.0
    d = coeffs.dim
    se = coeffs.std_errors.get("A", np.zeros((d, d)))
    for i in range(d):
        for j in range(i, d):
            if se[i, j] == 0:
                continue
            h = max(1e-4, 1e-3 * abs(coeffs.A[i, j]))
            Ah = coeffs.A.copy()
            Ah[i, j] += h
            if i != j:
                Ah[j, i] += h
            grad = (value(Ah) - base) / h
            var += (grad * se[i, j]) ** 2
    half = 1.96 * np.sqrt(var)
    return base, (base - half, base + half)


def field_check(measure, n_states: int, seed: int, n_div: int = 1000, t_values=None, x_values=None):
    """Divergence at random (state, point) pairs and the covariance grid test."""
    rng = streams(seed, STREAM_FIELD_CHECK, 0, [0])[0]
    noise_shape = (measure.num_modes, 2, measure.dim)
    d = measure.dim
    amps = project_noise(measure, rng.standard_normal((n_div,) + noise_shape))
    pts = rng.uniform(-10, 10, (n_div, d))
    div = np.trace(gradient_amps(measure, amps, pts), axis1=-2, axis2=-1)
    max_div = float(np.max(np.abs(div)))

    t_values = np.array([0.0, 0.25, 0.5, 1.0, 2.0]) if t_values is None else np.asarray(t_values)
    x_values = np.linspace(0, 2.0, 5) if x_values is None else np.asarray(x_values)
    from .spectral_field import evaluate_amps, ou_step

    a0 = project_noise(measure, rng.standard_normal((n_states,) + noise_shape))
    ys = np.zeros(d)
    v0 = evaluate_amps(measure, a0, np.broadcast_to(ys, (n_states, d)))
    zs = []
    t_prev = 0.0
    amps_t = a0
    for t in t_values:
        amps_t = ou_step(measure, amps_t, t - t_prev, rng.standard_normal((n_states,) + noise_shape))
        t_prev = t
        for r in x_values:
            xvec = np.zeros(d)
            xvec[0] = r * np.cos(0.3)
            xvec[1] = r * np.sin(0.3)
            vt = evaluate_amps(measure, amps_t, np.broadcast_to(xvec, (n_states, d)))
            prod = vt[:, :, None] * v0[:, None, :]
            emp = prod.mean(axis=0)
            se = prod.std(axis=0, ddof=1) / np.sqrt(n_states)
            exact = covariance_exact(measure, t, xvec)
            z = np.abs(emp - exact) / np.where(se > 0, se, np.inf)
            z = np.where((se == 0) & (np.abs(emp - exact) < 1e-12), 0.0, z)
            zs.append(z.ravel())
    z = np.concatenate(zs)
    return {"max_div": max_div, "n_div": n_div, "max_z": float(z.max()), "frac_within": float(np.mean(z <= 4)),
            "n_entries": int(z.size), "z": z}


# -- files -------------------------------------------------------------------


def write_outputs(cfg: ExperimentConfig, result: ResultTable, out_dir, extra_manifest=None):
    """Write metrics, samples, coefficients and manifest atomically into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out_dir))
    try:
        (tmp / "metrics.csv").write_text(result.metrics_csv())
        for key, vals in result.samples.items():
            name = "samples_limit.csv" if key == "limit" else f"samples_{key!r}.csv"
            arr = np.asarray(vals)
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            if arr.ndim == 1:
                w.writerow(["path_id", "U_t"])
                w.writerows([i, repr(float(v))] for i, v in enumerate(arr))
            else:
                w.writerow(["path_id"] + [f"U_t_{j + 1}" for j in range(arr.shape[1])])
                w.writerows([i] + [repr(float(v)) for v in row] for i, row in enumerate(arr))
            (tmp / name).write_text(buf.getvalue())
        coeff_ref = None
        if result.coefficients is not None:
            result.coefficients.dump(tmp / "coefficients.json")
            coeff_ref = result.coefficients.meta.get("source", "coefficients.json")
        table = result.extras.get("correlators")
        if table is not None:
            header, rows = table.to_csv_rows()
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
            (tmp / "correlators.csv").write_text(buf.getvalue())
        manifest = {
            "config": cfg.raw,
            "config_hash": cfg.content_hash(),
            "seed": cfg.seed,
            "stream_key": cfg.stream_key,
            "stream_derivation": "SeedSequence(seed, spawn_key=(experiment_id, epsilon_index, trajectory_index)) -> Philox",
            "coefficients": coeff_ref,
            "wall_times": result.wall_times,
        }
        if extra_manifest:
            manifest.update(extra_manifest)
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        for f in tmp.iterdir():
            os.replace(f, out_dir / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return out_dir


def run(cfg: ExperimentConfig, threads: int = 1, out_dir=None, write: bool = True) -> ResultTable:
    t0 = time.perf_counter()
    result = Runner(cfg, threads).run()
    result.wall_times["total"] = time.perf_counter() - t0
    if write:
        write_outputs(cfg, result, out_dir or cfg.output_dir, {"threads": threads})
    return result
