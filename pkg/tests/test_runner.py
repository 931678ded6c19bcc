"""Pipelines end to end on small problems: determinism, layout and consistency."""

import json

import numpy as np
import pytest

from homogenize_lab import runner
from homogenize_lab.config import validate

MEASURE = {"preset": "isotropic-shell", "num_modes": 4, "K0": 1.0, "energy": 1.0, "alpha": 1.0}


def raw(**kw):
    r = {"experiment": "linear", "measure": MEASURE, "u0": {"center": [0.0, 0.0], "radius": 4.0},
         "T": 0.5, "x": [0.3, 0.0], "epsilons": [0.4, 0.2], "n_paths": 120,
         "numerics": {"n_steps": 8, "gk_paths": 50, "n_boot": 20}}
    r.update(kw)
    return r


def run(threads=1, **kw):
    return runner.run(validate(raw(**kw)), threads=threads, write=False)


class TestDeterminism:
    @pytest.mark.parametrize("experiment,extra", [
        ("linear", {}),
        ("two-point", {"x2": [-0.3, 0.0]}),
        ("semilinear-zero", {"f": "DEMO_ZERO_U"}),
    ])
    def test_repeat_and_threads(self, experiment, extra):
        a = run(experiment=experiment, n_paths=600, **extra).metrics_csv()
        b = run(experiment=experiment, n_paths=600, **extra).metrics_csv()
        c = run(threads=3, experiment=experiment, n_paths=600, **extra).metrics_csv()
        assert a == b == c

    def test_seed_changes_results(self):
        assert run().samples[0.4][0] != run(seed=1).samples[0.4][0]

    @pytest.mark.parametrize("experiment,extra", [
        ("linear", {}),
        ("semilinear-mean", {"f": "DEMO_MEAN"}),
        ("semilinear-zero", {"f": "DEMO_ZERO_U"}),
    ])
    def test_prefix_invariance(self, experiment, extra):
        small = run(experiment=experiment, n_paths=300, **extra)
        big = run(experiment=experiment, n_paths=700, **extra)
        for key in small.samples:
            np.testing.assert_array_equal(np.asarray(big.samples[key])[:300], small.samples[key])

    def test_stream_key_separates_experiments(self):
        a = run().samples[0.4]
        b = run(stream_key=5).samples[0.4]
        assert not np.array_equal(a, b)


class TestPipelines:
    def test_zero_nonlinearity_matches_linear(self):
        lin = run()
        zero = run(experiment="semilinear-zero", f=[])
        for key in lin.samples:
            np.testing.assert_array_equal(zero.samples[key], lin.samples[key])

    def test_ladder_rows(self):
        res = run()
        names = [(r[0], r[1]) for r in res.rows]
        for eps in (0.4, 0.2):
            assert (eps, "ks") in names and (eps, "w1") in names
        assert ("limit", "ks_self") in names and ("limit", "ks_monotone_trend") in names
        for eps, name, val, lo, hi, n in res.rows:
            if name in ("ks", "w1"):
                assert lo <= hi and n == 120 and val >= 0

    def test_two_point_rows(self):
        res = run(experiment="two-point", x2=[-0.3, 0.0])
        assert res.get("limit", "corr")[5] == 120
        assert np.asarray(res.samples[0.4]).shape == (120, 2)

    def test_semilinear_zero_diagnostics(self):
        res = run(experiment="semilinear-zero", f="DEMO_ZERO_U")
        assert res.get(0.4, "micro_monotone_fraction")[2] == 1.0
        assert res.get("limit", "macro_min_xi")[2] > 0
        assert res.get("limit", "macro_xi_fd_median_relerr")[2] < 0.05

    def test_weak_average(self):
        res = run(experiment="weak-average", u0={"center": [0.0, 0.0], "radius": 1.5}, realizations=20,
                  epsilons=[0.4], grid={"n_side": 5, "half_width": 0.5})
        names = {r[1] for r in res.rows}
        assert {"weak_var", "weak_mean"} <= names
        assert res.get("limit", "weak_mean")[2] > 0

    def test_diffusivity_rows(self):
        res = run(experiment="diffusivity", u0=None, epsilons=[0.4], n_paths=100)
        A11 = res.get("limit", "A11")
        assert A11[3] <= A11[2] <= A11[4]
        assert res.get(0.4, "A11")[2] > 0

    def test_field_check(self):
        res = run(experiment="field-check", u0=None, epsilons=[], n_paths=2000)
        assert res.get("-", "max_abs_divergence")[2] < 1e-10
        assert res.get("-", "cov_frac_within_4se")[2] >= 0.95


class TestOutputs:
    def test_files_and_manifest(self, tmp_path):
        cfg = validate(raw(experiment="semilinear-zero", f="DEMO_ZERO_U"))
        runner.run(cfg, out_dir=tmp_path)
        names = {p.name for p in tmp_path.iterdir()}
        assert {"metrics.csv", "samples_0.4.csv", "samples_0.2.csv", "samples_limit.csv", "coefficients.json",
                "correlators.csv", "manifest.json"} <= names
        assert not any(n.startswith(".partial-") for n in names)
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["config_hash"] == cfg.content_hash() and "total" in man["wall_times"]
        head = (tmp_path / "samples_0.4.csv").read_text().splitlines()
        assert head[0] == "path_id,U_t" and len(head) == 121

    def test_failed_write_leaves_no_partial(self, tmp_path, monkeypatch):
        cfg = validate(raw())
        res = runner.run(cfg, write=False)

        def broken(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(type(res.coefficients), "dump", broken)
        with pytest.raises(OSError):
            runner.write_outputs(cfg, res, tmp_path)
        assert list(tmp_path.iterdir()) == []

    def test_reuses_coefficients_file(self, tmp_path):
        first = runner.run(validate(raw()), out_dir=tmp_path / "a")
        again = runner.run(validate(raw(coefficients_file=str(tmp_path / "a" / "coefficients.json"))), write=False)
        np.testing.assert_array_equal(again.coefficients.A, first.coefficients.A)
        assert "correlators" not in again.extras
