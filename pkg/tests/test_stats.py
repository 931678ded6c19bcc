"""KS and W1 distances, bootstrap intervals, weak averages and the ladder rule."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homogenize_lab import stats

rng0 = np.random.default_rng(0)


class TestKS:
    def test_identical_samples(self):
        a = rng0.normal(size=500)
        assert stats.ks_two_sample(a, a.copy())[0] == 0.0

    def test_half_shift_of_uniforms(self):
        rng = np.random.default_rng(1)
        d, p = stats.ks_two_sample(rng.uniform(size=5000), rng.uniform(size=5000) + 0.5)
        assert abs(d - 0.5) <= 0.02 and p < 1e-10

    def test_null_calibration(self):
        rng = np.random.default_rng(2)
        rejects = sum(stats.ks_two_sample(rng.normal(size=500), rng.normal(size=500))[1] < 0.05 for _ in range(100))
        assert rejects <= 10

    def test_kolmogorov_quantile(self):
        assert stats.kolmogorov_sf(1.358) == pytest.approx(0.05, abs=1e-3)
        assert stats.kolmogorov_sf(0.0) == 1.0

    def test_small_sample_rejected(self):
        with pytest.raises(stats.StatsError):
            stats.ks_two_sample(np.zeros(10), np.zeros(100))

    def test_nonfinite_rejected(self):
        with pytest.raises(stats.StatsError):
            stats.SampleSet([0.0, np.nan])


class TestW1:
    def test_shift(self):
        a = rng0.normal(size=1000)
        assert stats.wasserstein1(a, a + 0.3) == pytest.approx(0.3)

    def test_scale(self):
        rng = np.random.default_rng(3)
        # W1(N(0,1), N(0,4)) = E|Z| = sqrt(2/pi)
        assert abs(stats.wasserstein1(rng.normal(size=20_000), 2 * rng.normal(size=20_000)) - 0.7979) <= 0.05

    def test_unequal_sizes(self):
        a = np.array([0.0, 1.0])
        b = np.array([0.0, 0.0, 1.0, 1.0])
        assert stats.wasserstein1(a, b) == pytest.approx(0.0)
        assert stats.wasserstein1(np.array([0.0]), np.array([1.0, 3.0])) == pytest.approx(2.0)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_triangle_and_permutation(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=60), rng.standard_t(3, size=80), rng.uniform(-2, 2, size=70)
        assert stats.triangle_ok(a, b, c)
        assert stats.wasserstein1(a, b) == pytest.approx(stats.wasserstein1(rng.permutation(a), b), abs=1e-12)
        assert stats.ks_statistic(a, b) == stats.ks_statistic(rng.permutation(a), b)


class TestIntervals:
    def test_bootstrap_coverage(self):
        rng = np.random.default_rng(4)
        hits = 0
        for _ in range(200):
            x = rng.exponential(size=100)
            lo, hi = stats.bootstrap_ci(np.mean, [x], n_boot=300, rng=rng)
            hits += lo <= 1.0 <= hi
        assert hits >= 180

    def test_correlation(self):
        x = rng0.normal(size=1000)
        assert stats.correlation_ci(x, x)[0] == pytest.approx(1.0)
        assert stats.correlation_ci(x, -x)[0] == pytest.approx(-1.0)
        r, (lo, hi) = stats.correlation_ci(x, rng0.normal(size=1000), n_boot=500)
        assert lo <= 0.0 <= hi and lo <= r <= hi

    def test_correlation_constant(self):
        r, _ = stats.correlation_ci(np.ones(200), rng0.normal(size=200), n_boot=50)
        assert r == 0.0

    def test_correlation_size_checks(self):
        with pytest.raises(stats.StatsError):
            stats.correlation_ci(np.zeros(200), np.zeros(199))
        with pytest.raises(stats.StatsError):
            stats.correlation_ci(np.zeros(50), np.zeros(50))

    def test_variance_ci(self):
        x = np.random.default_rng(5).normal(scale=2.0, size=4000)
        s2, (lo, hi) = stats.variance_ci(x)
        assert lo < 4.0 < hi and lo < s2 < hi

    def test_gaussian_expectation(self):
        val = stats.gaussian_expectation(lambda p: np.cos(p[:, 0]), [0.0, 0.0], np.eye(2))
        assert val == pytest.approx(np.exp(-0.5), abs=1e-12)
        # degenerate direction: only the second coordinate varies
        val = stats.gaussian_expectation(lambda p: p[:, 0] ** 2 + p[:, 1] ** 2, [1.0, 0.0], [[0, 0], [0, 3.0]])
        assert val == pytest.approx(4.0)
        assert stats.gaussian_expectation(lambda p: p[:, 0], [2.0], [[0.0]]) == pytest.approx(2.0)


class TestWeakAverage:
    def test_constant_field(self):
        u = np.full((10, 25), 2.0)
        w = np.full(25, 0.04)
        res = stats.weak_average(u, w, 1.0)
        assert res.mean == pytest.approx(2.0) and res.variance == pytest.approx(0.0, abs=1e-28)

    def test_few_starts_warns(self):
        with pytest.warns(UserWarning, match="quadrature"):
            stats.weak_average(np.ones((3, 4)), np.ones(4), 0.25)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            stats.weak_average(np.ones((3, 25)), np.ones(25), 0.04)

    def test_shape_check(self):
        with pytest.raises(stats.StatsError):
            stats.weak_average(np.ones((3, 4)), np.ones(5), 1.0)


class TestLadder:
    def ladder(self, values, ci):
        return stats.ConvergenceLadder([0.4, 0.2, 0.1], values, ci)

    def test_strict_decrease(self):
        lad = self.ladder([0.1, 0.05, 0.02], [(0.08, 0.12), (0.04, 0.06), (0.01, 0.03)])
        assert lad.violations() == [] and lad.monotone_trend

    def test_one_soft_violation_allowed(self):
        lad = self.ladder([0.1, 0.05, 0.06], [(0.08, 0.12), (0.04, 0.07), (0.05, 0.08)])
        assert lad.violations() == [(2, False)] and lad.monotone_trend

    def test_hard_violation_fails(self):
        lad = self.ladder([0.1, 0.05, 0.09], [(0.08, 0.12), (0.04, 0.06), (0.08, 0.1)])
        assert lad.violations() == [(2, True)] and not lad.monotone_trend

    def test_two_soft_violations_fail(self):
        lad = self.ladder([0.1, 0.1, 0.1], [(0.05, 0.15)] * 3)
        assert len(lad.violations()) == 2 and not lad.monotone_trend

    def test_epsilons_must_decrease(self):
        with pytest.raises(stats.StatsError):
            stats.ConvergenceLadder([0.1, 0.2], [0, 0], [(0, 0)] * 2)

    def test_ks_ladder(self):
        rng = np.random.default_rng(6)
        limit = rng.normal(size=2000)
        samples = {e: rng.normal(loc=e, size=2000) for e in (0.4, 0.2, 0.1)}
        lad = stats.ks_ladder(samples, limit, n_boot=100)
        assert lad.epsilons == [0.4, 0.2, 0.1] and lad.monotone_trend
        rows = lad.rows()
        assert [r.n for r in rows] == [2000] * 3 and all(r.metric == "ks" for r in rows)
