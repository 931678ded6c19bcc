"""Characteristics, semilinear columns, flow maps and the environment process."""

import numpy as np
import pytest

from homogenize_lab import microscale as micro
from homogenize_lab import nonlinearity as nl
from homogenize_lab import spectral_field as sf
from homogenize_lab.errors import ConfigError, FlowMonotonicityError
from homogenize_lab.rng import stream, streams

ISO = sf.isotropic_shell()
SHEAR = sf.shear_measure()


def const_spec(c, kind="constant"):
    phi = nl.Constant() if kind == "constant" else nl.FieldComponent(1)
    return nl.NonlinearitySpec(((nl.SmoothCoefficient("const", c=c), phi),))


class TestConfig:
    def test_rejects_large_step(self):
        with pytest.raises(ConfigError, match="stability"):
            micro.MicroConfig(0.1, 0, 1, dtau=1.0).resolve(ISO)

    def test_rejects_bad_interval(self):
        with pytest.raises(ConfigError):
            micro.MicroConfig(0.1, 1.0, 1.0)
        with pytest.raises(ConfigError):
            micro.MicroConfig(0.0, 0.0, 1.0)

    def test_grid(self):
        g = micro.MicroConfig(0.2, 0.5, 1.5, n_out=4).resolve(ISO)
        assert g.times[0] == 0.5 and g.times[-1] == pytest.approx(1.5)
        assert np.all(np.diff(g.times) > 0) and g.times.size == 5


class TestCharacteristics:
    def test_null_field(self):
        cfg = micro.MicroConfig(0.2, 0, 1, n_out=5)
        rec = micro.simulate_characteristic(ISO, cfg, [0.3, -0.2], stream(0, 0, 0, 0), null_field=True)
        np.testing.assert_array_equal(rec.positions, np.tile([0.3, -0.2], (6, 1)))

    def test_shear_freezes_first_coordinate(self):
        cfg = micro.MicroConfig(0.2, 0, 1, n_out=5)
        res = micro.integrate_batch(SHEAR, cfg, np.tile([0.3, -0.2], (50, 1)), streams(0, 0, 0, range(50)))
        assert np.all(res.positions[..., 0] == 0.3)
        assert np.std(res.positions[-1, :, 1]) > 0.1

    def test_first_position_is_start(self):
        cfg = micro.MicroConfig(0.3, 0, 1, n_out=3)
        rec = micro.simulate_characteristic(ISO, cfg, [1.0, 2.0], stream(0, 0, 0, 4), seed_id=4)
        np.testing.assert_array_equal(rec.positions[0], [1.0, 2.0])
        header, rows = rec.to_csv_rows()
        assert header[:3] == ["s", "x1", "x2"] and len(rows) == 4

    def test_batch_matches_single_paths(self):
        cfg = micro.MicroConfig(0.3, 0, 1)
        x0 = np.array([0.1, 0.2])
        batch = micro.integrate_batch(ISO, cfg, np.tile(x0, (3, 1)), streams(7, 0, 0, range(3))).positions[-1]
        for i in range(3):
            one = micro.simulate_characteristic(ISO, cfg, x0, stream(7, 0, 0, i)).positions[-1]
            np.testing.assert_array_equal(batch[i], one)

    def test_shared_field_for_multiple_starts(self):
        cfg = micro.MicroConfig(0.3, 0, 1)
        starts = np.array([[0.1, 0.2], [0.1, 0.2], [1.0, -1.0]])
        multi = micro.integrate_batch(ISO, cfg, np.tile(starts, (4, 1, 1)), streams(3, 0, 0, range(4))).positions[-1]
        np.testing.assert_array_equal(multi[:, 0], multi[:, 1])
        single = micro.integrate_batch(ISO, cfg, np.tile(starts[2], (4, 1)), streams(3, 0, 0, range(4))).positions[-1]
        np.testing.assert_allclose(multi[:, 2], single, rtol=0, atol=1e-13)

    def test_step_refinement_is_first_order(self):
        # common random numbers: (h, 2 field substeps) and (h/2, 1 substep) see the same noise
        x0 = np.tile([0.3, 0.0], (50, 1))
        bound = micro.MicroConfig.dtau_bound(ISO)
        diffs = []
        for k in (8, 16, 32):
            h = bound / k
            a = micro.integrate_batch(ISO, micro.MicroConfig(0.4, 0, 1, dtau=h, field_substeps=2), x0,
                                      streams(0, 0, 0, range(50))).positions[-1]
            b = micro.integrate_batch(ISO, micro.MicroConfig(0.4, 0, 1, dtau=h / 2), x0,
                                      streams(0, 0, 0, range(50))).positions[-1]
            diffs.append(np.median(np.linalg.norm(a - b, axis=1)))
        slope = np.polyfit(np.log2([8, 16, 32]), np.log2(diffs), 1)[0]
        print(f"step-refinement differences {diffs}, fitted reduction per halving {2 ** -slope:.3f}")
        assert 2 ** -slope >= 2.0


class TestSemilinear:
    def test_zero_nonlinearity_keeps_u(self):
        cfg = micro.MicroConfig(0.3, 0, 1, n_out=4)
        rec = micro.simulate_semilinear(ISO, cfg, nl.ZERO, 1, [0, 0], 0.7, stream(0, 0, 0, 0))
        np.testing.assert_array_equal(rec.u_values, 0.7)

    def test_constant_growth(self):
        cfg = micro.MicroConfig(0.3, 0.25, 1.0, n_out=3)
        rec = micro.simulate_semilinear(ISO, cfg, const_spec(0.8), 0, [0, 0], 0.1, stream(0, 0, 0, 0))
        np.testing.assert_allclose(rec.u_values, 0.1 + 0.8 * (rec.times - 0.25), atol=1e-12)

    def test_regime_mismatch(self):
        cfg = micro.MicroConfig(0.3, 0, 1)
        with pytest.raises(ConfigError):
            micro.simulate_semilinear(ISO, cfg, const_spec(0.8), 1, [0, 0], 0.1, stream(0, 0, 0, 0))

    def test_linear_representation(self):
        # f = 0: inverting the identity flow gives u0(X(T))
        cfg = micro.MicroConfig(0.3, 0, 1)
        grid = np.linspace(-2, 2, 9)
        table = micro.simulate_flow_map(ISO, cfg, nl.ZERO, grid, [0.1, 0.1], stream(0, 0, 0, 0))
        np.testing.assert_array_equal(table.values, np.tile(grid, (2, 1)))
        np.testing.assert_array_equal(table.xi, 1.0)
        target = 0.37
        assert micro.invert_flow(table.terminal, grid, target) == pytest.approx(target)


@pytest.fixture(scope="module")
def table():
    cfg = micro.MicroConfig(0.3, 0, 1, n_out=4)
    grid = np.linspace(-2, 2, 81)
    return micro.simulate_flow_map(SHEAR, cfg, nl.DEMO_ZERO_U, grid, [0.3, 0.0], stream(1, 0, 0, 0))


class TestFlowMap:
    def test_monotone_and_positive(self, table):
        assert np.all(np.diff(table.values, axis=-1) > 0)
        assert np.all(table.xi > 0)

    def test_xi_matches_finite_difference(self, table):
        g = table.u_grid
        fd = (table.values[:, 2:] - table.values[:, :-2]) / (g[2:] - g[:-2])
        rel = np.abs(table.xi[:, 1:-1] - fd) / np.abs(fd)
        assert rel.max() < 0.05

    def test_round_trip(self, table):
        back = micro.invert_flow(table.terminal, table.u_grid, table.terminal)
        np.testing.assert_allclose(back, table.u_grid, atol=1e-9)

    def test_identity_tail(self, table):
        assert micro.invert_flow(table.terminal, table.u_grid, 50.0) == 50.0

    def test_non_monotone_table(self):
        with pytest.raises(FlowMonotonicityError):
            micro.invert_flow([0.0, 1.0, 0.5], [0.0, 1.0, 2.0], 0.2)

    def test_crossing_reports_ids(self):
        with pytest.raises(FlowMonotonicityError) as info:
            micro.assert_monotone(np.array([[0.0, 1.0], [1.0, 0.5]]), [10, 11])
        assert info.value.trajectory_ids == [11]


class TestEnvironment:
    def test_shear_first_component_vanishes(self):
        _, v, _ = micro.sample_environment(SHEAR, 2.0, 0.05, streams(0, 5, 0, range(20)))
        assert np.all(v[..., 0] == 0)

    def test_shear_autocorrelation(self):
        n = 4000
        times, v, _ = micro.sample_environment(SHEAR, 2.0, 0.05, streams(0, 5, 1, range(n)), out_every=10)
        prod = v[:, :, 1] * v[:1, :, 1]
        se = prod.std(axis=1, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(prod.mean(axis=1) - np.exp(-times)) <= 4 * se)

    def test_stationarity(self):
        n = 2000
        times, v, ph = micro.sample_environment(ISO, 4.0, 0.05, streams(0, 5, 2, range(n)), spec=nl.DEMO_ZERO_U,
                                                out_every=4)
        half = times.size // 2
        stats = lambda a: (a[..., 0] ** 2).mean(axis=0)
        a, b = stats(v[:half]), stats(v[half:])
        se = np.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)
        assert abs(a.mean() - b.mean()) <= 4 * se
