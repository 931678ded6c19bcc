"""Config validation and the command-line interface."""

import json

import pytest
import yaml

from homogenize_lab import cli, runner
from homogenize_lab.config import load_raw, validate
from homogenize_lab.errors import ConfigError, FlowMonotonicityError, NumericQualityError

MEASURE = {"preset": "isotropic-shell", "num_modes": 4, "K0": 1.0, "energy": 1.0, "alpha": 1.0}


def base(**kw):
    raw = {
        "experiment": "linear", "measure": dict(MEASURE), "u0": {"center": [0.0, 0.0], "radius": 1.5},
        "T": 0.5, "x": [0.3, 0.0], "epsilons": [0.4], "n_paths": 100, "seed": 0,
        "numerics": {"n_steps": 8, "gk_paths": 50, "n_boot": 20},
    }
    raw.update(kw)
    return raw


def error_path(raw):
    with pytest.raises(ConfigError) as info:
        validate(raw)
    return info.value.path


class TestValidate:
    def test_base_is_valid(self):
        cfg = validate(base())
        assert cfg.experiment == "linear" and cfg.dim == 2 and cfg.n_paths == 100

    def test_linear_rejects_f(self):
        assert error_path(base(f="DEMO_MEAN")) == "f"

    def test_epsilons(self):
        assert error_path(base(epsilons=[0.2, 0.4])) == "epsilons[1]"
        assert error_path(base(epsilons=[0.2, 0.2])) == "epsilons[1]"
        assert error_path(base(epsilons=[1.5])) == "epsilons[0]"
        assert error_path(base(epsilons=[])) == "epsilons"

    def test_two_point_needs_distinct_points(self):
        assert error_path(base(experiment="two-point", x2=[0.3, 0.0])) == "x2"
        assert error_path(base(experiment="two-point")) == "x2"

    def test_path_count(self):
        assert error_path(base(n_paths=99)) == "n_paths"
        assert error_path(base(n_paths=1000.0)) == "n_paths"

    def test_numerics(self):
        assert error_path(base(numerics={"n_steps": 0})) == "numerics.n_steps"
        assert error_path(base(numerics={"dtau": -1})) == "numerics.dtau"
        assert error_path(base(numerics={"T_GK": 1.0})) == "numerics.T_GK"
        assert error_path(base(numerics={"bogus": 1})) == "numerics.bogus"

    def test_semilinear_regimes(self):
        assert error_path(base(experiment="semilinear-mean", f="DEMO_ZERO")) == "f"
        assert error_path(base(experiment="semilinear-zero", f="DEMO_MEAN")) == "f"
        assert error_path(base(experiment="semilinear-zero")) == "f"
        assert error_path(base(experiment="semilinear-zero", f="NOPE")) == "f"
        assert validate(base(experiment="semilinear-zero", f="DEMO_ZERO_U")).spec.centered()

    def test_measure_and_u0(self):
        bad = dict(MEASURE, alpha=-1.0)
        assert error_path(base(measure=bad)) == "measure"
        assert error_path(base(u0=None)) == "u0"
        assert error_path(base(u0={"center": [0.0], "radius": 1.0})) == "u0.center"
        assert error_path(base(T=0.0)) == "T"

    def test_hash_is_content_based(self):
        assert validate(base()).content_hash() == validate(base()).content_hash()
        assert validate(base()).content_hash() != validate(base(seed=1)).content_hash()

    def test_shipped_configs_validate(self):
        from pathlib import Path

        for path in sorted(Path(__file__).parent.parent.joinpath("configs").glob("*.yaml")):
            validate(load_raw(path))

    def test_json_and_bad_yaml(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(base()))
        assert load_raw(p)["experiment"] == "linear"
        q = tmp_path / "c.yaml"
        q.write_text("experiment: [unclosed")
        with pytest.raises(ConfigError):
            load_raw(q)


def write_cfg(tmp_path, raw, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


class TestCLI:
    def test_validate_ok(self, tmp_path, capsys):
        assert cli.main(["validate", str(write_cfg(tmp_path, base()))]) == 0
        assert capsys.readouterr().out.startswith("ok: linear")

    def test_config_error_exit(self, tmp_path, capsys):
        assert cli.main(["validate", str(write_cfg(tmp_path, base(n_paths=5)))]) == 2
        assert "n_paths" in capsys.readouterr().err

    def test_missing_file_exit(self, tmp_path):
        assert cli.main(["validate", str(tmp_path / "absent.yaml")]) == 4

    def test_run_writes_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["run", str(write_cfg(tmp_path, base())), "--out", str(out), "--seed", "3"]) == 0
        assert capsys.readouterr().out.startswith("epsilon,metric,value,ci_lo,ci_hi,n")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 3 and manifest["threads"] == 1

    def test_unwritable_output_exit(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert cli.main(["run", str(write_cfg(tmp_path, base())), "--out", str(blocker / "sub")]) == 4

    @pytest.mark.parametrize("exc", [FlowMonotonicityError("columns crossed", [7]), NumericQualityError("not PSD")])
    def test_numeric_error_exit(self, tmp_path, monkeypatch, capsys, exc):
        def boom(*a, **k):
            raise exc

        monkeypatch.setattr(runner, "run", boom)
        assert cli.main(["run", str(write_cfg(tmp_path, base())), "--out", str(tmp_path / "o")]) == 3
        assert "numeric-quality" in capsys.readouterr().err

    def test_coefficients_command(self, tmp_path):
        raw = base(experiment="coefficients", u0=None, epsilons=[])
        out = tmp_path / "co"
        assert cli.main(["coefficients", str(write_cfg(tmp_path, raw)), "--out", str(out)]) == 0
        assert (out / "coefficients.json").exists() and (out / "correlators.csv").exists()
