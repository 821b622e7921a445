import csv
import json
import math

import numpy as np
import pytest

from conftest import CONFIGS, load_config
from mfpmp.cli import EXIT_BLOWUP, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_OK, main
from mfpmp.io import config_hash, read_csv, write_csv


def run(tmp_path, command, config, *extra):
    tmp_path.mkdir(parents=True, exist_ok=True)
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(config))
    out = tmp_path / "out"
    return main([command, "--config", str(cfg), "--out", str(out), *extra]), out


def small_demo(n_steps=40, N=8):
    c = load_config("cs_demo.json")
    c["grid"] = {"T": 1.0, "n_steps": n_steps}
    c["initial"]["N"] = N
    return c


class TestConfigErrors:
    def test_malformed_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"model": {"preset": "cucker_smale",}\n}')
        assert main(["simulate", "--config", str(bad)]) == EXIT_CONFIG
        assert "line 1 column" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        c = load_config("lq_toy.json")
        c["grid"]["dt"] = 0.1
        code, _ = run(tmp_path, "simulate", c)
        assert code == EXIT_CONFIG
        assert "config field grid" in capsys.readouterr().err

    def test_bad_value_names_field(self, tmp_path, capsys):
        code, _ = run(tmp_path, "simulate", load_config("lq_toy.json"), "--set", "grid.n_steps=0")
        assert code == EXIT_CONFIG
        assert "config field grid.n_steps" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_invalid_model_parameter(self, tmp_path):
        c = small_demo()
        c["model"]["params"]["sigma"] = -1.0
        assert run(tmp_path, "simulate", c)[0] == EXIT_CONFIG

    def test_converge_without_block(self, tmp_path):
        c = small_demo()
        del c["converge"]
        assert run(tmp_path, "converge", c)[0] == EXIT_CONFIG


class TestSimulate:
    def test_zero_dynamics_is_affine(self, tmp_path):
        c = {"model": {"preset": "identity_debug", "params": {"d": 2}},
             "initial": {"y0": [[1.0, -1.0]], "x0": [[0.0, 0.0], [3.0, 1.0]]},
             "grid": {"T": 2.0, "n_steps": 8}, "control": {"constant": [0.5, 0.25]}}
        code, out = run(tmp_path, "simulate", c)
        assert code == EXIT_OK
        cols, data, _ = read_csv(out / "trajectory.csv")
        t = data[:, 0]
        np.testing.assert_allclose(data[:, cols.index("y0_0")], 1.0 + 0.5 * t, atol=1e-14)
        np.testing.assert_allclose(data[:, cols.index("y0_1")], -1.0 + 0.25 * t, atol=1e-14)
        assert np.all(data[:, cols.index("x1_0")] == 3.0)

    def test_momentum_drift(self, tmp_path):
        c = load_config("cs_demo.json")
        c["grid"] = {"T": 1.0, "n_steps": 1000}
        code, out = run(tmp_path, "simulate", c)
        assert code == EXIT_OK
        assert json.loads((out / "summary.json").read_text())["momentum_drift"] <= 1e-10

    def test_blow_up_exit_code(self, tmp_path, capsys):
        c = {"model": {"preset": "identity_debug", "params": {"kernel_gain": 60.0}},
             "initial": {"y0": [[0.0]], "x0": [[-1.0], [1.0]]}, "grid": {"T": 1.0, "n_steps": 200}}
        assert run(tmp_path, "simulate", c)[0] == EXIT_BLOWUP
        assert "blow-up" in capsys.readouterr().err

    def test_header_and_seed(self, tmp_path):
        c = small_demo()
        code, out = run(tmp_path, "simulate", c, "--seed", "5")
        assert code == EXIT_OK
        header = (out / "trajectory.csv").read_text().splitlines()[0]
        c["seed"] = 5
        assert f"config_hash={config_hash(c)}" in header and "seed=5" in header

    def test_set_override(self, tmp_path):
        code, out = run(tmp_path, "simulate", small_demo(), "--set", "initial.N=3")
        assert code == EXIT_OK
        cols, _, _ = read_csv(out / "trajectory.csv")
        assert "x2_1" in cols and "x3_0" not in cols


class TestOptimize:
    def test_lq_cost(self, tmp_path):
        code, out = run(tmp_path, "optimize", load_config("lq_toy.json"))
        assert code == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        # scalar Riccati: optimal value P(0) y0^2 with P(t) = tanh(1 - t)
        assert abs(summary["final_cost"] - math.tanh(1.0)) <= 1e-6
        assert summary["converged"]

    def test_nonconvergence_exit_code(self, tmp_path):
        c = small_demo()
        c["sweep"]["max_iters"] = 1
        code, out = run(tmp_path, "optimize", c)
        assert code == EXIT_NONCONVERGED
        assert (out / "bundle.csv").exists()

    def test_byte_identical_reruns(self, tmp_path):
        c = small_demo()
        a, out_a = run(tmp_path / "a", "optimize", c)
        b, out_b = run(tmp_path / "b", "optimize", c)
        assert a == b == EXIT_OK
        for name in ("bundle.csv", "sweep_history.csv", "summary.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
        assert b"\r\n" not in (out_a / "bundle.csv").read_bytes()


@pytest.fixture(scope="module")
def stored(tmp_path_factory):
    code, out = run(tmp_path_factory.mktemp("verify"), "optimize", small_demo())
    assert code == EXIT_OK
    return out / "bundle.csv"


class TestVerify:
    def test_stored_bundle_passes(self, tmp_path, stored):
        c = small_demo()
        c["verify"] = {"bundle": str(stored), "stride": 4}
        code, out = run(tmp_path, "verify", c)
        report = json.loads((out / "verification.json").read_text())
        assert code == EXIT_OK, report
        assert report["passed"] and report["e_uguale_max"] <= 1e-10

    def test_corrupted_bundle_fails(self, tmp_path, stored):
        cols, data, comment = read_csv(stored)
        idx = [i for i, c in enumerate(cols) if c.startswith("r")]
        data[:, idx] *= 2.0
        bad = tmp_path / "bad.csv"
        write_csv(bad, cols, data, comment)
        c = small_demo()
        c["verify"] = {"bundle": str(bad), "stride": 4}
        code, out = run(tmp_path, "verify", c)
        assert code == EXIT_NONCONVERGED
        report = json.loads((out / "verification.json").read_text())
        assert not report["gates"]["e_uguale"]

    def test_missing_bundle(self, tmp_path):
        c = small_demo()
        c["verify"] = {"bundle": str(tmp_path / "none.csv")}
        assert run(tmp_path, "verify", c)[0] == EXIT_CONFIG


@pytest.mark.slow
def test_converge_outputs(tmp_path):
    c = small_demo()
    c["converge"] = {"Ns": [4, 8], "duplicate_check": "first"}
    code, out = run(tmp_path, "converge", c)
    assert code == EXIT_OK
    lines = (out / "convergence.csv").read_text().splitlines()
    rows = list(csv.DictReader(lines[1:]))
    assert lines[0].startswith("# mfpmp convergence")
    assert [r["N"] for r in rows] == ["4", "8"] and rows[0]["error"] == ""
    report = json.loads((out / "convergence.json").read_text())
    assert report["rows"][0]["dup_cost_gap"] <= 1e-10


def test_shipped_configs_validate():
    from mfpmp.cli import validate_config

    for path in CONFIGS.glob("*.json"):
        validate_config(json.loads(path.read_text()))
