"""Command-line behavior: config precedence, artifacts, exit codes."""

import csv
import json
import math
import os

import numpy as np
import pytest

from dqbsde import cli


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def read_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_per_command_defaults(self):
        parser = cli.build_parser()
        local = cli.resolve_config(parser.parse_args(["solve-local"]))
        assert local.instance == "decoupled-pure-quadratic"
        assert (local.steps, local.paths, local.basis) == (128, 20000, "poly:5")
        glob = cli.resolve_config(parser.parse_args(["solve-global"]))
        assert glob.instance == "coupled-linear"
        lem = cli.resolve_config(parser.parse_args(["verify-lemmas"]))
        assert (lem.steps, lem.paths, lem.basis) == (64, 20000, "bins:24")
        assert (lem.battery_count, lem.girsanov_count) == (20, 20)

    def test_config_file_then_flags(self, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text("steps: 32\npaths: 555\nseed: 9\n")
        parser = cli.build_parser()
        args = parser.parse_args(["constants", "--config", str(cfg), "--steps", "16"])
        resolved = cli.resolve_config(args)
        assert resolved.steps == 16       # flag beats file
        assert resolved.paths == 555      # file beats default
        assert resolved.seed == 9

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "run.yaml"
        cfg.write_text("stepz: 32\n")
        rc = cli.main(["constants", "--config", str(cfg)])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ConfigError"
        assert "stepz" in err["message"]

    def test_bad_values_exit_2(self, tmp_path, capsys):
        out = str(tmp_path / "o")
        assert cli.main(["constants", "--basis", "cubic:3", "--out", out]) == 2
        assert cli.main(["constants", "--basis", "poly:99", "--out", out]) == 2
        assert cli.main(["constants", "--steps", "0", "--out", out]) == 2
        cfg = tmp_path / "run.yaml"
        cfg.write_text("norm_cap_sq: 0.5\nthreshold_k: 0.5\n")
        assert cli.main(["verify-lemmas", "--config", str(cfg), "--out", out]) == 2
        for line in capsys.readouterr().err.strip().splitlines():
            assert json.loads(line)["code"] == 2


class TestJsonable:
    def test_numpy_and_special_floats(self):
        payload = {
            "flag": np.bool_(True),
            "count": np.int64(3),
            "bad": float("nan"),
            "hi": float("inf"),
            "lo": -float("inf"),
            "arr": np.array([1.5, 2.5]),
            "nested": {"t": (np.float64(0.25),)},
        }
        out = cli._jsonable(payload)
        assert out["flag"] is True and isinstance(out["flag"], bool)
        assert out["count"] == 3 and isinstance(out["count"], int)
        assert out["bad"] == "nan" and out["hi"] == "inf" and out["lo"] == "-inf"
        assert out["arr"] == [1.5, 2.5]
        assert out["nested"]["t"] == [0.25]
        json.dumps(out)


class TestConstantsCommand:
    def test_summary_and_manifest(self, tmp_path):
        out = str(tmp_path / "c")
        assert cli.main(["constants", "--out", out]) == 0
        summary = read_json(os.path.join(out, "summary.json"))
        assert summary["instance"] == "decoupled-pure-quadratic"
        assert summary["structural"]["gamma"] == 1.0
        local = summary["local"]
        assert local["delta"] == pytest.approx(0.09196986029286058, rel=1e-12)
        assert local["epsilon"] == pytest.approx(1.5782625979547906e-05, rel=1e-12)
        assert local["balance_residual"] <= 1e-10
        assert summary["global"]["y_uniform_bound"] == pytest.approx(
            14.7781121978613, rel=1e-10)
        manifest = read_json(os.path.join(out, "manifest.json"))
        assert manifest["tool"] == "dqbsde"
        assert manifest["command"] == "constants"
        assert manifest["config"]["seed"] == 12345
        assert set(manifest["versions"]) == {"python", "numpy", "matplotlib", "pyyaml"}


class TestListInstances:
    def test_table_and_no_artifacts(self, tmp_path, capsys):
        out = str(tmp_path / "never")
        assert cli.main(["list-instances", "--out", out]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 4
        names = [ln.split()[0] for ln in lines]
        assert names == ["coupled-diagquad", "coupled-linear",
                         "decoupled-pure-quadratic", "lemma-battery"]
        assert not os.path.exists(out)


@pytest.fixture(scope="module")
def local_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "local")
    rc = cli.main(["solve-local", "--steps", "16", "--paths", "800",
                   "--basis", "bins:8", "--seed", "5", "--out", out])
    return rc, out


class TestSolveLocal:
    def test_artifact_set(self, local_run):
        rc, out = local_run
        assert rc == 0
        for name in ("manifest.json", "summary.json", "trace.csv",
                     "solution.csv", "trace.png", "solution.png"):
            assert os.path.exists(os.path.join(out, name)), name

    def test_summary_contents(self, local_run):
        _, out = local_run
        s = read_json(os.path.join(out, "summary.json"))
        assert s["command"] == "solve-local"
        assert s["converged"] is True
        assert s["in_ball"] is None     # working mode carries no ball certificate
        assert len(s["y0"]) == 1 and math.isfinite(s["y0"][0])
        assert s["grid"] == {"t0": 0.0, "t1": 1.0, "dt": 1.0 / 16}

    def test_trace_format(self, local_run):
        _, out = local_run
        rows = read_csv(os.path.join(out, "trace.csv"))
        assert rows[0] == ["iteration", "y_dist_sup", "z_dist_bmo", "ratio", "in_ball"]
        assert [r[0] for r in rows[1:]] == [str(i + 1) for i in range(len(rows) - 1)]
        for r in rows[1:]:
            float(r[1]), float(r[2])
            assert r[3] == "nan" or math.isfinite(float(r[3]))
            assert r[4] in ("true", "false")

    def test_solution_format(self, local_run):
        _, out = local_run
        rows = read_csv(os.path.join(out, "solution.csv"))
        assert rows[0] == ["node", "time", "y1_q05", "y1_q25", "y1_q50",
                           "y1_q75", "y1_q95", "y1_mean", "z1_rms"]
        assert len(rows) == 1 + 17
        for r in rows[1:]:
            assert float(r[2]) <= float(r[4]) <= float(r[6])
        assert rows[-1][-1] == ""       # no gradient at the terminal node
        assert float(rows[-2][-1]) >= 0.0

    def test_same_seed_same_bytes(self, local_run, tmp_path):
        _, out = local_run
        other = str(tmp_path / "again")
        rc = cli.main(["solve-local", "--steps", "16", "--paths", "800",
                       "--basis", "bins:8", "--seed", "5", "--out", other,
                       "--no-figures"])
        assert rc == 0
        for name in ("summary.json", "trace.csv", "solution.csv"):
            with open(os.path.join(out, name), "rb") as a, \
                 open(os.path.join(other, name), "rb") as b:
                assert a.read() == b.read(), name
        assert not os.path.exists(os.path.join(other, "trace.png"))


class TestSolveGlobal:
    def test_small_run(self, tmp_path):
        out = str(tmp_path / "g")
        rc = cli.main(["solve-global", "--steps", "32", "--paths", "1500",
                       "--seed", "7", "--basis", "bins:8",
                       "--segment-length", "0.5", "--out", out, "--no-figures"])
        assert rc == 0
        s = read_json(os.path.join(out, "summary.json"))
        closed = [math.exp(-0.5) * math.cosh(0.5), math.exp(-0.5) * math.sinh(0.5)]
        assert abs(s["y0"][0] - closed[0]) < 0.05
        assert abs(s["y0"][1] - closed[1]) < 0.05
        assert s["plan"]["n_segments"] == 2
        assert s["plan"]["breakpoints"] == [1.0, 0.5, 0.0]
        assert len(s["seams"]) == 1
        assert s["seams"][0]["margin"] >= 0.0
        assert s["max_seam_jump"] <= 1e-6
        assert s["z_bmo"]["within"] is True
        header = read_csv(os.path.join(out, "solution.csv"))[0]
        assert "y2_mean" in header and "z2_rms" in header


class TestErrorExits:
    def test_nonconvergence_exit_4(self, tmp_path, capsys):
        out = str(tmp_path / "f")
        rc = cli.main(["solve-local", "--steps", "16", "--paths", "800",
                       "--basis", "bins:8", "--seed", "5", "--tol", "1e-15",
                       "--max-iters", "1", "--out", out, "--no-figures"])
        assert rc == 4
        err = json.loads(capsys.readouterr().err)
        assert err == {"code": 4, "error": "PicardConvergenceError",
                       "message": err["message"]}
        assert "no convergence" in err["message"]
        # manifest and the partial trace land even on failure
        assert os.path.exists(os.path.join(out, "manifest.json"))
        assert os.path.exists(os.path.join(out, "trace.csv"))
        assert not os.path.exists(os.path.join(out, "summary.json"))

    def test_certified_horizon_guard_exit_5(self, tmp_path, capsys):
        out = str(tmp_path / "c")
        rc = cli.main(["solve-local", "--mode", "certified", "--steps", "8",
                       "--paths", "100", "--out", out, "--no-figures"])
        assert rc == 5
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ParameterError"
        assert "certified interval" in err["message"]

    def test_stitch_failure_exit_3(self, tmp_path, capsys):
        out = str(tmp_path / "s")
        rc = cli.main(["solve-global", "--mode", "certified", "--steps", "8",
                       "--paths", "100", "--out", out, "--no-figures"])
        assert rc == 3
        assert json.loads(capsys.readouterr().err)["error"] == "StitchError"

    def test_unknown_instance_exit_2(self, tmp_path, capsys):
        rc = cli.main(["solve-local", "--instance", "nope",
                       "--out", str(tmp_path / "i"), "--no-figures"])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "InstanceError"
        assert "built-ins" in err["message"]

    def test_failed_verification_exit_6(self, tmp_path, monkeypatch):
        out = str(tmp_path / "v")
        monkeypatch.setitem(cli._RUNNERS, "verify-lemmas",
                            lambda cfg, out_dir: {"passed": False})
        parser = cli.build_parser()
        cfg = cli.resolve_config(parser.parse_args(["verify-lemmas", "--out", out]))
        assert cli.run(cfg) == 6
        assert read_json(os.path.join(out, "summary.json")) == {"passed": False}


class TestVerifyLemmas:
    def test_small_battery_passes(self, tmp_path):
        cfg = tmp_path / "small.yaml"
        cfg.write_text("battery_count: 4\ngirsanov_count: 3\n")
        out = str(tmp_path / "v")
        rc = cli.main(["verify-lemmas", "--config", str(cfg), "--steps", "24",
                       "--paths", "4000", "--seed", "2024", "--out", out])
        assert rc == 0
        s = read_json(os.path.join(out, "summary.json"))
        assert s["passed"] is True
        assert len(s["constant_cases"]) == 2
        for case in s["constant_cases"]:
            assert case["jn_pass"] and case["rh_pass"]
            assert case["jn_lhs"] <= case["jn_bound"]
            assert case["rh_lhs"] <= case["rh_bound"]
        assert s["john_nirenberg"]["all_pass"] is True
        assert s["reverse_holder"]["all_pass"] is True
        assert len(s["reverse_holder"]["per_integrand"]) == 4
        assert s["norm_equivalence_l4"] >= 1.0
        gir = s["girsanov"]
        assert gir["zero_case"]["pass"] is True
        assert len(gir["per_pair"]) == 3 and gir["within"] is True
        assert os.path.exists(os.path.join(out, "lemma_checks.png"))
