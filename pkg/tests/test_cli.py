import csv
import json

import numpy as np
import pytest

from fbdsdej import artifacts
from fbdsdej.cli import main
from fbdsdej.config import ConfigError, build_problem, config_from_dict, parse_config


def _write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def _rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# run ")
    return list(csv.reader(lines[1:]))


SMALL_EX1 = {"problem": "example1", "T": 1, "steps": 10, "paths": 500, "seed": 1, "x": [1.0],
             "regression": {"degree": 1}, "continuation": {"max_iter": 200}, "csv_paths": 3}


def test_minimal_config_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, "c.json", {"problem": "example1", "T": 1, "steps": 100, "paths": 10000, "seed": 1}))
    assert cfg.continuation.delta == 0.25
    assert cfg.continuation.min_delta == 1 / 64
    assert cfg.regression.degree == 2
    assert cfg.horizon == 1.0


def test_steps_zero_names_key():
    with pytest.raises(ConfigError, match="steps"):
        config_from_dict({"problem": "example1", "steps": 0})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="continuation.speed"):
        config_from_dict({"problem": "example1", "continuation": {"speed": 2}})


def test_unknown_problem():
    with pytest.raises(ConfigError, match="problem"):
        config_from_dict({"problem": "example9"})


def test_example2_other_horizon_warns():
    with pytest.warns(UserWarning, match="3\\*pi/4"):
        config_from_dict({"problem": "example2", "T": 1.0})
    assert config_from_dict({"problem": "example2"}).horizon == pytest.approx(3 * np.pi / 4)


def test_example2_dimension_check():
    with pytest.raises(ConfigError):
        config_from_dict({"problem": "example2", "d_H": 2})


def test_problem_file_relative_to_config(tmp_path):
    _write(tmp_path, "prob.json", {"b": {"matrix": [[0, -1, 0, 0, 0]]}})
    cfg = parse_config(_write(tmp_path, "c.json", {"problem": "prob.json", "x": [2.0]}))
    coeffs, pert, closed = build_problem(cfg)
    assert coeffs.spec.x.tolist() == [2.0] and closed is None


def test_worker_count_not_hashed():
    a = config_from_dict({"problem": "example1", "workers": 1})
    b = config_from_dict({"problem": "example1", "workers": 4})
    assert artifacts.run_id(a.hashed_fields(), "solve") == artifacts.run_id(b.hashed_fields(), "solve")


def test_check_exit_codes(tmp_path, capsys):
    c1 = _write(tmp_path, "c1.json", {"problem": "example1", "hypotheses": {"samples": 1000}})
    c2 = _write(tmp_path, "c2.json", {"problem": "example2", "hypotheses": {"samples": 1000}})
    assert main(["check", "--config", str(c1), "--out", str(tmp_path / "o1")]) == 0
    assert "verified-at-declared" in capsys.readouterr().out
    assert main(["check", "--config", str(c2), "--out", str(tmp_path / "o2")]) == 2
    rep = json.loads((tmp_path / "o2" / "hypotheses.json").read_text())
    assert rep["statuses"]["A1"] == "violated" and rep["witnesses"]
    manifest = json.loads((tmp_path / "o2" / "manifest.json").read_text())
    assert manifest["status"]["exit_code"] == 2
    assert manifest["run"] == rep["run"]


def test_config_error_exit(tmp_path, capsys):
    assert main(["check", "--config", str(tmp_path / "missing.json")]) == 1
    bad = _write(tmp_path, "bad.json", {"problem": "example1", "steps": 0})
    assert main(["solve", "--config", str(bad)]) == 1
    assert "steps" in capsys.readouterr().err


def test_solve_verify_and_artifacts(tmp_path):
    cfg = _write(tmp_path, "c.json", SMALL_EX1)
    out = tmp_path / "run"
    assert main(["solve", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    header, *rows = _rows(out / "trajectories.csv")
    assert header == ["path", "t", "y0", "Y0", "z0_0", "Z0_0", "k0_0"]
    assert len(rows) == 3 * 11
    trace_header, *trace = _rows(out / "trace.csv")
    assert trace_header == ["alpha", "iter", "m2_dist", "ratio", "seconds"]
    ladder = json.loads((out / "ladder.json").read_text())
    assert ladder["steps"][-1]["alpha"] == 1.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["overrides"] == {"seed": 5, "output": str(out)}
    assert manifest["seed"] == 5
    assert set(manifest["artifacts"]) >= {"trajectories.csv", "ladder.json", "solution.npz", "trace.csv"}
    assert manifest["artifacts"]["ladder.json"] == artifacts.sha256(out / "ladder.json")

    vout = tmp_path / "verify"
    assert main(["verify", "--config", str(cfg), "--out", str(vout), "--seed", "5",
                 "--solution", str(out / "solution.npz")]) == 0
    res = json.loads((vout / "residuals.json").read_text())
    assert res["forward_sup"] < 0.1 and res["backward_sup"] < 0.1
    assert _rows(vout / "residuals.csv")[0] == ["t", "fwd_res", "bwd_res"]


def test_verify_rejects_mismatched_solution(tmp_path):
    cfg = _write(tmp_path, "c.json", SMALL_EX1)
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    code = main(["verify", "--config", str(cfg), "--out", str(tmp_path / "b"), "--steps", "12",
                 "--solution", str(tmp_path / "a" / "solution.npz")])
    assert code == 1


def test_rerun_is_byte_identical_across_workers(tmp_path):
    cfg = _write(tmp_path, "c.json", {**SMALL_EX1, "paths": 2100})
    for w in ("1", "2"):
        assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / w), "--workers", w]) == 0
    for name in ("trajectories.csv", "ladder.json"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()


def test_solver_failure_exit(tmp_path):
    cfg = _write(tmp_path, "c.json", {"problem": "example2", "x": [1.0], "steps": 10, "paths": 300,
                                       "regression": {"degree": 1}, "continuation": {"max_iter": 30}})
    out = tmp_path / "f"
    assert main(["solve", "--config", str(cfg), "--out", str(out), "--case", "1"]) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"]["exit_code"] == 3
    assert (out / "ladder.json").exists()


def test_auto_case_without_constants_is_config_error(tmp_path):
    cfg = _write(tmp_path, "c.json", {"problem": "example2", "steps": 10, "paths": 300,
                                       "hypotheses": {"samples": 200}})
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 1


def test_decoupled_verify(tmp_path):
    cfg = _write(tmp_path, "c.json", {"problem": "decoupled", "steps": 20, "paths": 500, "x": [1.0],
                                       "decoupled": {"theta1": 0.3, "phi_T": [0.7]}})
    out = tmp_path / "d"
    assert main(["verify", "--config", str(cfg), "--out", str(out)]) == 0
    res = json.loads((out / "residuals.json").read_text())
    assert res["closed_form_errors"][0]["sup"] < 1e-10
    assert res["backward_sup"] < 1e-10


def test_probe(tmp_path):
    cfg = _write(tmp_path, "c.json", {**SMALL_EX1, "probe": {"deltas": [0.05, 0.5], "pairs": 2}})
    out = tmp_path / "p"
    assert main(["probe", "--config", str(cfg), "--out", str(out)]) == 0
    header, *rows = _rows(out / "probe.csv")
    assert header == ["delta", "pair", "ratio"] and len(rows) == 4
    summary = json.loads((out / "probe.json").read_text())
    assert summary["ratios"]["0.05"]["max"] < 0.6


def test_json_is_standard(tmp_path):
    p = artifacts.write_json(tmp_path / "x.json", {"a": float("nan"), "b": np.float64(1.5)})
    assert json.loads(p.read_text()) == {"a": None, "b": 1.5}
