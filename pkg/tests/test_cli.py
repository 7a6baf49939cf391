import json

import numpy as np
import pytest

from vvrkbs.cli import main
from vvrkbs.dual_pair import DualPairSpec
from vvrkbs.feature import FeatureMap, phi_matrix
from vvrkbs.operator_learning import hyper_evaluate, hyper_model_from_json_dict
from vvrkbs.solver import (
    Loss,
    Problem,
    identity_measurement,
    lambda_max,
    product_grid,
)


def _base_config(**solver_overrides):
    solver = {
        "lambda": 0.08,
        "mode": "group",
        "max_atoms": 10,
        "restarts": 8,
        "tol": 1e-4,
        "seed": 3,
        "refit": {"max_iter": 5000, "tol": 1e-13},
        "grid_per_dim": 5,
    }
    solver.update(solver_overrides)
    return {
        "feature": {
            "kind": "neural",
            "dx": 1,
            "radius": 1.5,
            "beta": "one",
            "activation": "tanh",
        },
        "space": {"d": 2, "norm": "l2"},
        "solver": solver,
        "oracle": {"grid_per_dim": 5},
    }


DATA_ROWS = ["x0,y0,y1", "0.1,0.9,-0.3", "-0.4,0.2,0.8", "0.7,-0.5,0.1"]


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _write_fixture(tmp_path, config=None):
    cfg = _write(tmp_path, "config.json", json.dumps(config or _base_config()))
    data = _write(tmp_path, "data.csv", "\n".join(DATA_ROWS) + "\n")
    return cfg, data


def test_fit_writes_model_and_report(tmp_path, capsys):
    cfg, data = _write_fixture(tmp_path)
    out = str(tmp_path / "model.json")
    assert main(["fit", "--config", cfg, "--data", data, "--out", out]) == 0
    report = json.loads(capsys.readouterr().out)
    assert list(report.keys()) == [
        "objective", "atom_count", "certificate", "wall_time_ms", "seed",
        "config_digest",
    ]
    assert report["seed"] == 3
    assert len(report["config_digest"]) == 16
    model = json.loads((tmp_path / "model.json").read_text())
    assert list(model.keys()) == ["atoms", "norm", "radius", "dim", "feature", "network"]
    assert report["atom_count"] == len(model["atoms"]) >= 1
    assert (tmp_path / "model.json.report.json").exists()


def test_fit_reruns_are_byte_identical(tmp_path, capsys):
    cfg, data = _write_fixture(tmp_path)
    out1 = str(tmp_path / "m1.json")
    out2 = str(tmp_path / "m2.json")
    assert main(["fit", "--config", cfg, "--data", data, "--out", out1]) == 0
    r1 = json.loads(capsys.readouterr().out)
    assert main(["fit", "--config", cfg, "--data", data, "--out", out2]) == 0
    r2 = json.loads(capsys.readouterr().out)
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    assert r1["objective"] == r2["objective"]
    assert r1["atom_count"] == r2["atom_count"]


def test_fit_missing_csv_column_exits_2(tmp_path, capsys):
    cfg, _ = _write_fixture(tmp_path)
    bad = _write(tmp_path, "bad.csv", "x0,y1\n0.1,0.2\n")
    rc = main(["fit", "--config", cfg, "--data", bad,
               "--out", str(tmp_path / "m.json")])
    assert rc == 2
    assert "y0" in capsys.readouterr().err


def test_fit_above_lambda_max_writes_empty_atoms(tmp_path, capsys):
    feat = FeatureMap("neural", dx=1, radius=1.5, beta="one", activation="tanh")
    spec = DualPairSpec(2, "l2")
    data = np.array([[float(v) for v in row.split(",")] for row in DATA_ROWS[1:]])
    grid = product_grid(feat.radius, feat.dw, 5)
    p = Problem(data[:, :1], data[:, 1:], Loss(), identity_measurement(),
                1.0, feat, spec, omega_grid=grid)
    lam_max = lambda_max(p)
    cfg, csv_path = _write_fixture(tmp_path, _base_config(**{"lambda": 1.05 * lam_max}))
    out = str(tmp_path / "empty.json")
    assert main(["fit", "--config", cfg, "--data", csv_path, "--out", out]) == 0
    model = json.loads((tmp_path / "empty.json").read_text())
    assert model["atoms"] == []
    capsys.readouterr()


def test_fit_atom_budget_exhaustion_exits_3_with_model(tmp_path, capsys):
    cfg, data = _write_fixture(
        tmp_path, _base_config(**{"lambda": 0.002, "max_atoms": 1})
    )
    out = str(tmp_path / "partial.json")
    rc = main(["fit", "--config", cfg, "--data", data, "--out", out])
    assert rc == 3
    captured = capsys.readouterr()
    assert "convergence" in captured.err
    model = json.loads((tmp_path / "partial.json").read_text())
    assert len(model["atoms"]) == 1


def test_usage_errors_exit_1(tmp_path, capsys, monkeypatch):
    assert main([]) == 1
    assert main(["fit"]) == 1  # missing required flags
    capsys.readouterr()
    monkeypatch.setenv("VVRKBS_THREADS", "many")
    assert main(["verify", "--trials", "1"]) == 1
    monkeypatch.setenv("VVRKBS_THREADS", "0")
    assert main(["verify", "--trials", "1"]) == 0
    capsys.readouterr()


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = _write(tmp_path, "broken.json", "{not json")
    data = _write(tmp_path, "d.csv", "\n".join(DATA_ROWS) + "\n")
    assert main(["fit", "--config", bad, "--data", data,
                 "--out", str(tmp_path / "m.json")]) == 2
    nolam = _base_config()
    del nolam["solver"]["lambda"]
    cfg = _write(tmp_path, "nolam.json", json.dumps(nolam))
    assert main(["fit", "--config", cfg, "--data", data,
                 "--out", str(tmp_path / "m.json")]) == 2
    capsys.readouterr()


def test_verify_passes_and_reports_checks(capsys):
    assert main(["verify", "--trials", "10", "--seed", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] is True
    names = [c["name"] for c in report["checks"]]
    assert "reproducing_primal" in names
    assert "hyper_two_path" in names
    assert all(c["passed"] for c in report["checks"])


def test_verify_fault_injection_exits_4(capsys, monkeypatch):
    monkeypatch.setenv("VVRKBS_FAULT_INJECT", "1e-6")
    assert main(["verify", "--trials", "5"]) == 4
    captured = capsys.readouterr()
    report = json.loads(captured.out)
    assert report["passed"] is False
    assert "reproducing" in captured.err


def test_verify_rejects_bad_trials(capsys):
    assert main(["verify", "--trials", "0"]) == 1
    capsys.readouterr()


def test_oracle_reports_small_gap(tmp_path, capsys):
    cfg, data = _write_fixture(tmp_path)
    assert main(["oracle", "--config", cfg, "--data", data]) == 0
    out = json.loads(capsys.readouterr().out)
    assert list(out.keys()) == ["fit_objective", "oracle_objective", "relative_gap"]
    assert out["relative_gap"] <= 1e-4


def test_oracle_huge_lambda_gap_zero(tmp_path, capsys):
    cfg, data = _write_fixture(tmp_path, _base_config(**{"lambda": 1e6}))
    assert main(["oracle", "--config", cfg, "--data", data]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["fit_objective"] == out["oracle_objective"]
    assert out["relative_gap"] == 0.0


def test_oracle_empty_dataset_exits_2(tmp_path, capsys):
    cfg, _ = _write_fixture(tmp_path)
    empty = _write(tmp_path, "empty.csv", "x0,y0,y1\n")
    assert main(["oracle", "--config", cfg, "--data", empty]) == 2
    capsys.readouterr()


def test_predict_matches_library_evaluation(tmp_path, capsys):
    cfg, data = _write_fixture(tmp_path)
    out = str(tmp_path / "model.json")
    assert main(["fit", "--config", cfg, "--data", data, "--out", out]) == 0
    preds_path = str(tmp_path / "preds.csv")
    assert main(["predict", "--config", cfg, "--model", out,
                 "--data", data, "--out", preds_path]) == 0
    capsys.readouterr()
    lines = (tmp_path / "preds.csv").read_text().strip().splitlines()
    assert lines[0] == "y0,y1"
    got = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    model = json.loads((tmp_path / "model.json").read_text())
    feat = FeatureMap("neural", dx=1, radius=1.5, beta="one", activation="tanh")
    W = np.array([a["w"] for a in model["atoms"]])
    C = np.array([a["c"] for a in model["atoms"]])
    X = np.array([[0.1], [-0.4], [0.7]])
    expected = phi_matrix(feat, X, W) @ C
    assert got == pytest.approx(expected, abs=1e-12)


def _hyper_config():
    return {
        "phi": {"kind": "neural", "dx": 1, "radius": 1.5, "beta": "one",
                "activation": "tanh"},
        "psi": {"kind": "neural", "dx": 1, "radius": 1.2, "beta": "one",
                "activation": "sigmoid"},
        "space": {"d": 2, "norm": "l2"},
        "sampling": {"points": [[0.2], [-0.5]],
                     "functionals": [[1.0, 0.0], [0.5, -1.0]]},
        "solver": {"lambda": 0.05, "max_atoms": 10, "tol": 1e-5, "seed": 0,
                   "refit": {"max_iter": 5000, "tol": 1e-12}},
        "grids": {"w": [[0.5, 0.1], [-0.4, 0.3], [0.0, -0.6]],
                  "theta": [[0.2, -0.1], [-0.3, 0.4]]},
    }


def test_hyper_fit_writes_model(tmp_path, capsys):
    cfg = _write(tmp_path, "hcfg.json", json.dumps(_hyper_config()))
    data = _write(tmp_path, "hdata.csv", "\n".join(DATA_ROWS) + "\n")
    out = str(tmp_path / "hmodel.json")
    assert main(["hyper-fit", "--config", cfg, "--data", data, "--out", out]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["atom_count"] >= 1
    model = json.loads((tmp_path / "hmodel.json").read_text())
    assert list(model.keys()) == ["atoms", "phi", "psi"]
    assert list(model["atoms"][0].keys()) == ["a", "w", "theta", "v"]


def test_deeponet_embeds_and_round_trips(tmp_path, capsys):
    cfg = _write(tmp_path, "dcfg.json", json.dumps(
        {"phi": {"kind": "gaussian", "dx": 2, "radius": 1.0, "beta": "one",
                 "bandwidth": 0.8}}
    ))
    payload = {
        "psi": {"kind": "neural", "dx": 1, "radius": 1.5, "beta": "smooth_bump",
                "activation": "gaussian_rbf"},
        "basis": [
            {"atoms": [{"w": [0.1, 0.2], "c": [1.0, -0.5]},
                       {"w": [-0.3, 0.4], "c": [0.2, 0.7]}],
             "norm": "l1", "radius": 1.5},
        ],
        "coeffs": [[[0.8, [0.1, -0.2]], [-0.6, [0.4, 0.3]]]],
    }
    data = _write(tmp_path, "ddata.json", json.dumps(payload))
    out = str(tmp_path / "dmodel.json")
    assert main(["deeponet", "--config", cfg, "--data", data, "--out", out]) == 0
    assert json.loads(capsys.readouterr().out) == {"atom_count": 4}
    model = hyper_model_from_json_dict(
        json.loads((tmp_path / "dmodel.json").read_text()), DualPairSpec(2, "l1")
    )
    val = hyper_evaluate(model, [0.1, -0.2], [0.3])
    assert np.all(np.isfinite(val))


def test_predict_model_space_mismatch_exits_2(tmp_path, capsys):
    cfg, data = _write_fixture(tmp_path)
    out = str(tmp_path / "model.json")
    assert main(["fit", "--config", cfg, "--data", data, "--out", out]) == 0
    other = _base_config()
    other["space"]["norm"] = "l1"
    cfg2 = _write(tmp_path, "other.json", json.dumps(other))
    rc = main(["predict", "--config", cfg2, "--model", out,
               "--data", data, "--out", str(tmp_path / "p.csv")])
    assert rc == 2
    capsys.readouterr()
