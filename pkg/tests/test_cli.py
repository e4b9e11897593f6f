import csv
import json

import pytest
import yaml

from hyblpv.cli import EXIT_CONFIG, EXIT_OK, main
from hyblpv.config import ConfigError, from_dict
from hyblpv.lpv import AffineMatrices
from hyblpv.serialize import write_plant
from conftest import toy_terms


def toy_config(tmp_path, **over):
    write_plant(tmp_path / "toy.plant", AffineMatrices(toy_terms()))
    cfg = {
        "version": 1,
        "plant": {"kind": "file", "path": "toy.plant"},
        "partition": {"intervals": [[0.0, 0.6], [0.4, 1.0]], "points_per_subset": 5},
        "rates": [1.0],
        "simulation": {
            "profile": {"sinusoid": {"offset": 0.5, "amplitude": 0.4, "omega": 1.0}},
            "horizon": 4.0, "step": 1e-3, "disturbance": [1.0, 0.0], "record_every": 10,
        },
        "output": "out",
    }
    cfg.update(over)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def synthesized(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    path = toy_config(tmp)
    code = main(["synth", str(path)])
    return tmp, path, code


@pytest.mark.parametrize("raw,msg", [
    ({"version": 1, "rates": [1.0], "colour": "red"}, "colour"),
    ({"version": 1, "rates": []}, "rates"),
    ({"version": 2, "rates": [1.0]}, "version"),
    ({"version": 1, "rates": [1.0], "solver": {"margn": 0.1}}, "margn"),
    ({"version": 1, "rates": [1.0, 1.0]}, "duplicate"),
    ({"version": 1, "rates": [1.0], "plant": {"kind": "file"}}, "path"),
    ({"version": 1, "rates": [1.0], "partition": {"intervals": [[1.0, 0.0]]}}, "empty"),
])
def test_config_errors(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        from_dict(raw)


def test_config_error_exit_code(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("version: 1\nrates: [1.0]\nunknown: 3\n")
    assert main(["synth", str(p)]) == EXIT_CONFIG
    p.write_text("version: 1\nrates: [1.0\n")
    assert main(["synth", str(p)]) == EXIT_CONFIG


def test_synth_outputs(synthesized):
    tmp, _, code = synthesized
    assert code == EXIT_OK
    out = tmp / "out"
    rows = list(csv.reader(open(out / "gammas.csv")))
    assert rows[0] == ["rate_bound", "region_1", "region_2", "status"]
    assert rows[1][0] == "1.0" and rows[1][-1] == "ok"
    bundle = json.loads((out / "bundle.json").read_text())
    assert bundle["designs"][0]["solution"] == "rate-1/hybrid.solution"
    assert (out / "rate-1" / "hybrid.controller").exists()


def test_validate_simulate_report(synthesized, capsys):
    tmp, path, _ = synthesized
    assert main(["validate", str(path), "--density", "2"]) == EXIT_OK
    rep = json.loads((tmp / "out" / "validation.json").read_text())
    assert rep["passed"] and "dense_grid" in rep["results"][0]
    assert main(["simulate", str(path)]) == EXIT_OK
    summ = json.loads((tmp / "out" / "simulation" / "summary.json").read_text())
    assert summ["event_count"] >= 1
    assert summ["lyapunov_events_ok"]
    assert summ["empirical_l2_ratio"] <= summ["certified_max_gamma"]
    assert main(["report", str(path)]) == EXIT_OK
    assert "switching events" in capsys.readouterr().out
    assert (tmp / "out" / "plots" / "sigma.csv").exists()


def test_synth_is_idempotent(synthesized, tmp_path):
    tmp, _, _ = synthesized
    path = toy_config(tmp_path)
    assert main(["synth", str(path)]) == EXIT_OK
    for name in ("gammas.csv", "rate-1/hybrid.solution", "rate-1/hybrid.controller"):
        assert (tmp_path / "out" / name).read_bytes() == (tmp / "out" / name).read_bytes()


def test_hash_mismatch_refused(synthesized, tmp_path):
    tmp, _, _ = synthesized
    other = toy_config(tmp_path, output=str(tmp / "out"), weights=[1.0, 1.0])
    assert main(["validate", str(other)]) == EXIT_CONFIG


def test_missing_artifacts(tmp_path):
    path = toy_config(tmp_path)
    assert main(["validate", str(path)]) == EXIT_CONFIG
    assert main(["simulate", str(path)]) == EXIT_CONFIG
    assert main(["report", str(path)]) == EXIT_CONFIG


def test_profile_outside_region_refused(synthesized, tmp_path):
    tmp, _, _ = synthesized
    bad = toy_config(tmp_path, output=str(tmp / "out"))
    raw = yaml.safe_load(bad.read_text())
    raw["simulation"]["profile"] = {"sinusoid": {"offset": 0.5, "amplitude": 0.8, "omega": 1.0}}
    bad.write_text(yaml.safe_dump(raw))
    # hash differs too, so either check refuses it
    assert main(["simulate", str(bad)]) == EXIT_CONFIG
