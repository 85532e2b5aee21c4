import json

import pytest

from sigtiming import cli
from sigtiming.acceptance import small_config
from sigtiming.persist import ArtifactError
from sigtiming.pipeline import ConfigError, RunConfig, derive_seed, parse_stages, run_pipeline


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    ws = tmp_path_factory.mktemp("small")
    cfg = small_config()
    res = run_pipeline(cfg, "all", ws)
    return cfg, ws, res


def test_parse_stages():
    assert parse_stages("simulate-features") == ("simulate", "extract", "features")
    assert parse_stages("report,tune") == ("tune", "report")
    assert len(parse_stages("all")) == 8
    with pytest.raises(ConfigError):
        parse_stages("simulate,fly")


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": 1, "bogus": 2})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"simulation": {"probe_penetration": 1.5}})
    assert derive_seed(3, "a") == derive_seed(3, "a") != derive_seed(3, "b")


def test_stage_hashes_are_scoped():
    a = small_config()
    b = RunConfig.from_dict({**a.to_dict(), "mlp": {"hidden": [8], "max_epochs": 3}})
    assert a.stage_hash("tune") == b.stage_hash("tune")
    assert a.stage_hash("train") != b.stage_hash("train")


def test_zero_demand_writes_header_only(tmp_path):
    cfg = RunConfig.from_dict({"simulation": {"n_intersections": 1, "demand_vph": 0, "duration_s": 600}})
    res = run_pipeline(cfg, "simulate", tmp_path)
    assert res.status == {"simulate": "ran"}
    lines = (tmp_path / "trajectories.csv").read_text().splitlines()
    assert lines[0].startswith("# sigtiming-trajectories")
    assert [ln for ln in lines if not ln.startswith("#")] == ["vehicle_id,t,x,y,speed,heading"]


def test_missing_input_names_stage(tmp_path):
    with pytest.raises(ArtifactError, match="simulate"):
        run_pipeline(small_config(), "extract", tmp_path)


def test_no_workspace(monkeypatch):
    monkeypatch.delenv("SIGTIMING_WORKSPACE", raising=False)
    with pytest.raises(ConfigError):
        run_pipeline(small_config(), "simulate")


def test_report_contents(small_run):
    _, _, res = small_run
    rep = res.report
    assert rep["provenance"]["master_seed"] == 5
    assert rep["provenance"]["config_hash"] == small_config().config_hash
    for row in rep["green"]["rows"]:
        assert row["green_pred"] + row["red_pred"] - row["cycle_pred"] == 0
    for model in ("cycle", "red", "green"):
        assert len(rep[model]["parity"]) == rep[model]["metrics"]["test"]["n_points"]
        hist = rep[model]["residual_histogram"]
        assert sum(hist["counts"]) + hist["below"] + hist["above"] == len(rep[model]["parity"])


def test_second_run_is_all_cache_hits(small_run):
    cfg, ws, res = small_run
    before = (ws / "report.json").read_bytes()
    again = run_pipeline(cfg, "all", ws)
    assert set(again.status.values()) == {"cached"}
    assert (ws / "report.json").read_bytes() == before


def test_evaluate_only_reproduces_report(small_run):
    cfg, ws, _ = small_run
    before = (ws / "report.json").read_bytes()
    (ws / "evaluation.json").unlink()
    (ws / "report.json").unlink()
    res = run_pipeline(cfg, "evaluate,report", ws)
    assert res.status == {"evaluate": "ran", "report": "ran"}
    assert (ws / "report.json").read_bytes() == before


def test_stale_artifacts_need_overwrite(small_run, tmp_path):
    cfg, ws, _ = small_run
    other = cfg.with_seed(6)
    run_pipeline(cfg, "simulate", tmp_path)
    with pytest.raises(ConfigError, match="overwrite"):
        run_pipeline(other, "simulate", tmp_path)
    assert run_pipeline(other, "simulate", tmp_path, overwrite=True).status == {"simulate": "ran"}
    # downstream stages now see inputs from another configuration
    with pytest.raises(ArtifactError):
        run_pipeline(cfg, "extract", tmp_path)


def _write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def test_cli_exit_codes(tmp_path, capsys):
    good = _write_config(tmp_path / "run.json", {"simulation": {"n_intersections": 1, "demand_vph": 0, "duration_s": 600}})
    ws = str(tmp_path / "ws")
    assert cli.main(["run", "--config", good, "--stages", "simulate", "--workspace", ws]) == 0
    assert json.loads(capsys.readouterr().out.splitlines()[0]) == {"simulate": "ran"}
    bad = _write_config(tmp_path / "bad.json", {"nope": 1})
    assert cli.main(["run", "--config", bad, "--workspace", ws]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "absent.json"), "--workspace", ws]) == 2
    assert cli.main(["run", "--config", good, "--stages", "tune", "--workspace", str(tmp_path / "empty")]) == 3
    assert cli.main(["run", "--config", good, "--seed", "9", "--stages", "simulate", "--workspace", ws]) == 2
    assert cli.main(["verify", "--only", "42"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["run"])
    assert exc.value.code == 2


def test_cli_verify(monkeypatch, capsys):
    assert cli.main(["verify", "--only", "4,6"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out

    import sigtiming.acceptance as acc

    failing = acc.CriterionResult(4, "cutoff", False, "forced")
    monkeypatch.setattr(acc, "run_acceptance", lambda numbers, workspace: [failing])
    assert cli.main(["verify", "--only", "4"]) == 4
