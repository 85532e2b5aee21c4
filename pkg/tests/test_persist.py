import json

import numpy as np
import pytest

from sigtiming.core import StopEvent, Trajectory, two_phase_plan
from sigtiming.features import CycleSample, RedSample, fit_scaler
from sigtiming.gbdt import GBDTParams, gbdt_train
from sigtiming.mlp import MLPConfig, mlp_init, mlp_train
from sigtiming.persist import (
    ArtifactError,
    artifact_hash,
    cycle_samples_from_dict,
    cycle_samples_to_dict,
    decode_array,
    encode_array,
    events_from_dict,
    events_to_dict,
    ground_truth_from_dict,
    ground_truth_to_dict,
    load_gbdt,
    load_mlp,
    read_artifact,
    read_trajectories,
    read_trajectory_meta,
    red_samples_from_dict,
    red_samples_to_dict,
    save_gbdt,
    save_mlp,
    scaler_from_dict,
    scaler_to_dict,
    write_artifact,
    write_trajectories,
)
from sigtiming.sim import GroundTruth


@pytest.mark.parametrize("dtype", [np.float64, np.float32, np.int64, np.bool_])
def test_array_round_trip(dtype):
    a = (np.random.default_rng(0).normal(size=(7, 3)) * 1e3).astype(dtype)
    b = decode_array(json.loads(json.dumps(encode_array(a))))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_array_checksum_detects_damage():
    enc = encode_array(np.array([0.1, 0.2, 0.3]))
    enc["data"] = enc["data"].replace("0.2", "0.25")
    with pytest.raises(ArtifactError, match="checksum"):
        decode_array(enc)


def test_gbdt_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(300, 5)), rng.normal(size=300)
    m = gbdt_train(X, y, GBDTParams(n_estimators=40, max_depth=6, rng_seed=3))
    save_gbdt(tmp_path / "m.json", m)
    back = load_gbdt(tmp_path / "m.json")
    Z = rng.normal(size=(1000, 5))
    assert back.predict(Z).tobytes() == m.predict(Z).tobytes()
    assert back.params == m.params


def test_mlp_round_trip(tmp_path):
    cfg = MLPConfig(input_dim=6, hidden=(16, 8), max_epochs=5)
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(40, 6)), rng.normal(size=40)
    m = mlp_train(mlp_init(cfg), X[:30], y[:30], X[30:], y[30:])
    save_mlp(tmp_path / "mlp.json", m)
    back = load_mlp(tmp_path / "mlp.json")
    assert back.config == m.config and back.best_epoch == m.best_epoch
    assert back.predict(X).tobytes() == m.predict(X).tobytes()
    assert [tuple(h) for h in back.history] == [tuple(h) for h in m.history]


def test_truncated_and_foreign_files(tmp_path):
    rng = np.random.default_rng(0)
    m = gbdt_train(rng.normal(size=(50, 2)), rng.normal(size=50), GBDTParams(n_estimators=5))
    path = tmp_path / "m.json"
    save_gbdt(path, m)
    text = path.read_text()
    for cut in (10, len(text) // 2, len(text) - 3):
        path.write_text(text[:cut])
        with pytest.raises(ArtifactError):
            load_gbdt(path)
    path.write_text("[1, 2]")
    with pytest.raises(ArtifactError):
        load_gbdt(path)
    with pytest.raises(ArtifactError, match="missing"):
        load_gbdt(tmp_path / "nope.json")


def test_version_and_kind_mismatch(tmp_path):
    path = tmp_path / "a.json"
    write_artifact(path, "thing", {"v": 1}, config_hash="abc")
    assert read_artifact(path, "thing") == {"v": 1}
    assert artifact_hash(path) == "abc"
    with pytest.raises(ArtifactError, match="expected"):
        read_artifact(path, "other")
    doc = json.loads(path.read_text())
    doc["version"] = 2
    path.write_text(json.dumps(doc))
    with pytest.raises(ArtifactError, match="version"):
        read_artifact(path, "thing")


def test_no_temp_files_left(tmp_path):
    write_artifact(tmp_path / "a.json", "thing", {})
    assert [p.name for p in tmp_path.iterdir()] == ["a.json"]


def test_trajectory_file(tmp_path):
    trajs = [
        Trajectory("a", [0, 1, 2], [0.1, 1 / 3, 2.0], [0, 0, 0], [1, 2, 0], [90, 90, 359.5]),
        Trajectory("b,2", [5, 6], [1e-17, 7], [3, 3], [0, 1], [0, 0]),
    ]
    path = tmp_path / "t.csv"
    write_trajectories(path, trajs, {"seed": 3, "config_hash": "h"})
    assert read_trajectories(path) == trajs
    assert read_trajectory_meta(path) == {"seed": "3", "config_hash": "h"}
    assert artifact_hash(path) == "h"
    write_trajectories(path, [], {})
    assert path.read_text().splitlines()[-1] == "vehicle_id,t,x,y,speed,heading"
    assert read_trajectories(path) == []
    path.write_text(path.read_text() + "a,0,1\n")
    with pytest.raises(ArtifactError, match="fields"):
        read_trajectories(path)


def test_domain_converters_round_trip():
    gt = GroundTruth({"I1": two_phase_plan("I1", 95.5, 50, 3)}, hours=4)
    assert ground_truth_from_dict(json.loads(json.dumps(ground_truth_to_dict(gt)))) == gt
    evs = [StopEvent("I1", "v", "N", "left", 10.25, 3.0, 13.25, 0, "AM")]
    assert events_from_dict(json.loads(json.dumps(events_to_dict(evs)))) == evs
    cs = [CycleSample("I1", ("N", "through"), 2, 30, (0.01, 1 / 3), 100.0)]
    assert cycle_samples_from_dict(json.loads(json.dumps(cycle_samples_to_dict(cs)))) == cs
    rs = [RedSample("I1", "E", "PM", tuple(np.linspace(0, 1, 100).tolist()), 44.5, 3)]
    assert red_samples_from_dict(json.loads(json.dumps(red_samples_to_dict(rs)))) == rs
    sc = fit_scaler(np.random.default_rng(0).normal(size=(10, 3)))
    back = scaler_from_dict(json.loads(json.dumps(scaler_to_dict(sc))))
    assert back.mean.tobytes() == sc.mean.tobytes() and back.std.tobytes() == sc.std.tobytes()
