"""Artifact persistence.

Structured artifacts are JSON documents with a ``format``/``kind``/``version``
envelope. Scalars use Python's shortest round-trip float repr; numeric arrays
are stored as whitespace-separated decimal text (shortest repr for their own
dtype) together with a sha256 of the raw bytes, so a damaged or mis-parsed
array is rejected instead of silently loaded.

Trajectories use a CSV file with ``#`` metadata lines.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import DomainError, Phase, SignalPlan, StopEvent, Trajectory
from .features import CycleSample, RedSample, ScalerParams
from .gbdt import GBDTModel, GBDTParams
from .mlp import MLPConfig, MLPModel
from .sim import GroundTruth

FORMAT = "sigtiming"
VERSION = 1
TRAJ_HEADER = ("vehicle_id", "t", "x", "y", "speed", "heading")


class ArtifactError(DomainError):
    """Missing, corrupt, mismatched or wrong-version artifact."""


# -- atomic writes ------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- arrays -------------------------------------------------------------------


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a)
    kind = a.dtype.kind
    if kind == "f":
        # numpy scalars print their shortest round-trip repr for their own width
        text = " ".join(map(str, a.reshape(-1))) if a.dtype != np.float64 else " ".join(map(repr, a.reshape(-1).tolist()))
    elif kind in "iub":
        text = " ".join(str(int(v)) for v in a.reshape(-1).tolist())
    else:
        raise TypeError(f"cannot encode dtype {a.dtype}")
    return {
        "dtype": a.dtype.str,
        "shape": list(a.shape),
        "sha256": hashlib.sha256(a.tobytes()).hexdigest(),
        "data": text,
    }


def decode_array(obj: dict) -> np.ndarray:
    try:
        dtype = np.dtype(obj["dtype"])
        shape = tuple(obj["shape"])
        text = obj["data"]
        n = int(np.prod(shape)) if shape else 1
        if dtype.kind == "f":
            parts = text.split()
            a = np.array(parts, dtype=dtype) if parts else np.zeros(0, dtype)
        elif dtype.kind == "b":
            a = np.array([int(v) for v in text.split()], dtype=dtype)
        else:
            a = np.array([int(v) for v in text.split()], dtype=np.int64).astype(dtype)
        if a.size != n:
            raise ArtifactError(f"array holds {a.size} values, header says {n}")
        a = a.reshape(shape)
        if hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest() != obj["sha256"]:
            raise ArtifactError("array checksum mismatch")
        return a
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"malformed array: {exc}") from exc


# -- envelope -----------------------------------------------------------------


def dumps(kind: str, payload: dict, config_hash: str | None = None) -> str:
    doc = {"format": FORMAT, "kind": kind, "version": VERSION, "config_hash": config_hash, "payload": payload}
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_artifact(path, kind: str, payload: dict, config_hash: str | None = None) -> None:
    atomic_write_text(path, dumps(kind, payload, config_hash))


def read_envelope(path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArtifactError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ArtifactError(f"{path} is not a {FORMAT} artifact")
    if doc.get("version") != VERSION:
        raise ArtifactError(f"{path} has version {doc.get('version')!r}, this build reads {VERSION}")
    if doc.get("kind") != kind:
        raise ArtifactError(f"{path} holds {doc.get('kind')!r}, expected {kind!r}")
    return doc


def read_artifact(path, kind: str) -> dict:
    return read_envelope(path, kind)["payload"]


def artifact_hash(path) -> str | None:
    """Config hash recorded in an artifact (structured or trajectory file)."""
    path = Path(path)
    if path.suffix == ".csv":
        return read_trajectory_meta(path).get("config_hash")
    try:
        return json.loads(path.read_text(encoding="utf-8")).get("config_hash")
    except (json.JSONDecodeError, UnicodeDecodeError, AttributeError):
        return None


# -- trajectories -------------------------------------------------------------


def trajectories_to_text(trajs: Iterable[Trajectory], meta: dict) -> str:
    buf = _io.StringIO()
    buf.write(f"# {FORMAT}-trajectories version={VERSION}\n")
    for k in sorted(meta):
        buf.write(f"# {k}={meta[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJ_HEADER)
    for tr in trajs:
        for i in range(len(tr)):
            w.writerow(
                (tr.vehicle_id, repr(float(tr.t[i])), repr(float(tr.x[i])), repr(float(tr.y[i])),
                 repr(float(tr.speed[i])), repr(float(tr.heading[i])))
            )
    return buf.getvalue()


def write_trajectories(path, trajs: Iterable[Trajectory], meta: dict) -> None:
    atomic_write_text(path, trajectories_to_text(trajs, meta))


def read_trajectory_meta(path) -> dict:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith(f"# {FORMAT}-trajectories"):
            raise ArtifactError(f"{path} is not a trajectory file")
        version = first.strip().rsplit("version=", 1)[-1]
        if version != str(VERSION):
            raise ArtifactError(f"{path} has trajectory version {version}, this build reads {VERSION}")
        for line in fh:
            if not line.startswith("#"):
                break
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
    return meta


def read_trajectories(path) -> list[Trajectory]:
    """Trajectories in file order of first appearance.

    Records are streamed and converted one vehicle run at a time, so memory
    stays close to the size of the resulting arrays.
    """
    read_trajectory_meta(path)
    chunks: dict[str, list[np.ndarray]] = {}
    cur, rows = None, []

    def flush():
        if cur is not None and rows:
            try:
                chunks.setdefault(cur, []).append(np.array(rows, dtype=np.float64))
            except ValueError as exc:
                raise ArtifactError(f"{path}: bad number in records of {cur}: {exc}") from exc

    with open(path, encoding="utf-8", newline="") as fh:
        lineno = 0
        header = None
        for line in fh:
            lineno += 1
            if line.startswith("#"):
                continue
            if header is None:
                header = tuple(line.rstrip("\r\n").split(","))
                if header != TRAJ_HEADER:
                    raise ArtifactError(f"{path}: bad header {header}")
                continue
            rec = next(csv.reader([line])) if '"' in line else line.rstrip("\r\n").split(",")
            if len(rec) != 6:
                raise ArtifactError(f"{path}: line {lineno} has {len(rec)} fields")
            if rec[0] != cur:
                flush()
                cur, rows = rec[0], []
            rows.append(rec[1:])
        flush()
        if header is None:
            raise ArtifactError(f"{path}: missing header")
    out = []
    for vid, parts in chunks.items():
        a = parts[0] if len(parts) == 1 else np.concatenate(parts)
        out.append(Trajectory(vid, a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4]))
    return out


# -- domain objects -----------------------------------------------------------


def plan_to_dict(plan: SignalPlan) -> dict:
    return {
        "intersection_id": plan.intersection_id,
        "cycle_s": plan.cycle_s,
        "plan_offset_s": plan.plan_offset_s,
        "phases": [
            {
                "phase_id": p.phase_id,
                "direction": p.direction,
                "movement": p.movement,
                "red_s": p.red_s,
                "green_s": p.green_s,
                "red_start_offset_s": p.red_start_offset_s,
            }
            for p in plan.phases
        ],
    }


def plan_from_dict(d: dict) -> SignalPlan:
    return SignalPlan(
        d["intersection_id"],
        d["cycle_s"],
        tuple(Phase(**p) for p in d["phases"]),
        d["plan_offset_s"],
    )


def ground_truth_to_dict(gt: GroundTruth) -> dict:
    # the queue log is a simulator diagnostic and is not persisted
    return {"hours": gt.hours, "plans": [plan_to_dict(gt.plans[k]) for k in sorted(gt.plans)]}


def ground_truth_from_dict(d: dict) -> GroundTruth:
    plans = {p["intersection_id"]: plan_from_dict(p) for p in d["plans"]}
    return GroundTruth(plans, int(d["hours"]))


_EVENT_FIELDS = tuple(StopEvent.__dataclass_fields__)


def events_to_dict(events: Iterable[StopEvent]) -> dict:
    return {"fields": list(_EVENT_FIELDS), "rows": [[getattr(e, f) for f in _EVENT_FIELDS] for e in events]}


def events_from_dict(d: dict) -> list[StopEvent]:
    if tuple(d["fields"]) != _EVENT_FIELDS:
        raise ArtifactError(f"event fields {d['fields']} do not match {list(_EVENT_FIELDS)}")
    return [StopEvent(*row) for row in d["rows"]]


def cycle_samples_to_dict(samples: Iterable[CycleSample]) -> dict:
    return {
        "rows": [
            {
                "intersection_id": s.intersection_id,
                "phase_key": list(s.phase_key),
                "window_hour": s.window_hour,
                "n_starts": s.n_starts,
                "features": list(s.features),
                "target_cycle_s": s.target_cycle_s,
            }
            for s in samples
        ]
    }


def cycle_samples_from_dict(d: dict) -> list[CycleSample]:
    return [
        CycleSample(
            r["intersection_id"], tuple(r["phase_key"]), r["window_hour"], r["n_starts"],
            tuple(r["features"]), r["target_cycle_s"],
        )
        for r in d["rows"]
    ]


def red_samples_to_dict(samples: Iterable[RedSample]) -> dict:
    return {
        "rows": [
            {
                "intersection_id": s.intersection_id,
                "direction": s.direction,
                "tod_bin": s.tod_bin,
                "quantiles": list(s.quantiles),
                "target_red_s": s.target_red_s,
                "repetition": s.repetition,
            }
            for s in samples
        ]
    }


def red_samples_from_dict(d: dict) -> list[RedSample]:
    return [
        RedSample(r["intersection_id"], r["direction"], r["tod_bin"], tuple(r["quantiles"]), r["target_red_s"], r["repetition"])
        for r in d["rows"]
    ]


def scaler_to_dict(s: ScalerParams) -> dict:
    return {"mean": encode_array(s.mean), "std": encode_array(s.std)}


def scaler_from_dict(d: dict) -> ScalerParams:
    return ScalerParams(decode_array(d["mean"]), decode_array(d["std"]))


_GBDT_ARRAYS = ("feature", "threshold", "left", "right", "value", "hess", "tree_offsets")


def gbdt_to_dict(m: GBDTModel) -> dict:
    out = {"base_score": m.base_score, "n_features": m.n_features, "params": m.params.to_dict()}
    out.update({k: encode_array(getattr(m, k)) for k in _GBDT_ARRAYS})
    return out


def gbdt_from_dict(d: dict) -> GBDTModel:
    return GBDTModel(
        base_score=float(d["base_score"]),
        n_features=int(d["n_features"]),
        params=GBDTParams(**d["params"]),
        **{k: decode_array(d[k]) for k in _GBDT_ARRAYS},
    )


def mlp_config_from_dict(d: dict) -> MLPConfig:
    d = dict(d)
    d["hidden"] = tuple(d["hidden"])
    return MLPConfig(**d)


def mlp_to_dict(m: MLPModel) -> dict:
    return {
        "config": m.config.to_dict(),
        "theta": encode_array(m.theta),
        "history": [list(h) for h in m.history],
        "best_epoch": m.best_epoch,
    }


def mlp_from_dict(d: dict) -> MLPModel:
    cfg = mlp_config_from_dict(d["config"])
    theta = decode_array(d["theta"])
    if theta.dtype != np.dtype(cfg.dtype):
        raise ArtifactError(f"theta dtype {theta.dtype} does not match config dtype {cfg.dtype}")
    return MLPModel(cfg, theta, [tuple(h) for h in d["history"]], int(d["best_epoch"]))


def save_gbdt(path, model: GBDTModel) -> None:
    write_artifact(path, "gbdt_model", gbdt_to_dict(model))


def load_gbdt(path) -> GBDTModel:
    return gbdt_from_dict(read_artifact(path, "gbdt_model"))


def save_mlp(path, model: MLPModel) -> None:
    write_artifact(path, "mlp_model", mlp_to_dict(model))


def load_mlp(path) -> MLPModel:
    return mlp_from_dict(read_artifact(path, "mlp_model"))
