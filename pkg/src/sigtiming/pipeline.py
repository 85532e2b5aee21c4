"""Batch pipeline: simulate -> extract -> features -> split -> tune -> train -> evaluate -> report.

Every stage writes its artifacts into the workspace stamped with a hash of
the configuration sections it depends on. Re-running a stage whose artifacts
carry the current hash is a cache hit; a differing hash is an error unless
``overwrite`` is set.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import DomainError, IntersectionGeometry, tod_bin, two_phase_plan
from .features import (
    KDE_BANDWIDTH_S,
    MAX_FOURIER,
    QUANTILE_GRID,
    REPETITIONS,
    SAMPLES_PER_GROUPING,
    apply_scaler,
    bin_accel_starts,
    build_cycle_dataset,
    build_red_dataset,
    fit_scaler,
    group_stop_events,
    truncate_features,
)
from .gbdt import GBDTParams, gbdt_predict, gbdt_train
from .mlp import MLPConfig, mlp_init, mlp_predict, mlp_train
from .persist import (
    ArtifactError,
    artifact_hash,
    cycle_samples_from_dict,
    cycle_samples_to_dict,
    events_from_dict,
    events_to_dict,
    gbdt_from_dict,
    gbdt_to_dict,
    ground_truth_from_dict,
    ground_truth_to_dict,
    mlp_from_dict,
    mlp_to_dict,
    read_artifact,
    read_trajectories,
    red_samples_from_dict,
    red_samples_to_dict,
    scaler_from_dict,
    scaler_to_dict,
    write_artifact,
    write_trajectories,
)
from .sim import SimConfig, SimIntersection, simulate
from .trips import process_trajectories
from .tuning import REFERENCE_SPACE, compute_metrics, multistage_tune, train_test_split

log = logging.getLogger(__name__)

WORKSPACE_ENV = "SIGTIMING_WORKSPACE"
STAGES = ("simulate", "extract", "features", "split", "tune", "train", "evaluate", "report")
HIST_EDGES = np.arange(-30.0, 31.0, 1.0)


class ConfigError(ValueError):
    """Invalid run configuration or a cache conflict needing ``--overwrite``."""


# -- configuration ------------------------------------------------------------

_SIM_KEYS = {
    "n_intersections", "cycle_choices", "green_fraction", "random_offsets",
    "cycles", "ew_greens", "offsets", "spacing_m", "demand_vph", "duration_s",
    "cruise_speed_mps", "max_accel_mps2", "max_decel_mps2", "saturation_headway_s",
    "stopline_setback_m", "probe_penetration", "lane_offset_m", "jam_spacing_m",
    "side_link_m", "arterial_exit_prob", "max_entry_wait_s",
}
_FEATURE_DEFAULTS = {
    "bandwidth_s": KDE_BANDWIDTH_S,
    "max_fourier": MAX_FOURIER,
    "samples_per_grouping": SAMPLES_PER_GROUPING,
    "repetitions": REPETITIONS,
}
_SPLIT_DEFAULTS = {"test_fraction": 0.2, "red_val_fraction": 0.2}
_TUNING_DEFAULTS = {"n_init": 10, "n_iter": 50, "k_folds": 5}
_MLP_KEYS = set(MLPConfig.__dataclass_fields__) - {"input_dim", "output_dim", "rng_seed"}


def derive_seed(master: int, name: str) -> int:
    """Independent 32-bit seed for a named pipeline component."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _merge(name: str, given: dict | None, defaults: dict) -> dict:
    given = dict(given or {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return {**defaults, **given}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    simulation: dict
    features: dict = field(default_factory=lambda: dict(_FEATURE_DEFAULTS))
    split: dict = field(default_factory=lambda: dict(_SPLIT_DEFAULTS))
    tuning: dict = field(default_factory=lambda: dict(_TUNING_DEFAULTS))
    mlp: dict = field(default_factory=dict)
    workspace: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(d) - {"seed", "simulation", "features", "split", "tuning", "mlp", "workspace"}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        if "simulation" not in d:
            raise ConfigError("configuration needs a 'simulation' section")
        sim = dict(d["simulation"])
        bad = set(sim) - _SIM_KEYS
        if bad:
            raise ConfigError(f"unknown simulation keys: {sorted(bad)}")
        mlp = dict(d.get("mlp") or {})
        bad = set(mlp) - _MLP_KEYS
        if bad:
            raise ConfigError(f"unknown mlp keys: {sorted(bad)}")
        if "hidden" in mlp:
            mlp["hidden"] = [int(h) for h in mlp["hidden"]]
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        cfg = cls(
            seed=seed,
            simulation=sim,
            features=_merge("features", d.get("features"), _FEATURE_DEFAULTS),
            split=_merge("split", d.get("split"), _SPLIT_DEFAULTS),
            tuning=_merge("tuning", d.get("tuning"), _TUNING_DEFAULTS),
            mlp=mlp,
            workspace=d.get("workspace"),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError as exc:
            raise ConfigError(f"configuration file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), "seed": seed, "workspace": self.workspace})

    def to_dict(self) -> dict:
        """Everything that influences results (the workspace path does not)."""
        return {
            "seed": self.seed,
            "simulation": self.simulation,
            "features": self.features,
            "split": self.split,
            "tuning": self.tuning,
            "mlp": self.mlp,
        }

    def validate(self) -> None:
        try:
            self.sim_config()
            self.mlp_config()
        except (DomainError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        f = self.features
        if not 1 <= int(f["max_fourier"]) or f["bandwidth_s"] <= 0:
            raise ConfigError("features.max_fourier must be >= 1 and bandwidth_s positive")
        if int(f["samples_per_grouping"]) < 1 or int(f["repetitions"]) < 1:
            raise ConfigError("samples_per_grouping and repetitions must be positive")
        top = next(d.high for d in REFERENCE_SPACE.dims if d.name == "n_fourier")
        if f["max_fourier"] < top:
            raise ConfigError(f"features.max_fourier must be at least the searched n_fourier bound {top}")
        for k in ("test_fraction", "red_val_fraction"):
            if not 0 < self.split[k] < 1:
                raise ConfigError(f"split.{k} must lie in (0, 1)")
        t = self.tuning
        if t["n_init"] < 1 or t["n_iter"] < 0 or t["k_folds"] < 2:
            raise ConfigError("tuning needs n_init >= 1, n_iter >= 0, k_folds >= 2")

    # stage hashes cover the sections a stage (and everything upstream) reads
    _SECTIONS = {
        "simulate": ("seed", "simulation"),
        "extract": ("seed", "simulation"),
        "features": ("seed", "simulation", "features"),
        "split": ("seed", "simulation", "features", "split"),
        "tune": ("seed", "simulation", "features", "split", "tuning"),
        "train": ("seed", "simulation", "features", "split", "tuning", "mlp"),
        "evaluate": ("seed", "simulation", "features", "split", "tuning", "mlp"),
        "report": ("seed", "simulation", "features", "split", "tuning", "mlp"),
    }

    def stage_hash(self, stage: str) -> str:
        d = self.to_dict()
        return _hash({k: d[k] for k in self._SECTIONS[stage]})

    @property
    def config_hash(self) -> str:
        return _hash(self.to_dict())

    # -- derived module configs ------------------------------------------------

    def plans(self):
        s = self.simulation
        if "cycles" in s:
            cycles = [int(c) for c in s["cycles"]]
            greens = s.get("ew_greens") or [c // 2 for c in cycles]
            offsets = s.get("offsets") or [0] * len(cycles)
        else:
            n = int(s.get("n_intersections", 0))
            if n < 1:
                raise ConfigError("simulation needs 'cycles' or a positive 'n_intersections'")
            choices = s.get("cycle_choices", [60, 75, 90, 100, 110, 120])
            lo, hi = s.get("green_fraction", [0.4, 0.6])
            rng = np.random.default_rng(derive_seed(self.seed, "plans"))
            cycles = [int(c) for c in rng.choice(choices, size=n)]
            greens = [int(round(c * rng.uniform(lo, hi))) for c in cycles]
            offsets = [int(rng.integers(0, c)) if s.get("random_offsets", True) else 0 for c in cycles]
        if not (len(cycles) == len(greens) == len(offsets)):
            raise ConfigError("cycles, ew_greens and offsets differ in length")
        return [two_phase_plan(f"I{i}", c, g, o) for i, (c, g, o) in enumerate(zip(cycles, greens, offsets))]

    def sim_config(self) -> SimConfig:
        s = self.simulation
        spacing = float(s.get("spacing_m", 400.0))
        sims = []
        for i, plan in enumerate(self.plans()):
            geom = IntersectionGeometry(plan.intersection_id, (i * spacing, 0.0))
            sims.append(SimIntersection(geom, plan, spacing))
        demand = s.get("demand_vph", 200.0)
        demand_map = {(si.geometry.intersection_id, d): demand for si in sims for d in "NESW"}
        skip = {"n_intersections", "cycle_choices", "green_fraction", "random_offsets",
                "cycles", "ew_greens", "offsets", "spacing_m", "demand_vph"}
        kwargs = {k: v for k, v in s.items() if k not in skip}
        kwargs.setdefault("duration_s", 3600.0)
        return SimConfig(tuple(sims), demand_map, rng_seed=derive_seed(self.seed, "simulate"), **kwargs)

    def mlp_config(self) -> MLPConfig:
        m = dict(self.mlp)
        if "hidden" in m:
            m["hidden"] = tuple(m["hidden"])
        return MLPConfig(input_dim=len(QUANTILE_GRID), rng_seed=derive_seed(self.seed, "mlp"), **m)


def _hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- workspace ----------------------------------------------------------------

ARTIFACTS = {
    "simulate": ("trajectories.csv", "ground_truth.json"),
    "extract": ("events.json",),
    "features": ("cycle_dataset.json", "red_dataset.json"),
    "split": ("cycle_train.json", "cycle_test.json", "red_train.json", "red_test.json"),
    "tune": ("tuning.json",),
    "train": ("cycle_model.json", "red_model.json"),
    "evaluate": ("evaluation.json",),
    "report": ("report.json",),
}
INPUTS = {
    "simulate": (),
    "extract": ("trajectories.csv", "ground_truth.json"),
    "features": ("events.json", "ground_truth.json"),
    "split": ("cycle_dataset.json", "red_dataset.json"),
    # tuning sees the training split only
    "tune": ("cycle_train.json",),
    "train": ("cycle_train.json", "red_train.json", "tuning.json"),
    "evaluate": ("cycle_model.json", "red_model.json", "cycle_train.json", "cycle_test.json",
                 "red_train.json", "red_test.json", "ground_truth.json"),
    "report": ("evaluation.json", "tuning.json"),
}
_PRODUCER = {name: stage for stage, names in ARTIFACTS.items() for name in names}


def resolve_workspace(config: RunConfig, override=None) -> Path:
    ws = override or config.workspace or os.environ.get(WORKSPACE_ENV)
    if not ws:
        raise ConfigError(f"no workspace: pass --workspace, set 'workspace' in the config or ${WORKSPACE_ENV}")
    return Path(ws)


@dataclass
class PipelineResult:
    workspace: Path
    status: dict  # stage -> "ran" | "cached"
    report: dict | None


class _Ctx:
    def __init__(self, config: RunConfig, ws: Path):
        self.cfg = config
        self.ws = ws

    def path(self, name: str) -> Path:
        return self.ws / name

    def read(self, name: str, kind: str) -> dict:
        return read_artifact(self.path(name), kind)

    def write(self, name: str, kind: str, payload: dict, stage: str) -> None:
        write_artifact(self.path(name), kind, payload, self.cfg.stage_hash(stage))


def _check_inputs(ctx: _Ctx, stage: str) -> None:
    for name in INPUTS[stage]:
        p = ctx.path(name)
        producer = _PRODUCER[name]
        if not p.exists():
            raise ArtifactError(f"stage '{stage}' needs {name}, which is missing; run stage '{producer}' first")
        if artifact_hash(p) != ctx.cfg.stage_hash(producer):
            raise ArtifactError(
                f"{name} was produced by a different configuration; rerun stage '{producer}' (with --overwrite)"
            )


def _cache_state(ctx: _Ctx, stage: str) -> str:
    """'hit', 'absent' or 'stale'."""
    want = ctx.cfg.stage_hash(stage)
    states = []
    for name in ARTIFACTS[stage]:
        p = ctx.path(name)
        if not p.exists():
            states.append("absent")
        else:
            states.append("hit" if artifact_hash(p) == want else "stale")
    if "stale" in states:
        return "stale"
    return "hit" if all(s == "hit" for s in states) else "absent"


# -- stages -------------------------------------------------------------------


def _stage_simulate(ctx: _Ctx) -> None:
    sim_cfg = ctx.cfg.sim_config()
    trajs, gt = simulate(sim_cfg)
    gt_payload = ground_truth_to_dict(gt)
    gt_payload["geometries"] = [
        {"intersection_id": si.geometry.intersection_id, "center": list(si.geometry.center),
         "approach_headings": dict(si.geometry.approach_headings)}
        for si in sim_cfg.intersections
    ]
    ctx.write("ground_truth.json", "ground_truth", gt_payload, "simulate")
    meta = {"seed": ctx.cfg.seed, "config_hash": ctx.cfg.stage_hash("simulate")}
    write_trajectories(ctx.path("trajectories.csv"), trajs, meta)
    log.info("simulated %d probe trajectories", len(trajs))


def _load_ground_truth(ctx: _Ctx):
    d = ctx.read("ground_truth.json", "ground_truth")
    geoms = [IntersectionGeometry(g["intersection_id"], tuple(g["center"]), dict(g["approach_headings"]))
             for g in d["geometries"]]
    return ground_truth_from_dict(d), geoms


def _stage_extract(ctx: _Ctx) -> None:
    gt, geoms = _load_ground_truth(ctx)
    trajs = read_trajectories(ctx.path("trajectories.csv"))
    phases = {iid: [p.key for p in plan.phases] for iid, plan in gt.plans.items()}
    events, tally = process_trajectories(trajs, geoms, phases)
    payload = events_to_dict(events)
    payload["filter_tally"] = tally
    payload["n_trajectories"] = len(trajs)
    ctx.write("events.json", "events", payload, "extract")
    log.info("extracted %d stop events from %d trajectories", len(events), len(trajs))


def _stage_features(ctx: _Ctx) -> None:
    f = ctx.cfg.features
    gt, _ = _load_ground_truth(ctx)
    events = events_from_dict(ctx.read("events.json", "events"))
    bins = bin_accel_starts(events, gt)
    cycle = build_cycle_dataset(bins, int(f["max_fourier"]), 2, float(f["bandwidth_s"]))
    red = build_red_dataset(
        group_stop_events(events), gt, int(f["samples_per_grouping"]), int(f["repetitions"]),
        derive_seed(ctx.cfg.seed, "red_resample"),
    )
    ctx.write("cycle_dataset.json", "cycle_dataset", cycle_samples_to_dict(cycle), "features")
    ctx.write("red_dataset.json", "red_dataset", red_samples_to_dict(red), "features")
    log.info("built %d cycle windows and %d red groupings", len(cycle), len(red))


def red_bin_key(s) -> tuple:
    return (s.intersection_id, s.direction, s.tod_bin)


def _stage_split(ctx: _Ctx) -> None:
    frac = ctx.cfg.split["test_fraction"]
    cycle = cycle_samples_from_dict(ctx.read("cycle_dataset.json", "cycle_dataset"))
    red = red_samples_from_dict(ctx.read("red_dataset.json", "red_dataset"))
    tr, te = train_test_split(len(cycle), frac, derive_seed(ctx.cfg.seed, "cycle_split"))
    # resamples of one bin share their source stops, so the red split is by bin
    keys = sorted({red_bin_key(s) for s in red})
    _, kte = train_test_split(len(keys), frac, derive_seed(ctx.cfg.seed, "red_split"))
    test_keys = {keys[i] for i in kte}
    ctx.write("cycle_train.json", "cycle_train", cycle_samples_to_dict([cycle[i] for i in tr]), "split")
    ctx.write("cycle_test.json", "cycle_test", cycle_samples_to_dict([cycle[i] for i in te]), "split")
    ctx.write("red_train.json", "red_train",
              red_samples_to_dict([s for s in red if red_bin_key(s) not in test_keys]), "split")
    ctx.write("red_test.json", "red_test",
              red_samples_to_dict([s for s in red if red_bin_key(s) in test_keys]), "split")


def _finite(x):
    return float(x) if np.isfinite(x) else None


def _bo_history(res) -> list:
    return [{"params": p, "score": _finite(s)} for p, s in res.history]


def _stage_tune(ctx: _Ctx) -> None:
    t = ctx.cfg.tuning
    train = cycle_samples_from_dict(ctx.read("cycle_train.json", "cycle_train"))
    res = multistage_tune(train, REFERENCE_SPACE, int(t["n_init"]), int(t["n_iter"]), int(t["k_folds"]),
                          derive_seed(ctx.cfg.seed, "tune"))
    payload = {
        "params": res.params.to_dict(),
        "n_fourier": res.n_fourier,
        "cutoff": res.cutoff,
        "cutoff_found": res.cutoff_found,
        "stage1": {"best": res.stage1.best_params, "score": _finite(res.stage1.best_score), "history": _bo_history(res.stage1)},
        "stage2": {"best": res.stage2.best_params, "score": _finite(res.stage2.best_score), "history": _bo_history(res.stage2)},
        "cv_errors": [list(e) for e in res.cv_errors],
    }
    ctx.write("tuning.json", "tuning", payload, "tune")
    log.info("tuned: n_fourier=%d cutoff=%d cv mae=%.4g", res.n_fourier, res.cutoff, -res.stage2.best_score)


def _stage_train(ctx: _Ctx) -> None:
    tune = ctx.read("tuning.json", "tuning")
    params = GBDTParams(**tune["params"])
    nf, cutoff = int(tune["n_fourier"]), int(tune["cutoff"])
    train = [s for s in cycle_samples_from_dict(ctx.read("cycle_train.json", "cycle_train")) if s.n_starts > cutoff]
    X = truncate_features(train, nf)
    y = np.array([s.target_cycle_s for s in train])
    scaler = fit_scaler(X)
    model = gbdt_train(apply_scaler(scaler, X), y, params)
    ctx.write("cycle_model.json", "cycle_model",
              {"n_fourier": nf, "cutoff": cutoff, "scaler": scaler_to_dict(scaler), "model": gbdt_to_dict(model)},
              "train")

    red = red_samples_from_dict(ctx.read("red_train.json", "red_train"))
    Xr = np.array([s.quantiles for s in red], dtype=np.float64).reshape(len(red), len(QUANTILE_GRID))
    yr = np.array([s.target_red_s for s in red])
    tri, vai = train_test_split(len(red), ctx.cfg.split["red_val_fraction"], derive_seed(ctx.cfg.seed, "red_val"))
    rscaler = fit_scaler(Xr[tri])
    y_mu, y_sd = float(yr[tri].mean()), float(yr[tri].std()) or 1.0
    cfg = ctx.cfg.mlp_config()
    net = mlp_train(
        mlp_init(cfg),
        apply_scaler(rscaler, Xr[tri]), (yr[tri] - y_mu) / y_sd,
        apply_scaler(rscaler, Xr[vai]), (yr[vai] - y_mu) / y_sd,
        log=lambda e, a, b: log.debug("epoch %d train %.5g val %.5g", e, a, b),
    )
    ctx.write("red_model.json", "red_model",
              {"scaler": scaler_to_dict(rscaler), "target_mean": y_mu, "target_std": y_sd, "model": mlp_to_dict(net)},
              "train")
    log.info("trained cycle GBDT on %d windows and red network on %d groupings (best epoch %d)",
             len(train), len(tri), net.best_epoch)


# -- evaluation ---------------------------------------------------------------


def load_cycle_predictor(payload: dict):
    nf = int(payload["n_fourier"])
    scaler = scaler_from_dict(payload["scaler"])
    model = gbdt_from_dict(payload["model"])

    def predict(samples):
        if not samples:
            return np.zeros(0)
        return gbdt_predict(model, apply_scaler(scaler, truncate_features(samples, nf)))

    return predict, int(payload["cutoff"])


def load_red_predictor(payload: dict):
    scaler = scaler_from_dict(payload["scaler"])
    net = mlp_from_dict(payload["model"])
    mu, sd = float(payload["target_mean"]), float(payload["target_std"])

    def predict(samples):
        if not samples:
            return np.zeros(0)
        X = np.array([s.quantiles for s in samples], dtype=np.float64)
        return mlp_predict(net, apply_scaler(scaler, X)) * sd + mu

    return predict


def _metrics_dict(preds, targets) -> dict | None:
    if len(targets) == 0:
        return None
    m = compute_metrics(preds, targets)
    return {"mae": m.mae, "r2": m.r2, "n_points": m.n_points, "fraction_within_2s": m.fraction_within_2s}


def residual_histogram(preds, targets) -> dict:
    r = np.asarray(preds, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    counts, _ = np.histogram(r, bins=HIST_EDGES)
    return {
        "edges_s": HIST_EDGES.tolist(),
        "counts": counts.tolist(),
        "below": int(np.sum(r < HIST_EDGES[0])),
        "above": int(np.sum(r > HIST_EDGES[-1])),
    }


def green_rows(red_test, red_pred, cycle_windows, cycle_pred, ground_truth) -> list[dict]:
    """One green estimate per red test grouping.

    The cycle estimate for a grouping is the median cycle prediction over the
    windows of the same intersection and direction whose hour falls in the
    grouping's time-of-day bin, falling back to all windows of the
    intersection.
    """
    by_bin: dict = {}
    by_iid: dict = {}
    for s, p in zip(cycle_windows, cycle_pred):
        by_bin.setdefault((s.intersection_id, s.phase_key[0], tod_bin(s.window_hour % 24)), []).append(p)
        by_iid.setdefault(s.intersection_id, []).append(p)
    rows = []
    for s, rp in zip(red_test, red_pred):
        pool = by_bin.get(red_bin_key(s)) or by_iid.get(s.intersection_id)
        if not pool:
            continue
        cp = float(np.median(pool))
        rp = float(rp)
        c_true = float(ground_truth.plans[s.intersection_id].cycle_s)
        rows.append({
            "intersection_id": s.intersection_id,
            "direction": s.direction,
            "tod_bin": s.tod_bin,
            "cycle_pred": cp,
            "red_pred": rp,
            "green_pred": cp - rp,
            "green_target": c_true - s.target_red_s,
        })
    return rows


def _stage_evaluate(ctx: _Ctx) -> None:
    gt, _ = _load_ground_truth(ctx)
    cyc_predict, cutoff = load_cycle_predictor(ctx.read("cycle_model.json", "cycle_model"))
    red_predict = load_red_predictor(ctx.read("red_model.json", "red_model"))
    out = {"cutoff": cutoff}

    sets = {}
    for part in ("train", "test"):
        windows = cycle_samples_from_dict(ctx.read(f"cycle_{part}.json", f"cycle_{part}"))
        kept = [s for s in windows if s.n_starts > cutoff]
        sets[part] = (kept, cyc_predict(kept))
    out["cycle"] = {
        "metrics": {part: _metrics_dict(p, [s.target_cycle_s for s in k]) for part, (k, p) in sets.items()},
        "n_test_windows_below_cutoff": None,
    }
    test_all = cycle_samples_from_dict(ctx.read("cycle_test.json", "cycle_test"))
    out["cycle"]["n_test_windows_below_cutoff"] = len(test_all) - len(sets["test"][0])
    kt, pt = sets["test"]
    out["cycle"]["parity"] = [[s.target_cycle_s, float(p)] for s, p in zip(kt, pt)]
    out["cycle"]["residual_histogram"] = residual_histogram(pt, [s.target_cycle_s for s in kt])

    red_sets = {}
    for part in ("train", "test"):
        rs = red_samples_from_dict(ctx.read(f"red_{part}.json", f"red_{part}"))
        red_sets[part] = (rs, red_predict(rs))
    out["red"] = {
        "metrics": {part: _metrics_dict(p, [s.target_red_s for s in r]) for part, (r, p) in red_sets.items()},
    }
    rt, rp = red_sets["test"]
    out["red"]["parity"] = [[s.target_red_s, float(p)] for s, p in zip(rt, rp)]
    out["red"]["residual_histogram"] = residual_histogram(rp, [s.target_red_s for s in rt])

    windows = sets["train"][0] + sets["test"][0]
    preds = np.concatenate([sets["train"][1], sets["test"][1]])
    rows = green_rows(rt, rp, windows, preds, gt)
    gp = [r["green_pred"] for r in rows]
    gy = [r["green_target"] for r in rows]
    out["green"] = {
        "metrics": {"test": _metrics_dict(gp, gy)},
        "parity": [[y, p] for y, p in zip(gy, gp)],
        "rows": rows,
        "residual_histogram": residual_histogram(gp, gy),
    }
    ctx.write("evaluation.json", "evaluation", out, "evaluate")


def versions() -> dict:
    out = {}
    for pkg in ("artifact", "numpy", "scipy", "scikit-learn", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _stage_report(ctx: _Ctx) -> None:
    ev = ctx.read("evaluation.json", "evaluation")
    tune = ctx.read("tuning.json", "tuning")
    report = {
        "provenance": {
            "config_hash": ctx.cfg.config_hash,
            "master_seed": ctx.cfg.seed,
            "stage_hashes": {s: ctx.cfg.stage_hash(s) for s in STAGES},
            "versions": versions(),
        },
        "tuning": {k: tune[k] for k in ("params", "n_fourier", "cutoff", "cutoff_found")},
        **{k: ev[k] for k in ("cycle", "red", "green")},
    }
    ctx.write("report.json", "report", report, "report")


_RUNNERS = {
    "simulate": _stage_simulate,
    "extract": _stage_extract,
    "features": _stage_features,
    "split": _stage_split,
    "tune": _stage_tune,
    "train": _stage_train,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def parse_stages(spec: str | Iterable[str] | None) -> tuple[str, ...]:
    """Stage names in pipeline order; ``"all"``/None selects every stage.

    Accepts a comma list and ``a-b`` ranges, e.g. ``"simulate-features,report"``.
    """
    if spec is None:
        return STAGES
    parts = spec.split(",") if isinstance(spec, str) else list(spec)
    chosen = set()
    for part in (p.strip() for p in parts):
        if not part:
            continue
        if part == "all":
            chosen.update(STAGES)
        elif "-" in part:
            a, b = part.split("-", 1)
            if a not in STAGES or b not in STAGES:
                raise ConfigError(f"unknown stage in range {part!r}")
            i, j = STAGES.index(a), STAGES.index(b)
            if i > j:
                raise ConfigError(f"stage range {part!r} runs backwards")
            chosen.update(STAGES[i : j + 1])
        elif part in STAGES:
            chosen.add(part)
        else:
            raise ConfigError(f"unknown stage {part!r}; choose from {', '.join(STAGES)}")
    if not chosen:
        raise ConfigError("no stages selected")
    return tuple(s for s in STAGES if s in chosen)


def run_pipeline(config: RunConfig, stages=None, workspace=None, overwrite: bool = False) -> PipelineResult:
    ws = resolve_workspace(config, workspace)
    ws.mkdir(parents=True, exist_ok=True)
    ctx = _Ctx(config, ws)
    status = {}
    for stage in parse_stages(stages):
        state = _cache_state(ctx, stage)
        if state == "hit" and not overwrite:
            status[stage] = "cached"
            log.info("stage %s: cache hit", stage)
            continue
        if state == "stale" and not overwrite:
            raise ConfigError(
                f"artifacts of stage '{stage}' in {ws} were built from a different configuration; "
                "pass --overwrite to replace them"
            )
        _check_inputs(ctx, stage)
        log.info("stage %s: running", stage)
        _RUNNERS[stage](ctx)
        status[stage] = "ran"
    report = None
    rp = ws / "report.json"
    if rp.exists() and artifact_hash(rp) == config.stage_hash("report"):
        report = read_artifact(rp, "report")
    return PipelineResult(ws, status, report)
