"""Executable acceptance checks shared by ``sigtiming verify`` and the test suite."""

from __future__ import annotations

import itertools
import math
import tempfile
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from .features import QUANTILE_GRID, empirical_quantile, kde_density, top_fourier_frequencies
from .gbdt import GBDTParams, REFERENCE_OPTIMUM, gbdt_train
from .mlp import MLPConfig, finite_difference, mlp_init, mlp_loss_and_grad
from .persist import read_artifact
from .pipeline import RunConfig, run_pipeline
from .tuning import Dim, SearchSpace, bayes_optimize, select_min_starts_cutoff

CYCLE_CHOICES = (60, 75, 90, 100, 110, 120)
# vph per approach by hour of day: night, AM peak, midday, PM peak, evening
DEMAND_PROFILE = [90] * 6 + [200] * 4 + [150] * 5 + [200] * 4 + [120] * 5


def corpus_config(seed: int = 11) -> RunConfig:
    """8 intersections, 24 h, penetration 0.5, reduced tuning budget."""
    return RunConfig.from_dict({
        "seed": seed,
        "simulation": {
            "n_intersections": 8,
            "cycle_choices": list(CYCLE_CHOICES),
            "green_fraction": [0.4, 0.6],
            "demand_vph": DEMAND_PROFILE,
            "duration_s": 24 * 3600,
            "probe_penetration": 0.5,
        },
        "tuning": {"n_init": 5, "n_iter": 15, "k_folds": 5},
    })


def small_config(seed: int = 5) -> RunConfig:
    """A few-minute end-to-end run for the determinism check."""
    return RunConfig.from_dict({
        "seed": seed,
        "simulation": {"n_intersections": 4, "demand_vph": 220, "duration_s": 4 * 3600, "probe_penetration": 1.0},
        "features": {"repetitions": 10},
        "tuning": {"n_init": 3, "n_iter": 2, "k_folds": 3},
        "mlp": {"hidden": [64, 32], "max_epochs": 40, "patience": 5},
    })


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:>2} {self.name}: {self.detail}"


class Context:
    """Lazily runs and caches the shared corpus pipeline."""

    def __init__(self, workspace: Path | None = None, log: Callable[[str], None] | None = None):
        self._tmp = None
        if workspace is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="sigtiming-accept-")
            workspace = Path(self._tmp.name)
        self.root = Path(workspace)
        self.log = log or (lambda msg: None)
        self._corpus = None

    def corpus(self):
        """(report, stage seconds, workspace) of the acceptance corpus run."""
        if self._corpus is None:
            cfg = corpus_config()
            ws = self.root / "corpus"
            timings = {}
            for stage in ("simulate", "extract", "features", "split", "tune", "train", "evaluate", "report"):
                t0 = time.perf_counter()
                res = run_pipeline(cfg, [stage], ws)
                timings[stage] = (time.perf_counter() - t0, res.status[stage])
                self.log(f"corpus stage {stage}: {res.status[stage]} in {timings[stage][0]:.1f} s")
            self._corpus = (res.report, timings, ws)
        return self._corpus

    def close(self):
        if self._tmp is not None:
            self._tmp.cleanup()


def _runtime_note(timings, stages, limit_s):
    secs = sum(timings[s][0] for s in stages)
    cached = any(timings[s][1] == "cached" for s in stages)
    ok = cached or secs <= limit_s
    return ok, f"{secs:.0f} s{' (cache hits)' if cached else ''} vs {limit_s:.0f} s budget"


def _fmt_metrics(m) -> str:
    r2 = "undefined" if m["r2"] is None else f"{m['r2']:.4f}"
    return f"MAE {m['mae']:.3f} s, R2 {r2}, n={m['n_points']}"


# -- criteria -----------------------------------------------------------------


def c1_cycle_end_to_end(ctx: Context) -> tuple[bool, str]:
    report, timings, ws = ctx.corpus()
    rows = read_artifact(ws / "cycle_dataset.json", "cycle_dataset")["rows"]
    dense = float(np.mean([r["n_starts"] > 20 for r in rows]))
    m = report["cycle"]["metrics"]["test"]
    # the cycle model is ready once training finishes; the network shares that stage
    t_ok, t_note = _runtime_note(timings, ("simulate", "extract", "features", "split", "tune", "train"), 15 * 60)
    ok = dense >= 0.6 and m["mae"] <= 2.0 and m["r2"] is not None and m["r2"] >= 0.90 and t_ok
    return ok, f"{_fmt_metrics(m)}; windows with >20 starts {dense:.1%}; cutoff {report['tuning']['cutoff']}; {t_note}"


def c2_red_end_to_end(ctx: Context) -> tuple[bool, str]:
    report, timings, _ = ctx.corpus()
    m = report["red"]["metrics"]["test"]
    t_ok, t_note = _runtime_note(timings, tuple(timings), 30 * 60)
    ok = m["mae"] <= 10.0 and m["r2"] is not None and m["r2"] >= 0.70 and t_ok
    return ok, f"{_fmt_metrics(m)}; {t_note}"


def c3_green_identity(ctx: Context) -> tuple[bool, str]:
    report, _, _ = ctx.corpus()
    rows = report["green"]["rows"]
    exact = all(r["green_pred"] == r["cycle_pred"] - r["red_pred"] for r in rows)
    worst = max((abs(r["green_pred"] + r["red_pred"] - r["cycle_pred"]) / max(abs(r["cycle_pred"]), 1.0) for r in rows),
                default=0.0)
    n_red = len(report["red"]["parity"])
    ok = exact and worst <= 4 * np.finfo(float).eps and len(rows) == n_red > 0
    return ok, f"{len(rows)} rows (red test rows {n_red}); max |g+r-c|/c = {worst:.2e}"


def _cutoff_brute(cv_errors, c_range, threshold=0.95, tol=2.0):
    for c in c_range:
        sel = [abs(e) for n, e in cv_errors if n > c]
        if sel and sum(e < tol for e in sel) / len(sel) >= threshold:
            return c, True
    return max(c_range), False


def c4_cutoff(ctx: Context) -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    # one 5 s miss at every n <= 20 and ten 0.5 s hits above: at c = 19 the lone
    # n = 20 miss leaves 10/11 < 0.95, at c = 20 every survivor is accurate
    constructed = [(n, 5.0) for n in range(2, 21)] + [(n, 0.5) for n in range(21, 31)]
    c, found = select_min_starts_cutoff(constructed)
    agree = 0
    for _ in range(100):
        m = int(rng.integers(1, 60))
        n = rng.integers(2, 300, size=m)
        e = np.where(rng.random(m) < 0.3, rng.uniform(0, 6, m), rng.uniform(0, 2.5, m))
        errs = list(zip(n.tolist(), e.tolist()))
        agree += select_min_starts_cutoff(errs) == _cutoff_brute(errs, range(2, 251))
    return c == 20 and found and agree == 100, f"constructed -> c={c}; brute-force agreement {agree}/100"


def _eq1_oracle(stops, k):
    """Set-builder evaluation with exact rationals; alpha = k/100."""
    n = len(stops)
    if k == 100:
        return max(stops)
    alpha = Fraction(k, 100)
    cand = [s for s in stops if Fraction(sum(1 for t in stops if t <= s), n) < alpha]
    return max(cand) if cand else min(stops)


def c5_eq1_exhaustive(ctx: Context) -> tuple[bool, str]:
    checked = 0
    bad = None
    for size in range(1, 13):
        for ms in itertools.combinations_with_replacement(range(1, 7), size):
            for k, alpha in enumerate(QUANTILE_GRID, start=1):
                checked += 1
                if empirical_quantile(ms, float(alpha)) != _eq1_oracle(ms, k):
                    bad = bad or (ms, float(alpha))
    return bad is None, f"{checked} (multiset, alpha) pairs" + ("" if bad is None else f"; first mismatch {bad}")


def c6_fft_periodicity(ctx: Context) -> tuple[bool, str]:
    worst = 0.0
    for P in CYCLE_CHOICES:
        starts = np.arange(0, 3600, P, dtype=float)
        f1 = top_fourier_frequencies(kde_density(starts), 1)[0]
        worst = max(worst, abs(f1 - 1.0 / P))
    return worst <= 1.3e-4, f"max |f1 - 1/P| = {worst:.3e} Hz over P in {list(CYCLE_CHOICES)}"


def c7_kde_mass(ctx: Context) -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    sums = []
    for _ in range(100):
        starts = rng.uniform(50, 3550, size=int(rng.integers(2, 300)))
        sums.append(math.fsum(kde_density(starts)))
    lo, hi = min(sums), max(sums)
    # the exact sum is 1 minus ~1e-16 of edge mass, so rounding alone can land
    # a few ulps above 1; that much is accepted as evaluation error
    eps = np.finfo(float).eps
    return 0.97 <= lo and hi <= 1.0 + 4 * eps, f"Riemann sums in [{lo:.6f}, 1 + {(hi - 1) / eps:.0f} eps]"


def c8_gradient_check(ctx: Context) -> tuple[bool, str]:
    worst = 0.0
    for seed in range(5):
        cfg = MLPConfig(rng_seed=seed, dtype="float64")
        model = mlp_init(cfg)
        rng = np.random.default_rng(100 + seed)
        # nonzero biases so bias gradients are exercised away from the init
        for b in model.biases:
            b[:] = rng.uniform(-0.05, 0.05, size=b.shape)
        X = rng.standard_normal((8, cfg.input_dim))
        y = rng.standard_normal(8) * 3
        _, grad = mlp_loss_and_grad(model, X, y)
        for (wa, wb, _), (ba, bb) in model._layout:
            idx = np.concatenate([rng.integers(wa, wb, size=8), rng.integers(ba, bb, size=2)])
            for i in idx:
                fd = finite_difference(model, X, y, int(i))
                a = float(grad[i])
                denom = max(abs(a), abs(fd))
                rel = 0.0 if denom < 1e-12 else abs(a - fd) / denom
                worst = max(worst, rel)
    n_layers = len(MLPConfig().sizes) - 1
    return worst <= 1e-4, f"max relative error {worst:.2e} over 5 seeds x {n_layers} layers x 10 coordinates"


def _route_counts(X, tree):
    counts = np.zeros(len(tree["feature"]), dtype=np.int64)
    depth = np.zeros(len(tree["feature"]), dtype=np.int64)
    for x in X:
        node = 0
        counts[0] += 1
        while tree["feature"][node] != -1:
            child = tree["left"][node] if x[tree["feature"][node]] < tree["threshold"][node] else tree["right"][node]
            depth[child] = depth[node] + 1
            node = child
            counts[node] += 1
    return counts, depth


def c9_gbdt_contracts(ctx: Context) -> tuple[bool, str]:
    rng = np.random.default_rng(9)
    X = rng.standard_normal((300, 6))
    y = np.sin(X[:, 0]) * 5 + X[:, 1] ** 2 + rng.normal(0, 0.3, 300)
    mses = []
    p = GBDTParams(n_estimators=60, learning_rate=0.3, max_depth=5, gamma=0.0, min_child_weight=3.0,
                   subsample=1.0, colsample_by_tree=1.0)
    model = gbdt_train(X, y, p, callback=lambda r, pred: mses.append(float(np.mean((pred - y) ** 2))))
    monotone = all(b <= a + 1e-12 for a, b in zip(mses, mses[1:]))
    depth_ok = True
    leaf_ok = True
    for i in range(model.n_trees):
        tr = model.tree(i)
        counts, depth = _route_counts(X, tr)
        leaves = tr["feature"] == -1
        depth_ok &= model.tree_depth(i) <= p.max_depth and int(depth.max()) <= p.max_depth
        leaf_ok &= bool(np.all(counts[leaves] >= p.min_child_weight)) and np.array_equal(counts, tr["hess"])

    x50 = (np.random.default_rng(50).permutation(50) / 7.0)[:, None]
    y50 = np.random.default_rng(51).normal(0, 10, 50)
    # the reference depth, rounds and step; leaves may hold single points (mcw 1)
    interp = replace(REFERENCE_OPTIMUM, reg_lambda=0.0, min_child_weight=1.0)
    mae = float(np.mean(np.abs(gbdt_train(x50, y50, interp).predict(x50) - y50)))
    ok = monotone and depth_ok and leaf_ok and mae < 1e-6
    return ok, (f"monotone MSE over {len(mses)} rounds: {monotone}; depth bound: {depth_ok}; "
                f"leaf hessian bound: {leaf_ok}; 50-point interpolation MAE {mae:.2e}")


def c10_determinism(ctx: Context) -> tuple[bool, str]:
    from threadpoolctl import threadpool_limits

    cfg = small_config()
    with threadpool_limits(limits=1):
        a = run_pipeline(cfg, None, ctx.root / "det_a")
    with threadpool_limits(limits=2):
        b = run_pipeline(cfg, None, ctx.root / "det_b")
    again = run_pipeline(cfg, None, ctx.root / "det_a")
    ra = (ctx.root / "det_a" / "report.json").read_bytes()
    rb = (ctx.root / "det_b" / "report.json").read_bytes()
    all_cached = all(s == "cached" for s in again.status.values())
    ok = ra == rb and all_cached and (ctx.root / "det_a" / "report.json").read_bytes() == ra
    return ok, f"reports byte-identical across 1 and 2 BLAS threads: {ra == rb}; rerun all cache hits: {all_cached}"


def c11_bo_sanity(ctx: Context) -> tuple[bool, str]:
    space = SearchSpace((Dim("x", 0.0, 1.0),))
    hits = 0
    errs = []
    for seed in range(10):
        res = bayes_optimize(lambda p: -(p["x"] - 0.3) ** 2, space, 10, 50, seed)
        err = abs(res.best_params["x"] - 0.3)
        errs.append(err)
        hits += err <= 0.05
    return hits >= 9, f"{hits}/10 seeds within 0.05 (max error {max(errs):.2e})"


CRITERIA = {
    1: ("end-to-end cycle length", c1_cycle_end_to_end),
    2: ("end-to-end red times", c2_red_end_to_end),
    3: ("green identity", c3_green_identity),
    4: ("cutoff procedure", c4_cutoff),
    5: ("quantile oracle (exhaustive)", c5_eq1_exhaustive),
    6: ("FFT periodicity", c6_fft_periodicity),
    7: ("KDE normalization", c7_kde_mass),
    8: ("MLP gradient check", c8_gradient_check),
    9: ("GBDT contracts", c9_gbdt_contracts),
    10: ("determinism", c10_determinism),
    11: ("Bayesian optimizer sanity", c11_bo_sanity),
}


def run_criterion(number: int, ctx: Context) -> CriterionResult:
    name, fn = CRITERIA[number]
    t0 = time.perf_counter()
    try:
        ok, detail = fn(ctx)
    except Exception as exc:  # a crash is a failed criterion, reported as such
        ok, detail = False, f"error: {type(exc).__name__}: {exc}"
    return CriterionResult(number, name, bool(ok), detail, time.perf_counter() - t0)


def run_acceptance(numbers=None, workspace=None, log=print) -> list[CriterionResult]:
    ctx = Context(workspace, log)
    try:
        out = []
        for n in numbers or sorted(CRITERIA):
            r = run_criterion(n, ctx)
            log(r.line())
            out.append(r)
        return out
    finally:
        ctx.close()


def format_table(results) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'#':>2}  {'criterion':<{w}}  result  seconds"]
    for r in results:
        lines.append(f"{r.number:>2}  {r.name:<{w}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.1f}")
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} passed")
    return "\n".join(lines)
