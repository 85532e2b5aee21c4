import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

import sigtiming.tuning as tuning
from sigtiming.core import DomainError
from sigtiming.features import CycleSample
from sigtiming.gbdt import REFERENCE_OPTIMUM, GBDTParams
from sigtiming.persist import read_artifact, write_artifact
from sigtiming.tuning import (
    REFERENCE_SPACE,
    Dim,
    SearchSpace,
    bayes_optimize,
    compute_metrics,
    kfold_cv_predict,
    kfold_indices,
    multistage_tune,
    select_min_starts_cutoff,
    train_test_split,
)


def test_split():
    tr, te = train_test_split(10, 0.2, seed=1)
    assert len(te) == 2 and len(tr) == 8
    assert set(tr) | set(te) == set(range(10)) and not set(tr) & set(te)
    a, b = train_test_split(10, 0.2, seed=1)
    np.testing.assert_array_equal(a, tr)
    with pytest.raises(DomainError):
        train_test_split(10, 1.0)
    with pytest.raises(DomainError):
        train_test_split(4)


def test_kfold_partition():
    folds = kfold_indices(10, 5, seed=3)
    assert sorted(np.bincount(folds)) == [2] * 5
    with pytest.raises(DomainError):
        kfold_indices(3, 5)


def test_cv_constant_target():
    X = np.random.default_rng(0).normal(size=(20, 3))
    preds, _ = kfold_cv_predict(X, np.full(20, 90.0), GBDTParams(n_estimators=5), k=5)
    np.testing.assert_array_equal(preds, 90.0)


def test_cv_has_no_leakage_and_scales_per_fold(monkeypatch):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(23, 2))
    X[:, 0] += np.arange(23)  # row id recoverable from the first column
    y = rng.normal(size=23)
    seen = []

    def fitter(Xt, yt):
        seen.append(Xt.copy())

        def predict(Xv):
            for row in Xv:
                assert not any(np.array_equal(row, r) for r in Xt)
            return np.zeros(len(Xv))

        return predict

    preds, folds = kfold_cv_predict(X, y, k=4, fitter=fitter)
    assert len(preds) == 23 and len(seen) == 4
    assert sum(len(s) for s in seen) == 3 * 23

    sizes = []
    real = tuning.fit_scaler
    monkeypatch.setattr(tuning, "fit_scaler", lambda M: sizes.append(len(M)) or real(M))
    kfold_cv_predict(X, y, GBDTParams(n_estimators=3), k=4)
    assert sorted(sizes) == sorted(23 - np.bincount(folds))


def test_metrics_examples():
    m = compute_metrics([1, 2, 3], [1, 2, 3])
    assert (m.mae, m.r2, m.fraction_within_2s) == (0, 1, 1)
    m = compute_metrics([2, 2, 2], [1, 2, 3])
    assert m.mae == pytest.approx(2 / 3) and m.r2 == 0
    assert compute_metrics([10, 10], [10, 10]).r2 is None
    assert compute_metrics([0, 2], [2, 0]).fraction_within_2s == 0.0
    with pytest.raises(DomainError):
        compute_metrics([], [])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30), st.floats(-1e3, 1e3))
def test_r2_shift_invariance(y, c):
    y = np.array(y)
    if np.ptp(y) < 1e-3:
        return
    p = y + np.linspace(-1, 1, len(y))
    assert compute_metrics(p + c, y + c).r2 == pytest.approx(compute_metrics(p, y).r2, abs=1e-6)
    assert compute_metrics(np.full(len(y), y.mean()), y).r2 == pytest.approx(0.0, abs=1e-9)


def test_cutoff_examples():
    assert select_min_starts_cutoff([(n, 0.0) for n in range(2, 100)]) == (2, True)
    constructed = [(n, 5.0) for n in range(2, 21)] + [(n, 0.5) for n in range(21, 31)]
    assert select_min_starts_cutoff(constructed) == (20, True)
    # every c up to 249 restricts to the single 300-start point, which is wrong
    assert select_min_starts_cutoff([(300, 9.0), (3, 0.0)]) == (250, False)
    # nothing survives above 5, so those cutoffs are skipped, not accepted
    assert select_min_starts_cutoff([(5, 9.0)], c_range=range(2, 10)) == (9, False)


def _brute_cutoff(errs, lo, hi):
    for c in range(lo, hi + 1):
        kept = [abs(e) < 2.0 for n, e in errs if n > c]
        if kept and sum(kept) / len(kept) >= 0.95:
            return c, True
    return hi, False


def test_cutoff_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = rng.integers(2, 300, size=rng.integers(1, 60))
        e = rng.normal(0, 4, size=len(n)) * (n < rng.integers(2, 250))
        errs = list(zip(n.tolist(), e.tolist()))
        assert select_min_starts_cutoff(errs) == _brute_cutoff(errs, 2, 250)


def test_dims_round_trip():
    d = Dim("lr", 1e-4, 1.0, log=True)
    assert d.from_unit(0.5) == pytest.approx(1e-2)
    assert d.to_unit(d.from_unit(0.3)) == pytest.approx(0.3)
    assert Dim("n", 2, 30, integer=True).from_unit(0.5) == 16


UNIT = SearchSpace((Dim("x", 0.0, 1.0),))


def test_bo_quadratic():
    res = bayes_optimize(lambda p: -(p["x"] - 0.3) ** 2, UNIT, 10, 50, seed=0)
    assert abs(res.best_params["x"] - 0.3) <= 0.05
    assert len(res.history) == 60


def test_bo_constant_and_determinism():
    a = bayes_optimize(lambda p: 1.0, UNIT, 4, 4, seed=2)
    assert {s for _, s in a.history} == {1.0}
    assert a.best_params in [p for p, _ in a.history]
    f = lambda p: math.sin(5 * p["x"])
    assert bayes_optimize(f, UNIT, 4, 6, seed=5).history == bayes_optimize(f, UNIT, 4, 6, seed=5).history


def test_bo_non_finite_scores_recorded():
    res = bayes_optimize(lambda p: math.nan if p["x"] > 0.5 else p["x"], UNIT, 6, 6, seed=1)
    assert any(s == -math.inf for _, s in res.history)
    assert res.best_score <= 0.5 and math.isfinite(res.best_score)


def test_bo_stays_in_bounds():
    res = bayes_optimize(lambda p: -sum(v for v in p.values() if isinstance(v, float)), REFERENCE_SPACE, 5, 5, seed=3)
    for params, _ in res.history:
        assert REFERENCE_SPACE.contains(params)
        assert isinstance(params["max_depth"], int)


def test_initial_design_is_log_uniform():
    lr = []
    for seed in range(1000):
        res = bayes_optimize(lambda p: 0.0, REFERENCE_SPACE, 1, 0, seed=seed)
        lr.append(res.history[0][0]["learning_rate"])
    u = (np.log10(lr) + 4) / 4
    assert stats.kstest(u, "uniform").pvalue > 1e-3


def _samples(n, rng, starts=(200, 400)):
    out = []
    for i in range(n):
        cycle = float(rng.choice([60, 90, 120]))
        feats = tuple(1 / cycle + rng.normal(0, 1e-5, size=3))
        out.append(CycleSample(f"I{i}", ("N", "through"), i, int(rng.integers(*starts)), feats, cycle))
    return out


SMALL_SPACE = SearchSpace(
    (Dim("n_estimators", 5, 20, integer=True), Dim("learning_rate", 0.1, 1.0, log=True),
     Dim("max_depth", 2, 4, integer=True), Dim("gamma", 1e-5, 1e-2, log=True),
     Dim("min_child_weight", 1, 3), Dim("subsample", 0.8, 1.0), Dim("colsample_by_tree", 0.8, 1.0),
     Dim("n_fourier", 1, 3, integer=True)),
    min_starts=(2, 250),
)


def test_multistage_degenerate_cutoff():
    train = _samples(60, np.random.default_rng(0))
    res = multistage_tune(train, SMALL_SPACE, n_init=3, n_iter=2, k_folds=3, seed=4)
    assert (res.cutoff, res.cutoff_found) == (2, True)
    assert len(res.cv_errors) == 60
    again = multistage_tune(train, SMALL_SPACE, n_init=3, n_iter=2, k_folds=3, seed=4)
    assert (again.params, again.n_fourier, again.cutoff) == (res.params, res.n_fourier, res.cutoff)


def test_multistage_insufficient_data():
    with pytest.raises(DomainError):
        multistage_tune(_samples(4, np.random.default_rng(0)), SMALL_SPACE, 2, 1, k_folds=5)


def test_table1_optimum_round_trips(tmp_path):
    path = tmp_path / "params.json"
    write_artifact(path, "gbdt_params", REFERENCE_OPTIMUM.to_dict())
    assert GBDTParams(**read_artifact(path, "gbdt_params")) == REFERENCE_OPTIMUM
