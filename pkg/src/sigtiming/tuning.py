"""Splits, cross-validation, Bayesian hyperparameter search and metrics."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm, qmc
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern

from .core import DomainError
from .features import CycleSample, apply_scaler, fit_scaler, truncate_features
from .gbdt import GBDTParams, gbdt_predict, gbdt_train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dim:
    name: str
    low: float
    high: float
    log: bool = False
    integer: bool = False

    def from_unit(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.log:
            a, b = math.log10(self.low), math.log10(self.high)
            x = 10 ** (a + u * (b - a))
        else:
            x = self.low + u * (self.high - self.low)
        x = min(max(x, self.low), self.high)
        return int(round(x)) if self.integer else float(x)

    def to_unit(self, x: float) -> float:
        if self.log:
            a, b = math.log10(self.low), math.log10(self.high)
            return (math.log10(x) - a) / (b - a)
        return (x - self.low) / (self.high - self.low)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dim, ...]
    min_starts: tuple[int, int] = (2, 250)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def decode(self, u) -> dict:
        return {d.name: d.from_unit(x) for d, x in zip(self.dims, u)}

    def encode(self, params: dict) -> np.ndarray:
        return np.array([d.to_unit(params[d.name]) for d in self.dims])

    def contains(self, params: dict) -> bool:
        return all(d.low <= params[d.name] <= d.high for d in self.dims)


# bounds of the reference study's search
REFERENCE_SPACE = SearchSpace(
    (
        Dim("n_estimators", 100, 2000, integer=True),
        Dim("learning_rate", 1e-4, 1.0, log=True),
        Dim("max_depth", 2, 20, integer=True),
        Dim("gamma", 1e-5, 1.0, log=True),
        Dim("min_child_weight", 1, 10),
        Dim("subsample", 0.5, 1.0),
        Dim("colsample_by_tree", 0.5, 1.0),
        Dim("n_fourier", 2, 30, integer=True),
    ),
    min_starts=(2, 250),
)


@dataclass(frozen=True)
class Metrics:
    mae: float
    r2: float | None  # None when the targets have zero variance
    n_points: int
    fraction_within_2s: float


def compute_metrics(preds, targets, tol_s: float = 2.0) -> Metrics:
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if len(p) != len(y) or len(y) == 0:
        raise DomainError("predictions and targets must have equal, nonzero length")
    err = np.abs(p - y)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = None if ss_tot == 0 else 1.0 - float(np.sum((p - y) ** 2)) / ss_tot
    return Metrics(float(err.mean()), r2, len(y), float(np.mean(err < tol_s)))


def train_test_split(n: int, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (train, test) row indices of a uniform random split."""
    if not 0 < test_fraction < 1:
        raise DomainError("test_fraction must lie in (0, 1)")
    if n < 5:
        raise DomainError("need at least 5 points to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def kfold_indices(n: int, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold number of every row."""
    if k > n:
        raise DomainError(f"{k} folds need at least {k} points, got {n}")
    if k < 2:
        raise DomainError("need at least 2 folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    for f, idx in enumerate(np.array_split(perm, k)):
        folds[idx] = f
    return folds


def gbdt_fitter(params: GBDTParams):
    """Scaled-input GBDT; the scaler sees only the training rows."""

    def fit(X_train, y_train):
        scaler = fit_scaler(X_train)
        model = gbdt_train(apply_scaler(scaler, X_train), y_train, params)
        return lambda X: gbdt_predict(model, apply_scaler(scaler, X))

    return fit


def kfold_cv_predict(X, y, params: GBDTParams | None = None, k: int = 5, seed: int = 0, fitter=None):
    """Out-of-fold predictions and the fold number of every row.

    ``fitter(X_train, y_train) -> predict`` overrides the default scaled GBDT.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    folds = kfold_indices(len(y), k, seed)
    fit = fitter or gbdt_fitter(params or GBDTParams())
    preds = np.empty(len(y))
    for f in range(k):
        val = folds == f
        predict = fit(X[~val], y[~val])
        preds[val] = predict(X[val])
    return preds, folds


# -- Bayesian optimization ----------------------------------------------------


@dataclass
class BOResult:
    best_params: dict
    best_score: float
    history: list = field(default_factory=list)  # (params, score) in evaluation order


def expected_improvement(mu, sigma, best, xi: float = 0.0):
    sigma = np.maximum(sigma, 1e-12)
    z = (mu - best - xi) / sigma
    return (mu - best - xi) * norm.cdf(z) + sigma * norm.pdf(z)


def _maximize_acquisition(acq, dim, rng, n_restarts=64, n_screen=2048, n_steps=60):
    """Multi-start stochastic local search over the unit cube.

    Starts are the best half of a random screening cloud plus fresh random
    points; all starts move together so each step is one batched call.
    """
    cloud = rng.random((n_screen, dim))
    vals = acq(cloud)
    top = cloud[np.argsort(-vals, kind="stable")[: n_restarts // 2]]
    P = np.vstack([top, rng.random((n_restarts - len(top), dim))])
    V = acq(P)
    step = np.full(len(P), 0.1)
    for _ in range(n_steps):
        cand = np.clip(P + step[:, None] * rng.standard_normal(P.shape), 0.0, 1.0)
        cv = acq(cand)
        better = cv > V
        P[better], V[better] = cand[better], cv[better]
        step = np.where(better, np.minimum(step * 1.5, 0.5), np.maximum(step * 0.7, 1e-4))
    i = int(np.argmax(V))
    if vals.max() > V[i]:
        return cloud[int(np.argmax(vals))]
    return P[i]


def bayes_optimize(
    objective: Callable[[dict], float],
    space: SearchSpace,
    n_init: int = 10,
    n_iter: int = 50,
    seed: int = 0,
    n_restarts: int = 64,
    jitter: float = 1e-6,
) -> BOResult:
    """Maximize ``objective`` with a Matern-5/2 GP surrogate and expected improvement."""
    rng = np.random.default_rng(seed)
    dim = len(space.dims)
    U: list[np.ndarray] = []
    scores: list[float] = []
    history = []

    def evaluate(u):
        params = space.decode(u)
        try:
            s = float(objective(params))
        except (ArithmeticError, DomainError) as exc:
            log.warning("objective failed at %s: %s", params, exc)
            s = -math.inf
        if not math.isfinite(s):
            s = -math.inf
        U.append(np.asarray(u, dtype=np.float64))
        scores.append(s)
        history.append((params, s))
        log.info("eval %d score %.5g %s", len(scores), s, params)

    lhs = qmc.LatinHypercube(d=dim, seed=rng).random(n_init) if n_init > 0 else np.empty((0, dim))
    for u in lhs:
        evaluate(u)

    for _ in range(n_iter):
        Xs = np.array(U) if U else np.empty((0, dim))
        ys = np.array(scores)
        finite = np.isfinite(ys)
        if finite.sum() < 2:
            evaluate(rng.random(dim))
            continue
        floor = ys[finite].min() - (np.ptp(ys[finite]) or 1.0)
        ys_fit = np.where(finite, ys, floor)
        kernel = ConstantKernel(1.0, (1e-3, 1e3)) * Matern(
            length_scale=np.full(dim, 0.5), length_scale_bounds=(1e-3, 1e2), nu=2.5
        )
        gp = GaussianProcessRegressor(
            kernel=kernel,
            alpha=jitter,
            normalize_y=True,
            n_restarts_optimizer=2,
            random_state=int(rng.integers(2**31 - 1)),
        )
        with warnings.catch_warnings():
            # hyperparameter bound hits are routine with few points
            warnings.simplefilter("ignore", ConvergenceWarning)
            gp.fit(Xs, ys_fit)
        best = ys_fit.max()

        best_u = _maximize_acquisition(
            lambda P: expected_improvement(*gp.predict(P, return_std=True), best), dim, rng, n_restarts
        )
        if np.min(np.linalg.norm(Xs - best_u, axis=1)) < 1e-9:
            best_u = rng.random(dim)
        evaluate(best_u)

    i = int(np.argmax(scores))
    return BOResult(history[i][0], scores[i], history)


# -- multistage tuning --------------------------------------------------------


def split_params(point: dict, seed: int = 0) -> tuple[GBDTParams, int]:
    p = dict(point)
    k = int(p.pop("n_fourier"))
    return GBDTParams(**p, rng_seed=seed), k


def select_min_starts_cutoff(
    cv_errors: Sequence[tuple[int, float]],
    c_range: Sequence[int] = range(2, 251),
    threshold: float = 0.95,
    tol_s: float = 2.0,
) -> tuple[int, bool]:
    """Smallest cutoff whose surviving windows are accurate often enough.

    Returns ``(c, found)``; when no cutoff qualifies, ``(max(c_range), False)``.
    """
    if len(cv_errors) == 0:
        raise DomainError("no CV errors")
    n = np.array([e[0] for e in cv_errors])
    err = np.abs(np.array([e[1] for e in cv_errors], dtype=np.float64))
    for c in sorted(c_range):
        keep = n > c
        if not keep.any():
            continue
        if np.mean(err[keep] < tol_s) >= threshold:
            return int(c), True
    return int(max(c_range)), False


@dataclass
class TuneResult:
    params: GBDTParams
    n_fourier: int
    cutoff: int
    cutoff_found: bool
    stage1: BOResult
    stage2: BOResult
    cv_errors: list


def cv_objective(samples: Sequence[CycleSample], k_folds: int, seed: int):
    y = np.array([s.target_cycle_s for s in samples])

    def objective(point: dict) -> float:
        params, nf = split_params(point, seed)
        X = truncate_features(samples, nf)
        preds, _ = kfold_cv_predict(X, y, params, k_folds, seed)
        return -float(np.mean(np.abs(preds - y)))

    return objective


def multistage_tune(
    train: Sequence[CycleSample],
    space: SearchSpace = REFERENCE_SPACE,
    n_init: int = 10,
    n_iter: int = 50,
    k_folds: int = 5,
    seed: int = 0,
) -> TuneResult:
    """Optimize, pick the minimum-starts cutoff from CV errors, re-optimize."""
    train = list(train)
    if len(train) < k_folds:
        raise DomainError(f"{len(train)} windows cannot feed {k_folds}-fold CV")
    stage1 = bayes_optimize(cv_objective(train, k_folds, seed), space, n_init, n_iter, seed)
    params, nf = split_params(stage1.best_params, seed)
    y = np.array([s.target_cycle_s for s in train])
    preds, _ = kfold_cv_predict(truncate_features(train, nf), y, params, k_folds, seed)
    cv_errors = [(s.n_starts, float(p - s.target_cycle_s)) for s, p in zip(train, preds)]
    lo, hi = space.min_starts
    cutoff, found = select_min_starts_cutoff(cv_errors, range(lo, hi + 1))
    kept = [s for s in train if s.n_starts > cutoff]
    if len(kept) < 5 * k_folds:
        raise DomainError(
            f"only {len(kept)} training windows have more than {cutoff} starts; "
            f"need {5 * k_folds} for {k_folds}-fold CV"
        )
    stage2 = bayes_optimize(cv_objective(kept, k_folds, seed), space, n_init, n_iter, seed + 1)
    params, nf = split_params(stage2.best_params, seed)
    return TuneResult(params, nf, cutoff, found, stage1, stage2, cv_errors)
