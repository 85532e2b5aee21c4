import numpy as np
import pytest

from sigtiming.core import DomainError
from sigtiming.mlp import (
    HIDDEN_SIZES,
    MLPConfig,
    MLPModel,
    finite_difference,
    mlp_forward,
    mlp_init,
    mlp_loss_and_grad,
    mlp_predict,
    mlp_train,
)

SMALL = MLPConfig(input_dim=8, hidden=(32, 16), max_epochs=400, patience=30, minibatch=16)


def test_default_architecture():
    cfg = MLPConfig()
    assert cfg.hidden == HIDDEN_SIZES and len(cfg.hidden) == 11
    m = mlp_init(cfg)
    prev = 100
    for W, b in zip(m.weights, m.biases):
        assert W.shape == (W.shape[0], prev)
        assert np.all(np.abs(W) <= 1 / np.sqrt(prev))
        assert not b.any()
        prev = W.shape[0]
    assert prev == 1


def test_init_is_seeded():
    a, b = mlp_init(SMALL), mlp_init(SMALL)
    np.testing.assert_array_equal(a.theta, b.theta)
    c = mlp_init(MLPConfig(input_dim=8, hidden=(32, 16), rng_seed=1))
    assert not np.array_equal(a.theta, c.theta)


def test_zero_parameters_give_zero():
    m = mlp_init(SMALL)
    m.theta[:] = 0
    assert mlp_forward(m, np.arange(8.0)) == 0.0


def test_leaky_slope_on_single_path():
    cfg = MLPConfig(input_dim=1, hidden=(1,), dtype="float64")
    m = MLPModel(cfg, np.array([1.0, 0.0, 1.0, 0.0]))  # w1, b1, w2, b2
    assert mlp_forward(m, np.array([-1.0])) == pytest.approx(-0.01)
    assert mlp_forward(m, np.array([2.0])) == pytest.approx(2.0)


def test_positive_homogeneity_without_biases():
    cfg = MLPConfig(input_dim=8, hidden=(16, 16), dtype="float64")
    m = mlp_init(cfg)
    x = np.random.default_rng(0).normal(size=(5, 8))
    np.testing.assert_allclose(mlp_predict(m, 3.5 * x), 3.5 * mlp_predict(m, x), rtol=1e-12)


def test_forward_rejects_non_finite():
    m = mlp_init(SMALL)
    with pytest.raises(DomainError):
        mlp_forward(m, np.full(8, np.nan))


def test_gradient_matches_finite_differences():
    cfg = MLPConfig(input_dim=6, hidden=(12, 10, 8), dtype="float64", rng_seed=4)
    m = mlp_init(cfg)
    rng = np.random.default_rng(4)
    m.theta[:] += rng.normal(0, 0.05, size=m.theta.shape)
    X, y = rng.normal(size=(8, 6)), rng.normal(size=8)
    _, g = mlp_loss_and_grad(m, X, y)
    for (wa, wb, _), (ba, bb) in m._layout:
        for idx in rng.choice(np.arange(wa, bb), size=min(10, bb - wa), replace=False):
            fd = finite_difference(m, X, y, int(idx))
            assert abs(g[idx] - fd) <= 1e-4 * max(abs(fd), 1e-8)


def test_constant_target():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(1000, 8))
    y = np.full(1000, 3.0)
    cfg = MLPConfig(input_dim=8, hidden=(32, 16))
    m = mlp_train(mlp_init(cfg), X[:800], y[:800], X[800:], y[800:])
    assert np.mean((m.predict(X) - 3.0) ** 2) < 1e-3


def test_linear_target_and_restore_best():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(250, 8))
    y = X @ rng.normal(size=8)
    m = mlp_train(mlp_init(SMALL), X[:200], y[:200], X[200:], y[200:])
    val = np.mean((m.predict(X[200:]) - y[200:]) ** 2)
    assert val < 1e-2 * np.var(y[200:])
    vals = [h[2] for h in m.history]
    assert m.history[m.best_epoch][2] == min(vals)
    assert val == pytest.approx(min(vals), rel=1e-6)


def test_training_is_deterministic():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(60, 8)), rng.normal(size=60)
    cfg = MLPConfig(input_dim=8, hidden=(16,), max_epochs=20, patience=5)
    a = mlp_train(mlp_init(cfg), X[:50], y[:50], X[50:], y[50:])
    b = mlp_train(mlp_init(cfg), X[:50], y[:50], X[50:], y[50:])
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.history == b.history


def test_training_validation():
    m = mlp_init(SMALL)
    with pytest.raises(DomainError):
        mlp_train(m, np.zeros((4, 8)), np.zeros(4), np.zeros((0, 8)), np.zeros(0))
    with pytest.raises(DomainError):
        MLPConfig(patience=0)
