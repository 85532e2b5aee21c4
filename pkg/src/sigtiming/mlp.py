"""Dense Leaky-ReLU regression network trained with Adam and early stopping.

All parameters live in one flat vector; per-layer weights and biases are
views into it, which keeps the optimizer update to a handful of array ops.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .core import DomainError

HIDDEN_SIZES = (550, 1000, 900, 800, 700, 600, 500, 400, 300, 200, 100)


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int = 100
    hidden: tuple[int, ...] = HIDDEN_SIZES
    output_dim: int = 1
    leaky_relu_alpha: float = 0.01
    minibatch: int = 32
    patience: int = 50
    max_epochs: int = 2000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.minibatch < 1 or self.patience < 1 or self.max_epochs < 1:
            raise DomainError("minibatch, patience and max_epochs must be positive")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def to_dict(self) -> dict:
        return asdict(self)


def _layout(sizes):
    """Offsets of each (weight, bias) block in the flat parameter vector."""
    out = []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = (pos, pos + fan_out * fan_in, (fan_out, fan_in))
        pos = w[1]
        b = (pos, pos + fan_out)
        pos = b[1]
        out.append((w, b))
    return out, pos


@dataclass
class MLPModel:
    config: MLPConfig
    theta: np.ndarray
    history: list = field(default_factory=list)  # (epoch, train_mse, val_mse)
    best_epoch: int = -1

    def __post_init__(self):
        layout, total = _layout(self.config.sizes)
        if self.theta.shape != (total,):
            raise DomainError(f"parameter vector has {self.theta.shape}, expected ({total},)")
        self._layout = layout

    @property
    def weights(self) -> list[np.ndarray]:
        return [self.theta[a:b].reshape(shape) for (a, b, shape), _ in self._layout]

    @property
    def biases(self) -> list[np.ndarray]:
        return [self.theta[a:b] for _, (a, b) in self._layout]

    def predict(self, X) -> np.ndarray:
        return mlp_predict(self, X)


def mlp_init(config: MLPConfig) -> MLPModel:
    """Uniform weights in +-1/sqrt(fan_in), zero biases."""
    layout, total = _layout(config.sizes)
    theta = np.zeros(total, dtype=np.float64)
    rng = np.random.default_rng(config.rng_seed)
    for (a, b, (fan_out, fan_in)), _ in layout:
        bound = 1.0 / np.sqrt(fan_in)
        theta[a:b] = rng.uniform(-bound, bound, size=fan_out * fan_in)
    return MLPModel(config, theta.astype(config.dtype))


def _leaky(z, alpha):
    return np.where(z > 0, z, alpha * z)


def _forward(model: MLPModel, X):
    """Pre-activations and activations for every layer."""
    alpha = model.config.leaky_relu_alpha
    W, B = model.weights, model.biases
    acts = [X]
    pre = []
    a = X
    last = len(W) - 1
    for i, (w, b) in enumerate(zip(W, B)):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == last else _leaky(z, alpha)
        acts.append(a)
    return pre, acts


def mlp_predict(model: MLPModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=model.theta.dtype)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.config.input_dim:
        raise DomainError(f"expected {model.config.input_dim} inputs, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise DomainError("non-finite network input")
    return _forward(model, X)[1][-1][:, 0].astype(np.float64)


def mlp_forward(model: MLPModel, x) -> float:
    x = np.asarray(x)
    if x.ndim != 1:
        raise DomainError("mlp_forward takes a single input vector")
    return float(mlp_predict(model, x)[0])


def mlp_loss_and_grad(model: MLPModel, X, y) -> tuple[float, np.ndarray]:
    """Mean squared error over the batch and its gradient w.r.t. ``theta``."""
    dt = model.theta.dtype
    X = np.asarray(X, dtype=dt)
    y = np.asarray(y, dtype=dt).reshape(-1)
    alpha = model.config.leaky_relu_alpha
    pre, acts = _forward(model, X)
    resid = acts[-1][:, 0] - y
    n = len(y)
    loss = float(np.mean(resid.astype(np.float64) ** 2))
    grad = np.empty_like(model.theta)
    delta = (2.0 / n) * resid[:, None]
    W = model.weights
    for i in range(len(W) - 1, -1, -1):
        (wa, wb, shape), (ba, bb) = model._layout[i]
        grad[wa:wb] = (delta.T @ acts[i]).reshape(-1)
        grad[ba:bb] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ W[i]
            delta *= np.where(pre[i - 1] > 0, 1.0, alpha).astype(dt)
    return loss, grad


def _activation_pattern(model, X):
    return [z > 0 for z in _forward(model, X)[0][:-1]]


def finite_difference(model: MLPModel, X, y, index: int, h0: float = 1e-2, min_h: float = 1e-12) -> float:
    """Central difference of the batch MSE along one parameter.

    With Leaky-ReLU hidden units and an identity output the loss is piecewise
    quadratic in any single parameter, so the central difference is exact
    while no unit changes sign. The step starts at ``h0`` and is halved until
    the activation pattern at both ends matches the one at the base point.
    The loss difference is formed from output differences to avoid
    cancellation between two large losses.
    """
    X = np.asarray(X, dtype=model.theta.dtype)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    theta = model.theta
    old = theta[index]
    base = _activation_pattern(model, X)
    h = h0 * max(1.0, abs(float(old)))
    while True:
        theta[index] = old + h
        yp = mlp_predict(model, X)
        same = all(np.array_equal(a, b) for a, b in zip(_activation_pattern(model, X), base))
        theta[index] = old - h
        ym = mlp_predict(model, X)
        same = same and all(np.array_equal(a, b) for a, b in zip(_activation_pattern(model, X), base))
        theta[index] = old
        if same or h < min_h:
            break
        h *= 0.5
    rp, rm = yp - y, ym - y
    return float(np.mean((yp - ym) * (rp + rm)) / (2 * h))


@numba.njit(cache=True)
def _adam_step(theta, g, m, v, b1, b2, corr, eps):
    for i in range(theta.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        theta[i] -= corr * mi / (np.sqrt(vi) + eps)


def _mse(model, X, y) -> float:
    return float(np.mean((mlp_predict(model, X) - np.asarray(y, dtype=np.float64)) ** 2))


def mlp_train(model: MLPModel, X_train, y_train, X_val, y_val, config: MLPConfig | None = None, log=None) -> MLPModel:
    """Minibatch Adam on squared error; stops after ``patience`` epochs
    without a validation improvement and returns the best-validation weights."""
    cfg = config or model.config
    if len(X_val) == 0:
        raise DomainError("early stopping needs a validation set")
    if len(X_train) == 0:
        raise DomainError("empty training set")
    dt = model.theta.dtype
    X_train = np.asarray(X_train, dtype=dt)
    y_train = np.asarray(y_train, dtype=dt)
    theta = model.theta.copy()
    work = MLPModel(model.config, theta)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    rng = np.random.default_rng(cfg.rng_seed + 1)
    b1, b2, lr, eps = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.adam_eps
    step = 0
    best_val = np.inf
    best_theta = theta.copy()
    best_epoch = -1
    history = []
    wait = 0
    n = len(X_train)
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.minibatch):
            idx = perm[start : start + cfg.minibatch]
            loss, g = mlp_loss_and_grad(work, X_train[idx], y_train[idx])
            total += loss * len(idx)
            step += 1
            corr = lr * np.sqrt(1 - b2**step) / (1 - b1**step)
            _adam_step(theta, g, m, v, b1, b2, corr, eps)
        val = _mse(work, X_val, y_val)
        history.append((epoch, total / n, val))
        if log is not None:
            log(epoch, total / n, val)
        if val < best_val:
            best_val = val
            best_theta = theta.copy()
            best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    return MLPModel(model.config, best_theta, history, best_epoch)
