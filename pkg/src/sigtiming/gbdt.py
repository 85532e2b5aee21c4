"""Second-order gradient-boosted regression trees with exact greedy splits.

Squared-error loss, so every hessian is 1 and ``min_child_weight`` acts as a
(fractional) minimum leaf size. Trees are stored flat: one set of node arrays
for the whole forest plus per-tree offsets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .core import DomainError

LEAF = -1


@dataclass(frozen=True)
class GBDTParams:
    n_estimators: int = 1050
    learning_rate: float = 1e-2
    max_depth: int = 11
    gamma: float = 10**-2.5
    min_child_weight: float = 5.5
    subsample: float = 0.75
    colsample_by_tree: float = 0.75
    reg_lambda: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 0 or self.max_depth < 0:
            raise DomainError("n_estimators and max_depth must be non-negative")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.gamma < 0 or self.min_child_weight < 0 or self.reg_lambda < 0:
            raise DomainError("gamma, min_child_weight and reg_lambda must be non-negative")
        if not (0 < self.subsample <= 1 and 0 < self.colsample_by_tree <= 1):
            raise DomainError("subsample and colsample_by_tree must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


# published optimum of the reference study
REFERENCE_OPTIMUM = GBDTParams(
    n_estimators=2000,
    learning_rate=10**0.0,
    max_depth=17,
    gamma=10**-5.0,
    min_child_weight=1.499,
    subsample=1.0,
    colsample_by_tree=1.0,
)


@dataclass
class GBDTModel:
    base_score: float
    n_features: int
    params: GBDTParams
    feature: np.ndarray  # int64, LEAF for leaves
    threshold: np.ndarray
    left: np.ndarray  # tree-local child index
    right: np.ndarray
    value: np.ndarray
    hess: np.ndarray  # training hessian sum reaching the node
    tree_offsets: np.ndarray = field(default_factory=lambda: np.zeros(1, np.int64))

    @property
    def n_trees(self) -> int:
        return len(self.tree_offsets) - 1

    def tree(self, i: int) -> dict:
        a, b = self.tree_offsets[i], self.tree_offsets[i + 1]
        return {
            "feature": self.feature[a:b],
            "threshold": self.threshold[a:b],
            "left": self.left[a:b],
            "right": self.right[a:b],
            "value": self.value[a:b],
            "hess": self.hess[a:b],
        }

    def tree_depth(self, i: int) -> int:
        t = self.tree(i)
        depth = {0: 0}
        for node in range(len(t["feature"])):
            if t["feature"][node] != LEAF:
                depth[int(t["left"][node])] = depth[node] + 1
                depth[int(t["right"][node])] = depth[node] + 1
        return max(depth.values())

    def predict(self, X) -> np.ndarray:
        return gbdt_predict(self, X)


# -- numba kernels ------------------------------------------------------------


@numba.njit(cache=True)
def _build_tree(X, g, h, order, feats, max_depth, lam, gamma, mcw):
    """Grow one tree on the rows in ``order``.

    ``order[f]`` lists the sampled rows sorted by ``X[:, feats[f]]``; every
    node owns the same contiguous slice of each list.
    """
    nf, m = order.shape
    cap = 2 * m + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    hess = np.zeros(cap)
    go_left = np.zeros(X.shape[0], np.bool_)
    buf = np.empty(m, np.int64)

    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    sp = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = m
    st_depth[0] = 0
    sp = 1
    n_nodes = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        lo = st_lo[sp]
        hi = st_hi[sp]
        depth = st_depth[sp]
        G = 0.0
        H = 0.0
        for p in range(lo, hi):
            r = order[0, p]
            G += g[r]
            H += h[r]
        hess[node] = H
        value[node] = -G / (H + lam) if H + lam > 0 else 0.0

        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        if depth < max_depth and hi - lo >= 2:
            parent = G * G / (H + lam) if H + lam > 0 else 0.0
            for fi in range(nf):
                col = feats[fi]
                GL = 0.0
                HL = 0.0
                for p in range(lo, hi - 1):
                    r = order[fi, p]
                    GL += g[r]
                    HL += h[r]
                    xa = X[r, col]
                    xb = X[order[fi, p + 1], col]
                    if xb <= xa:
                        continue
                    HR = H - HL
                    if HL < mcw or HR < mcw:
                        continue
                    GR = G - GL
                    dl = HL + lam
                    dr = HR + lam
                    if dl <= 0 or dr <= 0:
                        continue
                    gain = 0.5 * (GL * GL / dl + GR * GR / dr - parent) - gamma
                    if gain > best_gain:
                        best_gain = gain
                        best_f = col
                        best_thr = xa + 0.5 * (xb - xa)
                        if best_thr <= xa or best_thr > xb:
                            best_thr = xb
        if best_f < 0:
            continue

        n_left = 0
        for p in range(lo, hi):
            r = order[0, p]
            flag = X[r, best_f] < best_thr
            go_left[r] = flag
            if flag:
                n_left += 1
        for fi in range(nf):
            a = 0
            bpos = n_left
            for p in range(lo, hi):
                r = order[fi, p]
                if go_left[r]:
                    buf[a] = r
                    a += 1
                else:
                    buf[bpos] = r
                    bpos += 1
            for q in range(hi - lo):
                order[fi, lo + q] = buf[q]

        li = n_nodes
        ri = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = li
        right[node] = ri
        st_node[sp] = ri
        st_lo[sp] = lo + n_left
        st_hi[sp] = hi
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = li
        st_lo[sp] = lo
        st_hi[sp] = lo + n_left
        st_depth[sp] = depth + 1
        sp += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        hess[:n_nodes].copy(),
    )


@numba.njit(cache=True)
def _tree_predict(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] != -1:
            if X[i, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@numba.njit(cache=True)
def _forest_predict(X, base, eta, feature, threshold, left, right, value, offsets):
    n = X.shape[0]
    out = np.full(n, base)
    for t in range(len(offsets) - 1):
        a = offsets[t]
        for i in range(n):
            node = 0
            while feature[a + node] != -1:
                if X[i, feature[a + node]] < threshold[a + node]:
                    node = left[a + node]
                else:
                    node = right[a + node]
            out[i] += eta * value[a + node]
    return out


@numba.njit(cache=True)
def _subset_order(full_order, feats, keep):
    """Rows of ``full_order[feats[f]]`` that are flagged in ``keep``."""
    m = 0
    for r in range(keep.shape[0]):
        if keep[r]:
            m += 1
    out = np.empty((len(feats), m), np.int64)
    for fi in range(len(feats)):
        k = 0
        row = full_order[feats[fi]]
        for p in range(row.shape[0]):
            if keep[row[p]]:
                out[fi, k] = row[p]
                k += 1
    return out


# -- public API ---------------------------------------------------------------


def gbdt_train(X, y, params: GBDTParams, callback=None) -> GBDTModel:
    """Fit a boosted ensemble; ``callback(round, train_pred)`` runs after each tree."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("empty training matrix")
    if X.shape[0] != len(y):
        raise DomainError("X and y differ in length")
    if not np.all(np.isfinite(y)):
        raise DomainError("non-finite target")
    if not np.all(np.isfinite(X)):
        raise DomainError("non-finite feature value")
    n, d = X.shape
    p = params
    base = float(y.mean())
    pred = np.full(n, base)
    h = np.ones(n)
    full_order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))
    rng = np.random.default_rng(p.rng_seed)
    n_cols = max(1, int(round(p.colsample_by_tree * d)))
    all_rows = np.ones(n, np.bool_)
    parts = {k: [] for k in ("feature", "threshold", "left", "right", "value", "hess")}
    offsets = [0]
    for rnd in range(p.n_estimators):
        if p.subsample < 1.0:
            keep = rng.random(n) < p.subsample
            if not keep.any():
                keep[rng.integers(n)] = True
        else:
            keep = all_rows
        if n_cols < d:
            feats = np.sort(rng.choice(d, size=n_cols, replace=False)).astype(np.int64)
        else:
            feats = np.arange(d, dtype=np.int64)
        g = pred - y
        order = _subset_order(full_order, feats, keep)
        tree = _build_tree(X, g, h, order, feats, p.max_depth, p.reg_lambda, p.gamma, p.min_child_weight)
        for k, arr in zip(parts, tree):
            parts[k].append(arr)
        offsets.append(offsets[-1] + len(tree[0]))
        pred += p.learning_rate * _tree_predict(X, tree[0], tree[1], tree[2], tree[3], tree[4])
        if callback is not None:
            callback(rnd, pred)

    def cat(k, dtype):
        return np.concatenate(parts[k]).astype(dtype) if parts[k] else np.zeros(0, dtype)

    return GBDTModel(
        base_score=base,
        n_features=d,
        params=p,
        feature=cat("feature", np.int64),
        threshold=cat("threshold", np.float64),
        left=cat("left", np.int64),
        right=cat("right", np.int64),
        value=cat("value", np.float64),
        hess=cat("hess", np.float64),
        tree_offsets=np.asarray(offsets, np.int64),
    )


def gbdt_predict(model: GBDTModel, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.size == 0:
        return np.zeros(0)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise DomainError(f"expected {model.n_features} features, got shape {X.shape}")
    return _forest_predict(
        X,
        model.base_score,
        model.params.learning_rate,
        model.feature,
        model.threshold,
        model.left,
        model.right,
        model.value,
        model.tree_offsets,
    )
