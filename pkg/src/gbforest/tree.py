"""CART regression trees on squared error, compiled with numba.

A fitted tree is a flat node table. Node ``j`` is a leaf when
``feature[j] == -1``; otherwise a point goes left when
``x[feature[j]] <= threshold[j]``. Every node stores the mean of the
responses that reached it during fitting, so ``value`` is meaningful for
internal nodes too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

__all__ = ["TreeParams", "Tree", "fit_tree", "predict_tree", "leaf_id", "default_mtry"]


def default_mtry(p):
    return max(1, p // 3)


@dataclass(frozen=True)
class TreeParams:
    """Growth controls for a single tree.

    ``mtry=None`` means ``max(1, p // 3)``.  A node with fewer than
    ``2 * min_node_size`` samples is not split, and both children of a split
    hold at least ``min_node_size`` samples.
    """

    mtry: int | None = None
    min_node_size: int = 5
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray  # int64, -1 for leaves
    threshold: np.ndarray  # float64
    left: np.ndarray  # int64
    right: np.ndarray  # int64
    value: np.ndarray  # float64, node mean
    leaf: np.ndarray  # int64 leaf id, -1 for internal nodes
    count: np.ndarray  # int64 samples reaching the node

    @property
    def n_nodes(self):
        return self.feature.shape[0]

    @property
    def n_leaves(self):
        return int((self.feature < 0).sum())

    def predict(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        return _predict_one(self.feature, self.threshold, self.left, self.right, self.value, X)

    def apply(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        nodes = _route_one(self.feature, self.threshold, self.left, self.right, X)
        return self.leaf[nodes]


@nb.njit(cache=True)
def _grow(X, r, mtry, min_node_size, max_depth, seed):
    n, p = X.shape
    np.random.seed(seed)
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    leaf = np.full(cap, -1, np.int64)
    count = np.zeros(cap, np.int64)

    idx = np.arange(n)
    # stack of (node, start, stop, depth) over a shared index buffer
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1
    n_leaves = 0

    feats = np.arange(p)
    xs = np.empty(n)
    rs = np.empty(n)
    order = np.empty(n, np.int64)

    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_depth[top]
        m = hi - lo

        s = 0.0
        rmin = np.inf
        rmax = -np.inf
        for a in range(lo, hi):
            v = r[idx[a]]
            s += v
            if v < rmin:
                rmin = v
            if v > rmax:
                rmax = v
        mean = s / m
        # keep the mean inside the hull of its inputs despite rounding
        if mean < rmin:
            mean = rmin
        if mean > rmax:
            mean = rmax
        value[node] = mean
        count[node] = m

        can_split = m >= 2 * min_node_size and (max_depth < 0 or depth < max_depth) and rmax > rmin
        best_score = -np.inf
        best_f = -1
        best_t = 0.0
        if can_split:
            # partial Fisher-Yates draw of mtry features, then scan in index order
            for a in range(mtry):
                b = a + int(np.random.random() * (p - a))
                if b >= p:
                    b = p - 1
                tmp = feats[a]
                feats[a] = feats[b]
                feats[b] = tmp
            chosen = np.sort(feats[:mtry].copy())
            parent_sse = 0.0
            for a in range(lo, hi):
                d = r[idx[a]] - mean
                parent_sse += d * d
            for c in range(mtry):
                f = chosen[c]
                for a in range(m):
                    xs[a] = X[idx[lo + a], f]
                o = np.argsort(xs[:m], kind="mergesort")
                for a in range(m):
                    order[a] = o[a]
                    rs[a] = r[idx[lo + o[a]]]
                sl = 0.0
                for a in range(m - 1):
                    sl += rs[a]
                    nl = a + 1
                    nr = m - nl
                    if nl < min_node_size:
                        continue
                    if nr < min_node_size:
                        break
                    x0 = xs[order[a]]
                    x1 = xs[order[a + 1]]
                    if x0 == x1:
                        continue
                    sr = s - sl
                    score = sl * sl / nl + sr * sr / nr
                    if best_f < 0 or score > best_score + 1e-12 * abs(best_score):
                        best_score = score
                        best_f = f
                        t = 0.5 * (x0 + x1)
                        if t >= x1:
                            t = x0
                        best_t = t
            # child SSE = sum r^2 - score; require a strict impurity decrease
            if best_f >= 0:
                gain = best_score - s * s / m
                if not (gain > 1e-12 * max(parent_sse, 1e-300)):
                    best_f = -1

        if best_f < 0:
            leaf[node] = n_leaves
            n_leaves += 1
            continue

        # partition idx[lo:hi] by the chosen split
        w = lo
        for a in range(lo, hi):
            if X[idx[a], best_f] <= best_t:
                tmp = idx[w]
                idx[w] = idx[a]
                idx[a] = tmp
                w += 1
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is numbered first
        st_node[top] = rnode
        st_lo[top] = w
        st_hi[top] = hi
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lnode
        st_lo[top] = lo
        st_hi[top] = w
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], leaf[:n_nodes], count[:n_nodes])


@nb.njit(cache=True)
def _route_one(feature, threshold, left, right, X):
    m = X.shape[0]
    out = np.empty(m, np.int64)
    for i in range(m):
        j = 0
        while feature[j] >= 0:
            if X[i, feature[j]] <= threshold[j]:
                j = left[j]
            else:
                j = right[j]
        out[i] = j
    return out


@nb.njit(cache=True)
def _predict_one(feature, threshold, left, right, value, X):
    m = X.shape[0]
    out = np.empty(m)
    for i in range(m):
        j = 0
        while feature[j] >= 0:
            if X[i, feature[j]] <= threshold[j]:
                j = left[j]
            else:
                j = right[j]
        out[i] = value[j]
    return out


def fit_tree(X, r, params=TreeParams()):
    """Grow a regression tree on ``(X, r)``.

    Thresholds sit at midpoints between consecutive distinct feature values;
    ties in the split score go to the lowest feature index, then the lowest
    threshold.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    r = np.ascontiguousarray(r, dtype=np.float64).reshape(-1)
    if X.ndim != 2:
        raise ValueError("X must be 2-dimensional")
    n, p = X.shape
    if n == 0:
        raise ValueError("cannot fit a tree on an empty subsample")
    if r.shape[0] != n:
        raise ValueError("X and r have inconsistent lengths")
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(X))):
        raise ValueError("non-finite training data")
    mtry = default_mtry(p) if params.mtry is None else params.mtry
    if mtry > p:
        raise ValueError(f"mtry={mtry} exceeds the number of features {p}")
    max_depth = -1 if params.max_depth is None else params.max_depth
    arrays = _grow(X, r, mtry, params.min_node_size, max_depth, np.uint32(params.seed & 0xFFFFFFFF))
    return Tree(*arrays)


def predict_tree(tree, x):
    """Prediction of ``tree`` at one point ``x`` (or rows of a matrix)."""
    out = tree.predict(x)
    return float(out[0]) if np.ndim(x) == 1 else out


def leaf_id(tree, x):
    out = tree.apply(x)
    return int(out[0]) if np.ndim(x) == 1 else out
