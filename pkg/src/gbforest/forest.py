"""Subsampled regression forests with inclusion bookkeeping.

Each tree is grown on a size-``k`` subsample drawn without replacement with
inclusion tilted towards larger sampling weights (weighted-key order
sampling: key ``u ** (1 / w)``, keep the ``k`` largest).  The ``B x n``
inclusion matrix is kept so that infinitesimal-jackknife directional
derivatives ``n * cov_b(N[b, i], T_b(x))`` can be computed at any point.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .tree import TreeParams, fit_tree

__all__ = [
    "ForestParams",
    "ForestModel",
    "fit_forest",
    "weighted_subsample",
    "tree_seed_sequence",
    "SubsampledForest",
]


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    sample_fraction: float = 0.4
    tree: TreeParams = field(default_factory=TreeParams)
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")

    def subsample_size(self, n):
        return int(math.ceil(self.sample_fraction * n - 1e-9))


def tree_seed_sequence(seed, *key):
    """Seed sequence for one tree, keyed by position rather than draw order."""
    return np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))


def weighted_subsample(w, k, rng):
    """Indices (sorted) of a size-``k`` subsample, inclusion increasing in ``w``."""
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    if k > n:
        raise ValueError(f"subsample size {k} exceeds n={n}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("sampling weights must be finite and non-negative")
    if not np.any(w > 0):
        raise ValueError("all sampling weights are zero")
    if k == n:
        return np.arange(n)
    u = 1.0 - rng.random(n)  # (0, 1]
    with np.errstate(divide="ignore"):
        keys = np.log(u) / w  # log of u ** (1/w); zero weight -> -inf
    top = np.argsort(-keys, kind="stable")[:k]
    return np.sort(top)


@nb.njit(cache=True)
def _predict_packed(feature, threshold, left, right, value, roots, X):
    B = roots.shape[0]
    m = X.shape[0]
    out = np.empty((B, m))
    for b in range(B):
        r = roots[b]
        for i in range(m):
            j = r
            while feature[j] >= 0:
                if X[i, feature[j]] <= threshold[j]:
                    j = left[j]
                else:
                    j = right[j]
            out[b, i] = value[j]
    return out


@nb.njit(cache=True)
def _apply_packed(feature, threshold, left, right, leaf, roots, X):
    B = roots.shape[0]
    m = X.shape[0]
    out = np.empty((B, m), np.int64)
    for b in range(B):
        r = roots[b]
        for i in range(m):
            j = r
            while feature[j] >= 0:
                if X[i, feature[j]] <= threshold[j]:
                    j = left[j]
                else:
                    j = right[j]
            out[b, i] = leaf[j]
    return out


def _as_points(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


class ForestModel:
    """A fitted subsampled forest.

    Attributes
    ----------
    trees : tuple of Tree
    inclusion : ndarray of shape (B, n), uint8
        ``inclusion[b, i] == 1`` iff training point ``i`` was in tree ``b``'s subsample.
    k : int
        Subsample size.
    X_train : ndarray of shape (n, p)
    """

    def __init__(self, trees, inclusion, k, X_train):
        self.trees = tuple(trees)
        self.inclusion = np.ascontiguousarray(inclusion, dtype=np.uint8)
        self.k = int(k)
        self.X_train = np.ascontiguousarray(X_train, dtype=np.float64)
        if self.inclusion.shape != (len(self.trees), self.X_train.shape[0]):
            raise ValueError("inclusion matrix shape does not match trees and training data")
        sizes = np.array([t.n_nodes for t in self.trees], dtype=np.int64)
        roots = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        shift = np.repeat(roots, sizes)

        def cat(name):
            return np.concatenate([getattr(t, name) for t in self.trees])

        feature = cat("feature")
        child_l, child_r = cat("left"), cat("right")
        internal = feature >= 0
        self._packed = (
            feature,
            cat("threshold"),
            np.where(internal, child_l + shift, -1),
            np.where(internal, child_r + shift, -1),
            cat("value"),
            cat("leaf"),
            roots,
        )
        for a in self._packed:
            a.setflags(write=False)
        self.inclusion.setflags(write=False)
        self.X_train.setflags(write=False)

    @property
    def n_trees(self):
        return len(self.trees)

    @property
    def n(self):
        return self.X_train.shape[0]

    def per_tree_predictions(self, X):
        """Tree predictions, shape ``(B, m)`` (or ``(B,)`` for a single point)."""
        X, single = _as_points(X)
        f, t, lft, rgt, v, _, roots = self._packed
        out = _predict_packed(f, t, lft, rgt, v, roots, X)
        return out[:, 0] if single else out

    def predict(self, X):
        T = self.per_tree_predictions(X)
        # a mean stays within the range of what it averages
        return np.clip(T.mean(axis=0), T.min(axis=0), T.max(axis=0))

    def apply(self, X):
        """Leaf ids, shape ``(B, m)`` (or ``(B,)``)."""
        X, single = _as_points(X)
        f, t, lft, rgt, _, leaf, roots = self._packed
        out = _apply_packed(f, t, lft, rgt, leaf, roots, X)
        return out[:, 0] if single else out

    def _require_pairs(self):
        if self.n_trees < 2:
            raise ValueError("at least 2 trees are needed for covariances across trees")

    def ij_derivatives(self, X, T=None):
        """``n * cov_b(N[b, i], T_b(x))``, shape ``(n, m)`` (or ``(n,)``)."""
        self._require_pairs()
        single = np.ndim(X) == 1
        if T is None:
            T = self.per_tree_predictions(X)
        T = T.reshape(self.n_trees, -1)
        B = self.n_trees
        Nc = self.inclusion - self.inclusion.mean(axis=0)
        Tc = T - T.mean(axis=0)
        U = self.n * (Nc.T @ Tc) / (B - 1)
        return U[:, 0] if single else U

    def tree_variance(self, X, T=None):
        """Sample variance (divisor ``B - 1``) of the tree predictions."""
        self._require_pairs()
        if T is None:
            T = self.per_tree_predictions(X)
        return np.var(T, axis=0, ddof=1)

    def oob_predictions(self):
        """Out-of-bag prediction at each training point.

        Points that are in every subsample fall back to the all-tree mean.
        """
        T = self.per_tree_predictions(self.X_train)
        out_bag = 1 - self.inclusion
        n_oob = out_bag.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            oob = (T * out_bag).sum(axis=0) / n_oob
        full = np.clip(T.mean(axis=0), T.min(axis=0), T.max(axis=0))
        return np.where(n_oob > 0, oob, full)

    def proximity_scores(self, x):
        """Proximity of ``x`` to every training point.

        Returns ``(scores, never_in_bag)``; training points that were never
        in a subsample get score 0 and are flagged in ``never_in_bag``.
        """
        x = np.asarray(x, dtype=np.float64)
        leaves_x = self.apply(x)  # (B,)
        leaves_train = self.apply(self.X_train)  # (B, n)
        same = (leaves_train == leaves_x[:, None]) & (self.inclusion == 1)
        in_bag = self.inclusion.sum(axis=0)
        never = in_bag == 0
        with np.errstate(invalid="ignore", divide="ignore"):
            scores = np.where(never, 0.0, same.sum(axis=0) / np.maximum(in_bag, 1))
        return scores, never

    def proximity(self, x, i):
        if not 0 <= i < self.n:
            raise IndexError(f"training index {i} out of range")
        scores, never = self.proximity_scores(x)
        if never[i]:
            warnings.warn(f"training point {i} is never in-bag; proximity set to 0", stacklevel=2)
        return float(scores[i])


def fit_forest(X, r, w, params=ForestParams(), *, stream=()):
    """Fit a forest of ``params.n_trees`` trees on pseudo-responses ``r``.

    ``stream`` is appended to the per-tree seed key, so several forests can
    share one seed without sharing random draws.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if r.shape[0] != n or w.shape[0] != n:
        raise ValueError("X, r and w have inconsistent lengths")
    k = params.subsample_size(n)
    if k > n:
        raise ValueError(f"subsample size {k} exceeds n={n}")
    if k < params.tree.min_node_size:
        raise ValueError(f"subsample size {k} is below min_node_size={params.tree.min_node_size}")
    if not np.any(w > 0):
        raise ValueError("all sampling weights are zero")
    if np.any(w <= 0):
        raise ValueError("sampling weights must be positive")

    B = params.n_trees
    trees = []
    inclusion = np.zeros((B, n), dtype=np.uint8)
    for b in range(B):
        rng = np.random.Generator(np.random.Philox(tree_seed_sequence(params.seed, *stream, b)))
        idx = weighted_subsample(w, k, rng)
        inclusion[b, idx] = 1
        tseed = int(rng.integers(0, 2**32))
        tp = TreeParams(params.tree.mtry, params.tree.min_node_size, params.tree.max_depth, tseed)
        trees.append(fit_tree(X[idx], r[idx], tp))
    return ForestModel(trees, inclusion, k, X)


class SubsampledForest(RegressorMixin, BaseEstimator):
    """Regression forest of trees grown on weighted subsamples.

    Parameters
    ----------
    n_estimators : int, default=500
    sample_fraction : float, default=0.4
        Subsample size is ``ceil(sample_fraction * n)``, drawn without replacement.
    mtry : int or None, default=None
        Features tried per split; ``None`` means ``max(1, p // 3)``.
    min_node_size : int, default=5
    max_depth : int or None, default=None
    random_state : int, default=0
    """

    def __init__(self, n_estimators=500, sample_fraction=0.4, mtry=None, min_node_size=5,
                 max_depth=None, random_state=0):
        self.n_estimators = n_estimators
        self.sample_fraction = sample_fraction
        self.mtry = mtry
        self.min_node_size = min_node_size
        self.max_depth = max_depth
        self.random_state = random_state

    def _forest_params(self):
        return ForestParams(
            n_trees=self.n_estimators,
            sample_fraction=self.sample_fraction,
            tree=TreeParams(self.mtry, self.min_node_size, self.max_depth),
            seed=self.random_state,
        )

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        self.forest_ = fit_forest(X, y, w, self._forest_params())
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "forest_")
        X = check_array(X, dtype=np.float64)
        return self.forest_.predict(X)

    def predict_variance(self, X):
        """Infinitesimal-jackknife variance plus the Monte-Carlo term ``var_b / B``."""
        check_is_fitted(self, "forest_")
        X = check_array(X, dtype=np.float64)
        T = self.forest_.per_tree_predictions(X)
        U = self.forest_.ij_derivatives(X, T)
        n = self.forest_.n
        return (U**2).sum(axis=0) / n**2 + self.forest_.tree_variance(X, T) / self.forest_.n_trees
