"""Generalised boosted forests.

The link-space estimate is an MLE-type constant plus up to two forests, each
grown on Newton residuals ``l'/(-l'')`` of the current fit with subsampling
weights ``-l''``.  Its variance combines infinitesimal-jackknife directional
derivatives of the constant and of every forest, so covariances between the
stages are included, plus a Monte-Carlo term for the finite number of trees.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .family import get_family
from .forest import ForestParams, fit_forest
from .tree import TreeParams

__all__ = [
    "PredictionWithVariance",
    "GeneralisedBoostedForest",
    "combine_variance",
    "MAX_STAGES",
]

MAX_STAGES = 2
VARIANCE_MODES = ("raw", "corrected")
RESIDUAL_SOURCES = ("in_sample", "out_of_bag")
_CHUNK = 256


@dataclass
class PredictionWithVariance:
    """Point estimates and variance estimates at ``m`` points.

    ``stage_contributions[0]`` is the constant; row ``j`` is forest ``j``.
    ``n_clamped`` counts points whose corrected variance was negative and
    was set to zero.
    """

    link_estimate: np.ndarray
    link_variance: np.ndarray
    response_estimate: np.ndarray
    response_variance: np.ndarray
    stage_contributions: np.ndarray
    n_clamped: int = 0

    def __len__(self):
        return self.link_estimate.shape[0]


def combine_variance(U0, forest_derivs, tree_vars, n, n_trees, k, mode="corrected"):
    """Link-space variance from directional derivatives.

    Parameters
    ----------
    U0 : ndarray of shape (n,)
        Directional derivatives of the constant.
    forest_derivs : list of ndarray of shape (n, m)
        ``n * cov_b(N[b, i], T_b(x))`` for each forest.
    tree_vars : list of ndarray of shape (m,)
        ``var_b(T_b(x))`` for each forest.
    mode : {"raw", "corrected"}
        ``raw`` adds ``sum(tree_vars) / B``; ``corrected`` multiplies that
        term by ``1 - n / k`` and clamps the total at zero.

    Returns
    -------
    variance : ndarray of shape (m,)
    n_clamped : int
    """
    if mode not in VARIANCE_MODES:
        raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}")
    U0 = np.asarray(U0, dtype=np.float64)
    m = tree_vars[0].shape[0] if tree_vars else (forest_derivs[0].shape[1] if forest_derivs else 1)
    total = np.repeat(U0[:, None], m, axis=1)
    for U in forest_derivs:
        total = total + U
    v = (total**2).sum(axis=0) / n**2
    if tree_vars:
        mc = np.sum(tree_vars, axis=0) / n_trees
        if mode == "corrected":
            mc = (1.0 - n / k) * mc
        v = v + mc
    neg = v < 0
    return np.where(neg, 0.0, v), int(neg.sum())


def _fingerprint(X, y, trials):
    h = hashlib.sha256()
    for a in (X, y, trials):
        if a is not None:
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


class GeneralisedBoostedForest(RegressorMixin, BaseEstimator):
    """Newton-boosted random forests for exponential-family responses.

    Parameters
    ----------
    family : {"poisson", "binomial", "gaussian"}, default="poisson"
    n_estimators : int, default=500
        Trees per forest (shared by all stages).
    sample_fraction : float, default=0.4
        Per-tree subsample size ``k = ceil(sample_fraction * n)``.
    mtry : int or None, default=None
        Features tried at each split; ``None`` means ``max(1, p // 3)``.
    min_node_size : int, default=5
    max_depth : int or None, default=None
    stages : int, default=2
        Number of forests after the constant (0, 1 or 2).
    variance_mode : {"corrected", "raw"}, default="corrected"
    residual_source : {"in_sample", "out_of_bag"}, default="in_sample"
        Which forest predictions at the training points feed the next
        stage's residuals.
    random_state : int, default=0

    Attributes
    ----------
    eta0_ : float
        MLE-type constant.
    U0_ : ndarray of shape (n,)
        Its directional derivatives.
    forests_ : list of ForestModel
    stage_train_link_ : list of ndarray
        Link values at the training points from which each forest's
        residuals were computed.
    """

    def __init__(self, family="poisson", n_estimators=500, sample_fraction=0.4, mtry=None,
                 min_node_size=5, max_depth=None, stages=2, variance_mode="corrected",
                 residual_source="in_sample", random_state=0):
        self.family = family
        self.n_estimators = n_estimators
        self.sample_fraction = sample_fraction
        self.mtry = mtry
        self.min_node_size = min_node_size
        self.max_depth = max_depth
        self.stages = stages
        self.variance_mode = variance_mode
        self.residual_source = residual_source
        self.random_state = random_state

    def forest_params(self):
        return ForestParams(
            n_trees=self.n_estimators,
            sample_fraction=self.sample_fraction,
            tree=TreeParams(self.mtry, self.min_node_size, self.max_depth),
            seed=self.random_state,
        )

    def _check_params(self):
        if not isinstance(self.stages, (int, np.integer)) or not 0 <= self.stages <= MAX_STAGES:
            raise ValueError(f"unsupported stage count {self.stages!r}; expected 0, 1 or 2")
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}")
        if self.residual_source not in RESIDUAL_SOURCES:
            raise ValueError(f"residual_source must be one of {RESIDUAL_SOURCES}")
        return get_family(self.family)

    def fit(self, X, y, trials=None):
        """Fit the constant and the forests.

        ``trials`` are the binomial trial counts; for the binomial family
        they default to one (Bernoulli responses).
        """
        fam = self._check_params()
        X = check_array(X, dtype=np.float64)
        if fam.name == "binomial" and trials is None:
            trials = np.ones(X.shape[0])
        y, trials = fam.validate(y, trials)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have inconsistent lengths")
        n = X.shape[0]
        if n < 2 * self.min_node_size:
            raise ValueError(f"need at least 2 * min_node_size = {2 * self.min_node_size} samples, got {n}")
        params = self.forest_params()

        self.family_ = fam
        self.eta0_ = fam.mle_constant(y, trials)
        self.U0_ = fam.mle_derivatives(y, trials)
        self.forests_ = []
        self.stage_train_link_ = []
        eta = np.full(n, self.eta0_)
        for j in range(self.stages):
            r, w = fam.newton_residuals_weights(eta, y, trials)
            forest = fit_forest(X, r, w, params, stream=(j,))
            self.forests_.append(forest)
            self.stage_train_link_.append(eta)
            if self.residual_source == "in_sample":
                eta = eta + forest.predict(X)
            else:
                eta = eta + forest.oob_predictions()
        self.n_train_ = n
        self.n_features_in_ = X.shape[1]
        self.subsample_size_ = params.subsample_size(n)
        self.fingerprint_ = _fingerprint(X, y, trials)
        self.train_log_lik_ = [float(np.mean(fam.log_lik(self.eta0_, y, trials)))]
        # stage-wise training log-likelihood, with the in-sample forest fit
        link = np.full(n, self.eta0_)
        for forest in self.forests_:
            link = link + forest.predict(X)
            self.train_log_lik_.append(float(np.mean(fam.log_lik(link, y, trials))))
        return self

    # prediction -------------------------------------------------------

    def _staged_chunk(self, X, upto):
        fam = self.family_
        m = X.shape[0]
        n = self.n_train_
        contrib = [np.full(m, self.eta0_)]
        derivs, tvars = [], []
        out = []
        link = contrib[0].copy()
        v0, _ = combine_variance(self.U0_, [], [], n, self.n_estimators, self.subsample_size_, self.variance_mode)
        out.append((link.copy(), np.full(m, v0[0]), 0))
        for forest in self.forests_[:upto]:
            T = forest.per_tree_predictions(X)
            f = np.clip(T.mean(axis=0), T.min(axis=0), T.max(axis=0))
            contrib.append(f)
            link = link + f
            if forest.n_trees >= 2:
                derivs.append(forest.ij_derivatives(X, T))
                tvars.append(forest.tree_variance(X, T))
            v, nc = combine_variance(self.U0_, derivs, tvars, n, forest.n_trees, forest.k, self.variance_mode)
            out.append((link.copy(), v, nc))
        results = []
        for s, (lk, v, nc) in enumerate(out):
            d = fam.inv_link_deriv(lk)
            results.append(PredictionWithVariance(
                link_estimate=lk,
                link_variance=v,
                response_estimate=fam.inv_link(lk),
                response_variance=v * d**2,
                stage_contributions=np.vstack(contrib[: s + 1]),
                n_clamped=nc,
            ))
        return results

    def staged_predict_with_variance(self, X):
        """Predictions after the constant and after each forest.

        Returns a list of ``stages + 1`` :class:`PredictionWithVariance`;
        entry ``s`` uses the constant and the first ``s`` forests.
        """
        check_is_fitted(self, "forests_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        chunks = [self._staged_chunk(X[i:i + _CHUNK], len(self.forests_))
                  for i in range(0, X.shape[0], _CHUNK)]
        if not chunks:
            chunks = [self._staged_chunk(X, len(self.forests_))]
        staged = []
        for s in range(len(self.forests_) + 1):
            parts = [c[s] for c in chunks]
            staged.append(PredictionWithVariance(
                link_estimate=np.concatenate([p.link_estimate for p in parts]),
                link_variance=np.concatenate([p.link_variance for p in parts]),
                response_estimate=np.concatenate([p.response_estimate for p in parts]),
                response_variance=np.concatenate([p.response_variance for p in parts]),
                stage_contributions=np.hstack([p.stage_contributions for p in parts]),
                n_clamped=sum(p.n_clamped for p in parts),
            ))
        return staged

    def predict_with_variance(self, X):
        return self.staged_predict_with_variance(X)[-1]

    def predict_link(self, X):
        return self.predict_with_variance(X).link_estimate

    def predict(self, X):
        """Response-space mean ``g^{-1}(f(x))``."""
        return self.predict_with_variance(X).response_estimate

    def confidence_interval(self, X, level=0.95):
        """Normal interval for the link-space signal, ``(lo, hi)`` arrays."""
        if not 0.0 <= level < 1.0:
            raise ValueError("level must lie in [0, 1)")
        pred = self.predict_with_variance(X)
        return normal_interval(pred.link_estimate, pred.link_variance, level)

    def prediction_range(self, stage=None):
        """Link-space interval that any prediction of the fitted model must lie in.

        Forest predictions average their training residuals, so bounded
        Newton residuals bound the predictions: Poisson residuals are at
        least -1 and binomial residuals lie in ``[-1/(1-p), 1/p]``.
        """
        check_is_fitted(self, "forests_")
        stage = len(self.forests_) if stage is None else stage
        fam = self.family_
        if fam.name == "gaussian":
            return -np.inf, np.inf
        lo = hi = self.eta0_
        for j in range(stage):
            if fam.name == "poisson":
                lo, hi = lo - 1.0, np.inf
            else:
                p = fam.inv_link(self.stage_train_link_[j])
                lo = lo - 1.0 / (1.0 - p.max())
                hi = hi + 1.0 / p.min()
        return float(lo), float(hi)


def normal_interval(estimate, variance, level=0.95):
    z = norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(np.maximum(variance, 0.0))
    return estimate - half, estimate + half
