"""Evaluation metrics for link- and response-space predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .family import get_family

__all__ = [
    "StageEvaluation",
    "mean_log_lik",
    "mse",
    "coverage",
    "var_consistency_ratio",
    "ks_normality",
    "pseudo_log",
]


@dataclass
class StageEvaluation:
    stage: int
    mean_ll: float
    mse_link: float
    mse_response: float
    avg_var: float
    coverage: float
    abs_bias: float
    ks: float = float("nan")

    def as_dict(self):
        return asdict(self)


def mean_log_lik(family, link_preds, y, trials=None):
    """Average per-observation log-likelihood (additive constants dropped)."""
    fam = get_family(family)
    link_preds = np.asarray(link_preds, dtype=np.float64)
    if link_preds.shape[0] != np.shape(y)[0]:
        raise ValueError("predictions and observations have different lengths")
    return float(np.mean(fam.log_lik(link_preds, y, trials)))


def mse(preds, targets):
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets have different shapes")
    return float(np.mean((preds - targets) ** 2))


def coverage(lo, hi, truths):
    """Fraction of ``truths`` inside the closed intervals ``[lo, hi]``."""
    lo, hi, truths = (np.asarray(a, dtype=np.float64) for a in (lo, hi, truths))
    return float(np.mean((lo <= truths) & (truths <= hi)))


def var_consistency_ratio(var_estimates, estimates):
    """Mean variance estimate over the sample variance of the estimates."""
    var_estimates = np.asarray(var_estimates, dtype=np.float64)
    estimates = np.asarray(estimates, dtype=np.float64)
    if estimates.shape[0] < 2:
        raise ValueError("need at least 2 replicates")
    denom = np.var(estimates, ddof=1)
    if denom == 0:
        raise ValueError("zero variance denominator")
    return float(np.mean(var_estimates) / denom)


def ks_normality(estimates, truths, var_estimates):
    """One-sample Kolmogorov-Smirnov distance of standardised estimates from N(0, 1).

    Each replicate is standardised by its own variance estimate.  Replicates
    with a non-positive variance estimate are dropped.

    Returns
    -------
    statistic : float
    n_dropped : int
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    truths = np.broadcast_to(np.asarray(truths, dtype=np.float64), estimates.shape)
    var_estimates = np.asarray(var_estimates, dtype=np.float64)
    keep = var_estimates > 0
    n_dropped = int((~keep).sum())
    if keep.sum() < 5:
        raise ValueError("need at least 5 replicates with positive variance")
    z = (estimates[keep] - truths[keep]) / np.sqrt(var_estimates[keep])
    return float(stats.kstest(z, "norm").statistic), n_dropped


def pseudo_log(v):
    """Inverse hyperbolic sine, a log-like transform that is odd and finite at 0."""
    return np.arcsinh(v)
