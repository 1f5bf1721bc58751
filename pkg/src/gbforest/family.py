"""Exponential-family log-likelihoods in link space.

Each family exposes the per-observation log-likelihood and its first two
derivatives with respect to the link value, the MLE-type constant with its
infinitesimal-jackknife directional derivatives, Newton residuals/weights and
the inverse link. Additive constants of the log-likelihood are dropped, and
the Gaussian family uses unit variance.

All functions are vectorised over observations.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DegenerateMLEError",
    "Family",
    "Gaussian",
    "Binomial",
    "Poisson",
    "get_family",
    "log_lik",
    "d1",
    "d2",
    "mle_constant",
    "mle_derivatives",
    "newton_residuals_weights",
    "inv_link",
    "inv_link_deriv",
]

LINK_CLAMP = 500.0


class DegenerateMLEError(ValueError):
    """The MLE-type constant lies at +/- infinity."""

    def __init__(self, msg="degenerate MLE at infinity"):
        super().__init__(msg)


def _link(t):
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite link value")
    return np.clip(t, -LINK_CLAMP, LINK_CLAMP)


def _expit(t):
    # exp(-|t|) never overflows
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Family:
    """Base class; subclasses implement one exponential family."""

    name = ""

    def validate(self, y, trials=None):
        """Return ``(y, trials)`` as float arrays after checking the support."""
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 1:
            y = y.reshape(-1)
        if not np.all(np.isfinite(y)):
            raise ValueError("non-finite response")
        if trials is not None:
            raise ValueError(f"trials are only valid for the binomial family, not {self.name}")
        return y, None

    def log_lik(self, t, y, trials=None):
        raise NotImplementedError

    def d1(self, t, y, trials=None):
        raise NotImplementedError

    def d2(self, t, y, trials=None):
        raise NotImplementedError

    def mle_constant(self, y, trials=None):
        raise NotImplementedError

    def mle_derivatives(self, y, trials=None):
        raise NotImplementedError

    def inv_link(self, t):
        raise NotImplementedError

    def inv_link_deriv(self, t):
        raise NotImplementedError

    def newton_residuals_weights(self, eta, y, trials=None):
        """Newton pseudo-responses ``l'/(-l'')`` and weights ``-l''``."""
        y, trials = self.validate(y, trials)
        eta = np.broadcast_to(_link(eta), y.shape)
        w = -self.d2(eta, y, trials)
        if np.any(w <= 0):
            raise ValueError("vanishing curvature")
        return self.d1(eta, y, trials) / w, w

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(self.name)


class Gaussian(Family):
    name = "gaussian"

    def log_lik(self, t, y, trials=None):
        y, _ = self.validate(y, trials)
        return -0.5 * (y - _link(t)) ** 2

    def d1(self, t, y, trials=None):
        y, _ = self.validate(y, trials)
        return y - _link(t)

    def d2(self, t, y, trials=None):
        y, _ = self.validate(y, trials)
        return np.full(np.broadcast_shapes(np.shape(_link(t)), y.shape), -1.0)

    def mle_constant(self, y, trials=None):
        y, _ = self.validate(y, trials)
        if y.size == 0:
            raise ValueError("empty response")
        return float(np.mean(y))

    def mle_derivatives(self, y, trials=None):
        y, _ = self.validate(y, trials)
        if y.size == 0:
            raise ValueError("empty response")
        return y - np.mean(y)

    def newton_residuals_weights(self, eta, y, trials=None):
        # exact reduction to ordinary residuals with unit weights
        y, _ = self.validate(y, trials)
        eta = np.broadcast_to(_link(eta), y.shape)
        return y - eta, np.ones_like(y)

    def inv_link(self, t):
        return np.asarray(t, dtype=np.float64) * 1.0

    def inv_link_deriv(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))


class Binomial(Family):
    """Binomial counts ``y`` out of ``trials`` with the logit link."""

    name = "binomial"

    def validate(self, y, trials=None):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if trials is None:
            raise ValueError("binomial family requires trial counts")
        trials = np.broadcast_to(np.asarray(trials, dtype=np.float64).reshape(-1), y.shape)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(trials))):
            raise ValueError("non-finite response")
        if np.any(trials < 1) or np.any(trials != np.round(trials)):
            raise ValueError("trial counts must be positive integers")
        if np.any(y < 0) or np.any(y > trials) or np.any(y != np.round(y)):
            raise ValueError("binomial responses must be integers in [0, trials]")
        return y, trials

    def log_lik(self, t, y, trials=None):
        y, n = self.validate(y, trials)
        t = _link(t)
        # log(1 + e^t) = logaddexp(0, t)
        return y * t - n * np.logaddexp(0.0, t)

    def d1(self, t, y, trials=None):
        y, n = self.validate(y, trials)
        return y - n * _expit(_link(t))

    def d2(self, t, y, trials=None):
        y, n = self.validate(y, trials)
        p = _expit(_link(t))
        return -n * p * (1.0 - p)

    def newton_residuals_weights(self, eta, y, trials=None):
        y, n = self.validate(y, trials)
        p = _expit(np.broadcast_to(_link(eta), y.shape))
        w = n * p * (1.0 - p)
        if np.any(w <= 0):
            raise ValueError("vanishing curvature")
        frac = y / n
        # (y - np) / (np(1-p)) written so that y=0 and y=n hit -1/(1-p) and 1/p exactly
        r = frac / p - (1.0 - frac) / (1.0 - p)
        return r, w

    def mle_constant(self, y, trials=None):
        y, n = self.validate(y, trials)
        if y.size == 0:
            raise ValueError("empty response")
        s, f = y.sum(), (n - y).sum()
        if s <= 0 or f <= 0:
            raise DegenerateMLEError()
        return float(np.log(s / f))

    def mle_derivatives(self, y, trials=None):
        y, n = self.validate(y, trials)
        self.mle_constant(y, n)
        ybar, nbar = y.mean(), n.mean()
        return (nbar * y - n * ybar) / (ybar * (nbar - ybar))

    def inv_link(self, t):
        return _expit(_link(t))

    def inv_link_deriv(self, t):
        p = _expit(_link(t))
        return p * (1.0 - p)


class Poisson(Family):
    name = "poisson"

    def validate(self, y, trials=None):
        y, _ = super().validate(y, trials)
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("poisson responses must be non-negative integers")
        return y, None

    def log_lik(self, t, y, trials=None):
        y, _ = self.validate(y, trials)
        t = _link(t)
        return y * t - np.exp(t)

    def d1(self, t, y, trials=None):
        y, _ = self.validate(y, trials)
        return y - np.exp(_link(t))

    def d2(self, t, y, trials=None):
        y, _ = self.validate(y, trials)
        return np.broadcast_to(-np.exp(_link(t)), np.broadcast_shapes(np.shape(t), y.shape)).copy()

    def newton_residuals_weights(self, eta, y, trials=None):
        y, _ = self.validate(y, trials)
        mu = np.exp(np.broadcast_to(_link(eta), y.shape))
        if np.any(mu <= 0):
            raise ValueError("vanishing curvature")
        # y=0 gives exactly -1
        return y / mu - 1.0, mu

    def mle_constant(self, y, trials=None):
        y, _ = self.validate(y, trials)
        if y.size == 0:
            raise ValueError("empty response")
        ybar = y.mean()
        if ybar <= 0:
            raise DegenerateMLEError()
        return float(np.log(ybar))

    def mle_derivatives(self, y, trials=None):
        y, _ = self.validate(y, trials)
        self.mle_constant(y)
        ybar = y.mean()
        return (y - ybar) / ybar

    def inv_link(self, t):
        return np.exp(_link(t))

    def inv_link_deriv(self, t):
        return np.exp(_link(t))


_FAMILIES = {"gaussian": Gaussian, "binomial": Binomial, "poisson": Poisson}


def get_family(family):
    """Return a :class:`Family` instance from a name or an instance."""
    if isinstance(family, Family):
        return family
    try:
        return _FAMILIES[str(family).lower()]()
    except KeyError:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(_FAMILIES)}") from None


def log_lik(family, t, y, trials=None):
    return get_family(family).log_lik(t, y, trials)


def d1(family, t, y, trials=None):
    return get_family(family).d1(t, y, trials)


def d2(family, t, y, trials=None):
    return get_family(family).d2(t, y, trials)


def mle_constant(family, y, trials=None):
    """Closed-form maximiser of the summed log-likelihood over a constant link."""
    return get_family(family).mle_constant(y, trials)


def mle_derivatives(family, y, trials=None):
    """Infinitesimal-jackknife directional derivatives of :func:`mle_constant`."""
    return get_family(family).mle_derivatives(y, trials)


def newton_residuals_weights(family, eta, y, trials=None):
    return get_family(family).newton_residuals_weights(eta, y, trials)


def inv_link(family, t):
    return get_family(family).inv_link(t)


def inv_link_deriv(family, t):
    return get_family(family).inv_link_deriv(t)
