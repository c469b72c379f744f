"""Measurement model, likelihoods and the surrogate posterior density.

All densities are handled in log space. The measurement noise is
``eta ~ N(0, sigma^2 I_m)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp_core import PredictiveDistribution

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class Measurement:
    y_m: np.ndarray
    noise_std: float

    def __post_init__(self):
        object.__setattr__(self, "y_m", np.atleast_1d(np.asarray(self.y_m, dtype=float)))
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")

    @property
    def dim(self) -> int:
        return len(self.y_m)


@dataclass(frozen=True)
class PriorBox:
    """Flat prior on an axis-aligned box."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("empty prior box")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def contains(self, p) -> np.ndarray:
        P = np.asarray(p, dtype=float)
        return np.all((P >= self.lower) & (P <= self.upper), axis=-1)


def _check(meas: Measurement, y):
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != meas.dim:
        raise ValueError(f"expected output dimension {meas.dim}, got {y.shape[-1]}")
    return y


def log_likelihood_exact(meas: Measurement, y_val) -> np.ndarray | float:
    """``-1/2 |y_m - y|^2 / sigma^2``; accepts one output vector or a batch."""
    r = meas.y_m - _check(meas, y_val)
    return -0.5 * np.sum(r * r, axis=-1) / meas.noise_std**2


def log_likelihood_plugin(meas: Measurement, pred: PredictiveDistribution) -> float:
    return float(log_likelihood_exact(meas, pred.mean))


def log_likelihood_full(meas: Measurement, pred: PredictiveDistribution) -> float:
    """Log density of ``y_m`` under ``N(mean, sigma^2 I + Gamma)``, normalization included."""
    mean = _check(meas, pred.mean)
    C = meas.noise_std**2 * np.eye(meas.dim) + np.asarray(pred.covariance, dtype=float)
    L = np.linalg.cholesky(C)
    z = np.linalg.solve(L, meas.y_m - mean)
    return float(-0.5 * meas.dim * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * z @ z)


def log_likelihood_full_diag(meas: Measurement, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Batched full likelihood for diagonal predictive covariances, ``mean, var: (N, m)``."""
    tot = meas.noise_std**2 + var
    r = meas.y_m - mean
    return -0.5 * (meas.dim * LOG_2PI + np.sum(np.log(tot), axis=-1) + np.sum(r * r / tot, axis=-1))


def log_posterior_batch(meas: Measurement, prior: PriorBox, model, P) -> np.ndarray:
    """Unnormalized surrogate log posterior at each row of ``P``; ``-inf`` outside the box.

    ``model`` only needs a ``predict_batch(P) -> (mean, var)`` method.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    out = np.full(len(P), -np.inf)
    inside = prior.contains(P)
    if np.any(inside):
        mean, var = model.predict_batch(P[inside])
        out[inside] = log_likelihood_full_diag(meas, mean, var)
    return out


def log_posterior_unnorm(meas: Measurement, prior: PriorBox, model, p) -> float:
    return float(log_posterior_batch(meas, prior, model, np.asarray(p, dtype=float)[None, :])[0])


def exact_log_posterior(meas: Measurement, prior: PriorBox, forward):
    """Unnormalized log posterior of the exact model, ``forward(P) -> (N, m)``."""

    def logpdf(P):
        P = np.atleast_2d(P)
        out = np.full(len(P), -np.inf)
        inside = prior.contains(P)
        if np.any(inside):
            out[inside] = log_likelihood_exact(meas, forward(P[inside]))
        return out

    return logpdf
