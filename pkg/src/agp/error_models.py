"""Local error indicators for the surrogate posterior and their Jacobians.

With ``t = tr(Sigma^-2 Gamma)`` and ``rho = |y_m - ybar|_{Sigma^-2}`` the
common exponent is ``psi = t + rho * sqrt(t)`` and

* ``KL``:  ``e = psi * exp(psi)``
* ``L2``:  ``e = tr(Gamma) * exp(psi)``

Both grow like ``exp(psi)`` and overflow quickly when the surrogate is poor,
so the batched routines work with ``log e``. The scalar :func:`indicator`
saturates at ``exp(LOG_CAP)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .bayes import Measurement
from .gp_core import PredictiveDistribution

LOG_CAP = 700.0
TRACE_FLOOR = 1e-30


class ErrorKind(str, enum.Enum):
    KL = "KL"
    L2 = "L2"


def _as_kind(kind) -> ErrorKind:
    return kind if isinstance(kind, ErrorKind) else ErrorKind(str(kind).upper())


def _full_terms(meas: Measurement, pred: PredictiveDistribution):
    s2 = meas.noise_std**2
    G = np.asarray(pred.covariance, dtype=float)
    t = np.trace(G) / s2
    rho = np.linalg.norm(meas.y_m - pred.mean) / meas.noise_std
    return t, rho, np.trace(G)


def psi_bar(meas: Measurement, pred: PredictiveDistribution) -> float:
    t, rho, _ = _full_terms(meas, pred)
    return float(t + rho * np.sqrt(max(t, 0.0)))


def indicator(kind, meas: Measurement, pred: PredictiveDistribution, with_flag: bool = False):
    """Pointwise error indicator; ``with_flag`` also returns whether it saturated."""
    kind = _as_kind(kind)
    psi = psi_bar(meas, pred)
    lead = psi if kind is ErrorKind.KL else float(np.trace(pred.covariance))
    if lead <= 0:
        return (0.0, False) if with_flag else 0.0
    log_e = np.log(lead) + psi
    saturated = log_e > LOG_CAP
    val = float(np.exp(min(log_e, LOG_CAP)))
    return (val, saturated) if with_flag else val


def indicator_jacobian(kind, meas: Measurement, pred: PredictiveDistribution) -> np.ndarray:
    """``d e / d Gamma`` as an ``m x m`` matrix.

    The ``1/sqrt(t)`` factor is evaluated with ``t`` floored at ``TRACE_FLOOR``;
    at ``Gamma = 0`` the indicator itself vanishes, so the floor only
    affects a limit direction that is irrelevant for optimization.
    """
    kind = _as_kind(kind)
    t, rho, trG = _full_terms(meas, pred)
    psi = t + rho * np.sqrt(max(t, 0.0))
    m = meas.dim
    inv_s2 = np.eye(m) / meas.noise_std**2
    dpsi = 1.0 + rho / (2.0 * np.sqrt(max(t, TRACE_FLOOR)))
    ep = np.exp(min(psi, LOG_CAP))
    if kind is ErrorKind.KL:
        return ep * (1.0 + psi) * dpsi * inv_s2
    return ep * np.eye(m) + trG * ep * dpsi * inv_s2


def log_indicator_diag(kind, meas: Measurement, mean: np.ndarray, var: np.ndarray):
    """Batched ``log e`` and ``d log e / d Gamma_jj`` for diagonal predictive covariances.

    ``mean`` and ``var`` are ``(N, m)``. Returns ``(log_e, dlog)`` with shapes
    ``(N,)`` and ``(N, m)``. Points with zero variance give ``log_e = -inf``.
    """
    kind = _as_kind(kind)
    s2 = meas.noise_std**2
    var = np.maximum(var, 0.0)
    t = var.sum(axis=1) / s2
    rho = np.linalg.norm(meas.y_m - mean, axis=1) / meas.noise_std
    sqt = np.sqrt(t)
    psi = t + rho * sqt
    dpsi = (1.0 + rho / (2.0 * np.maximum(sqt, np.sqrt(TRACE_FLOOR)))) / s2  # same for each j
    live = psi > 0
    with np.errstate(divide="ignore", over="ignore"):
        if kind is ErrorKind.KL:
            log_e = np.log(psi) + psi
            dlog = (1.0 / np.where(live, psi, 1.0) + 1.0) * dpsi
        else:
            trG = var.sum(axis=1)
            log_e = np.log(trG) + psi
            dlog = 1.0 / np.where(live, trG, 1.0) + dpsi
    # e vanishes identically where Gamma = 0; report a zero derivative there
    dlog = np.repeat(np.where(live, dlog, 0.0)[:, None], var.shape[1], axis=1)
    return log_e, dlog


def log_error_model_estimate(kind, meas: Measurement, model, samples) -> float:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(samples) == 0:
        raise ValueError("error model estimate needs at least one sample")
    mean, var = model.predict_batch(samples)
    log_e, _ = log_indicator_diag(kind, meas, mean, var)
    if np.all(np.isneginf(log_e)):
        return -np.inf
    return float(logsumexp(log_e) - np.log(len(log_e)))


def error_model_estimate(kind, meas: Measurement, model, samples) -> float:
    """Sample average of the indicator, saturating at ``exp(LOG_CAP)``."""
    return float(np.exp(min(log_error_model_estimate(kind, meas, model, samples), LOG_CAP)))


# --- offline checks of the bound behind the KL error model ----------------


def lemma_check(Sigma, Gamma, n: int, rng) -> tuple[float, float, float]:
    """Monte Carlo mean of ``|ybar - y|^2_{Sigma^-2}`` for ``y ~ N(ybar, Gamma)``.

    Returns ``(mc_mean, standard_error, tr(Sigma^-2 Gamma))``.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
    m = len(Gamma)
    w, V = np.linalg.eigh(Gamma)
    root = V * np.sqrt(np.maximum(w, 0.0))
    dev = rng.standard_normal((n, m)) @ root.T
    q = np.sum(np.linalg.solve(Sigma, dev.T) ** 2, axis=0)
    Sinv2 = np.linalg.inv(Sigma @ Sigma)
    return float(q.mean()), float(q.std(ddof=1) / np.sqrt(n)), float(np.trace(Sinv2 @ Gamma))


@dataclass(frozen=True)
class ToyProblem:
    """A 1D inverse problem with an analytic forward map and a fitted surrogate."""

    forward: Callable  # (n, 1) -> (n, m)
    lower: float
    upper: float
    meas: Measurement
    surrogate: object  # has predict_batch


@dataclass(frozen=True)
class KLBoundReport:
    kl: float
    bound: float
    bound_proof_form: float
    bound_b: float
    alpha: float

    @property
    def slack(self) -> float:
        return self.bound - self.kl


def _trapezoid_weights(x):
    w = np.empty_like(x)
    h = np.diff(x)
    w[0], w[-1] = h[0] / 2, h[-1] / 2
    w[1:-1] = (h[:-1] + h[1:]) / 2
    return w


def verify_kl_bound(toy: ToyProblem, n_grid: int = 20001) -> KLBoundReport:
    """Grid-quadrature check that the information-gain bound dominates the exact KL.

    Uses the exact forward map and the exact evidence ratio ``alpha``.
    """
    x = np.linspace(toy.lower, toy.upper, n_grid)
    w = _trapezoid_weights(x)
    P = x[:, None]
    meas = toy.meas
    s = meas.noise_std
    m = meas.dim
    y = np.asarray(toy.forward(P), dtype=float).reshape(n_grid, m)
    ybar, var = toy.surrogate.predict_batch(P)
    log_prior = -np.log(toy.upper - toy.lower)
    log_lik = -0.5 * m * np.log(2 * np.pi * s**2) - 0.5 * np.sum((meas.y_m - y) ** 2, axis=1) / s**2
    tot = s**2 + var
    log_lik_d = -0.5 * (m * np.log(2 * np.pi) + np.sum(np.log(tot), 1) + np.sum((meas.y_m - ybar) ** 2 / tot, 1))
    log_Z = logsumexp(log_prior + log_lik, b=w)
    log_Zd = logsumexp(log_prior + log_lik_d, b=w)
    if not (np.isfinite(log_Z) and np.isfinite(log_Zd)):
        raise FloatingPointError("evidence quadrature failed")
    log_pi = log_prior + log_lik - log_Z
    log_pid = log_prior + log_lik_d - log_Zd
    pi = np.exp(log_pi)
    kl = float(np.sum(w * pi * (log_pi - log_pid)))
    log_alpha = log_Zd - log_Z
    t = var.sum(1) / s**2
    a = np.sum((ybar - y) ** 2, 1) / s**2
    b_exact = np.linalg.norm(meas.y_m - y, axis=1) / s
    b_mean = np.linalg.norm(meas.y_m - ybar, axis=1) / s
    psi = 0.5 * t + 0.5 * a + b_exact * np.sqrt(a) + log_alpha
    psi_proof = 0.5 * t + 0.5 * a + b_mean * np.sqrt(a) + log_alpha
    bound = float(np.sum(w * pi * psi))
    bound_proof = float(np.sum(w * pi * psi_proof))
    with np.errstate(over="ignore", invalid="ignore"):
        bound_b = float(np.sum(w * np.exp(log_pid) * psi * np.exp(psi)))
    return KLBoundReport(kl, bound, bound_proof, bound_b, float(np.exp(log_alpha)))
