"""Gaussian process regression with per-point evaluation tolerances.

The surrogate uses a separable Gauss kernel

    k(p, p') = exp(-sum_a ((p_a - p'_a) / l_a)^2) * diag(c_1, ..., c_m)

so each output component is an independent GP sharing the correlation
``kappa`` but with its own variance ``c_j``. Training values carry Gaussian
noise of standard deviation ``tau_i`` (the evaluation tolerance), giving one
``s x s`` system ``c_j K + diag(tau^2)`` per component. The prior mean is zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

DUPLICATE_THRESHOLD = 1e-9
JITTER = 1e-10
# Predictive variances below zero by less than this (relative to c_j) are rounding noise.
NEGATIVE_VARIANCE_TOL = 1e-8


class FitError(np.linalg.LinAlgError):
    """The regularized kernel system could not be factorized."""


class DegenerateDataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Kernel:
    lengthscales: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        var = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be positive")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    @property
    def n_outputs(self) -> int:
        return len(self.variances)

    def corr(self, X1, X2) -> np.ndarray:
        """Scalar correlation matrix ``kappa(X1, X2)``, shape ``(len(X1), len(X2))``."""
        X1 = np.atleast_2d(np.asarray(X1, dtype=float)) / self.lengthscales
        X2 = np.atleast_2d(np.asarray(X2, dtype=float)) / self.lengthscales
        if X1.shape[1] != self.dim or X2.shape[1] != self.dim:
            raise ValueError("point dimension does not match kernel")
        d2 = (
            np.sum(X1**2, axis=1)[:, None]
            + np.sum(X2**2, axis=1)[None, :]
            - 2.0 * X1 @ X2.T
        )
        return np.exp(-np.maximum(d2, 0.0))

    def __call__(self, p, q) -> np.ndarray:
        """Full ``m x m`` kernel value between two single points."""
        return float(self.corr(p, q)[0, 0]) * np.diag(self.variances)

    def to_dict(self) -> dict:
        return {"lengthscales": self.lengthscales.tolist(), "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Kernel":
        return cls(np.array(d["lengthscales"]), np.array(d["variances"]))


def kernel_eval(k: Kernel, p, q) -> np.ndarray:
    return k(p, q)


@dataclass(frozen=True)
class Design:
    """Ordered evaluation points with their tolerances."""

    points: np.ndarray
    tolerances: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        tol = np.asarray(self.tolerances, dtype=float).reshape(-1)
        if pts.ndim == 1:
            pts = pts.reshape(len(tol), -1) if len(tol) else pts.reshape(0, max(len(pts), 1))
        if len(pts) != len(tol):
            raise ValueError("points and tolerances differ in length")
        if np.any(~np.isfinite(tol)) or np.any(tol <= 0):
            raise ValueError("design tolerances must be positive and finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "tolerances", tol)

    def __len__(self) -> int:
        return len(self.tolerances)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def empty(cls, d: int) -> "Design":
        return cls(np.zeros((0, d)), np.zeros(0))

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "tolerances": self.tolerances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Design":
        pts = np.array(d["points"], dtype=float)
        return cls(pts, np.array(d["tolerances"], dtype=float))


@dataclass(frozen=True)
class TrainingData:
    design: Design
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(len(self.design), -1)
        if len(vals) != len(self.design):
            raise ValueError("values and design differ in length")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.design)

    @property
    def points(self) -> np.ndarray:
        return self.design.points

    @property
    def tolerances(self) -> np.ndarray:
        return self.design.tolerances

    def to_dict(self) -> dict:
        return {"design": self.design.to_dict(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingData":
        return cls(Design.from_dict(d["design"]), np.array(d["values"], dtype=float))


def merge_duplicates(data: TrainingData, threshold: float = DUPLICATE_THRESHOLD) -> TrainingData:
    """Collapse points closer than ``threshold``, keeping the smaller tolerance."""
    pts, tol, vals = data.points, data.tolerances, data.values
    keep: list[int] = []
    for i in np.argsort(tol, kind="stable"):
        if all(np.linalg.norm(pts[i] - pts[k]) >= threshold for k in keep):
            keep.append(i)
    keep.sort()
    if len(keep) == len(tol):
        return data
    return TrainingData(Design(pts[keep], tol[keep]), vals[keep])


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance)


def _factor(A: np.ndarray):
    try:
        return linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        pass
    Aj = A + JITTER * np.max(np.diag(A)) * np.eye(len(A))
    try:
        return linalg.cho_factor(Aj, lower=True)
    except linalg.LinAlgError:
        cond = np.linalg.cond(A)
        raise FitError(f"kernel system not positive definite (condition number {cond:.3e})") from None


@dataclass(frozen=True)
class SurrogateModel:
    """A fitted GP; immutable, build with :func:`fit`."""

    kernel: Kernel
    data: TrainingData
    corr_train: np.ndarray = field(repr=False)
    factors: tuple = field(repr=False)
    alpha: np.ndarray = field(repr=False)  # (s, m), (c_j K + T^2)^{-1} y_j

    @property
    def n_points(self) -> int:
        return len(self.data)

    @property
    def n_outputs(self) -> int:
        return self.kernel.n_outputs

    def predict_batch(self, P) -> tuple[np.ndarray, np.ndarray]:
        """Predictive means and (diagonal) variances at ``P``, each ``(N, m)``."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        c = self.kernel.variances
        N, m = len(P), len(c)
        if self.n_points == 0:
            return np.zeros((N, m)), np.tile(c, (N, 1))
        kap = self.kernel.corr(self.data.points, P)  # (s, N)
        mean = (kap.T @ self.alpha) * c
        var = np.empty((N, m))
        for j in range(m):
            v = linalg.solve_triangular(self.factors[j][0], c[j] * kap, lower=True, check_finite=False)
            var[:, j] = c[j] - np.sum(v * v, axis=0)
        return mean, _clamp_variance(var, c)

    def predict(self, p) -> PredictiveDistribution:
        mean, var = self.predict_batch(np.asarray(p, dtype=float)[None, :])
        return PredictiveDistribution(mean[0], np.diag(var[0]))

    def weights(self, P) -> np.ndarray:
        """``(c_j K + T^2)^{-1} c_j kappa(X, P)`` stacked as ``(m, s, N)``."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        kap = self.kernel.corr(self.data.points, P)
        c = self.kernel.variances
        return np.stack([linalg.cho_solve(self.factors[j], c[j] * kap, check_finite=False) for j in range(len(c))])


def _clamp_variance(var, c):
    bad = var < -NEGATIVE_VARIANCE_TOL * c
    if np.any(bad):
        warnings.warn("predictive variance significantly negative; clamped to zero", RuntimeWarning)
    return np.maximum(var, 0.0)


def fit(kernel: Kernel, data: TrainingData) -> SurrogateModel:
    m = kernel.n_outputs
    if data.values.shape[1] != m and len(data):
        raise ValueError("kernel output count does not match data")
    if len(data) == 0:
        return SurrogateModel(kernel, data, np.zeros((0, 0)), (), np.zeros((0, m)))
    K = kernel.corr(data.points, data.points)
    noise = np.diag(data.tolerances**2)
    factors, alpha = [], np.empty((len(data), m))
    for j in range(m):
        f = _factor(kernel.variances[j] * K + noise)
        factors.append(f)
        alpha[:, j] = linalg.cho_solve(f, data.values[:, j], check_finite=False)
    return SurrogateModel(kernel, data, K, tuple(factors), alpha)


def predict(model: SurrogateModel, p) -> PredictiveDistribution:
    return model.predict(p)


def dvariance_dtol(model: SurrogateModel, p, i: int) -> np.ndarray:
    """Derivative of the predictive covariance at ``p`` with respect to ``tau_i``."""
    if not 0 <= i < model.n_points:
        raise IndexError(f"training index {i} out of range for {model.n_points} points")
    w = model.weights(np.asarray(p, dtype=float)[None, :])[:, i, 0]
    tau = model.data.tolerances[i]
    return np.diag(2.0 * tau * w**2)


def mean_pred_std(model: SurrogateModel, p) -> float:
    _, var = model.predict_batch(np.asarray(p, dtype=float)[None, :])
    return float(np.mean(np.sqrt(var[0])))


# --- hyperparameters -------------------------------------------------------

LENGTHSCALE_PRIOR = (1.0, 10.0)  # Gamma(shape, rate)


def _lml_and_grad(theta, X, tol2, Y, prior):
    d = X.shape[1]
    ls, c = np.exp(theta[:d]), np.exp(theta[d:])
    diff2 = ((X[:, None, :] - X[None, :, :]) / ls) ** 2  # (s, s, d)
    K = np.exp(-diff2.sum(-1))
    s, m = Y.shape
    val = 0.0
    grad = np.zeros_like(theta)
    for j in range(m):
        A = c[j] * K + np.diag(tol2)
        try:
            L = linalg.cholesky(A, lower=True)
        except linalg.LinAlgError:
            return -np.inf, grad
        a = linalg.cho_solve((L, True), Y[:, j])
        val += -0.5 * Y[:, j] @ a - np.log(np.diag(L)).sum() - 0.5 * s * np.log(2 * np.pi)
        W = np.outer(a, a) - linalg.cho_solve((L, True), np.eye(s))
        cK = c[j] * K
        grad[d + j] = 0.5 * np.sum(W * cK)
        for k in range(d):
            grad[k] += 0.5 * np.sum(W * cK * 2.0 * diff2[:, :, k])
    shape, rate = prior
    val += np.sum((shape - 1) * np.log(ls) - rate * ls)
    grad[:d] += (shape - 1) - rate * ls
    return val, grad


def penalized_log_marginal_likelihood(kernel: Kernel, data: TrainingData, prior=LENGTHSCALE_PRIOR) -> float:
    """Log marginal likelihood plus the (unnormalized) Gamma log prior on lengthscales."""
    theta = np.concatenate([np.log(kernel.lengthscales), np.log(kernel.variances)])
    return _lml_and_grad(theta, data.points, data.tolerances**2, data.values, prior)[0]


def default_kernel(data: TrainingData, lower, upper) -> Kernel:
    """Starting hyperparameters: a fifth of the box width, output second moments."""
    width = np.asarray(upper, float) - np.asarray(lower, float)
    if len(data):
        var = np.maximum(np.mean(data.values**2, axis=0), 1e-12)
    else:
        var = np.ones(data.values.shape[1])
    return Kernel(0.2 * width, var)


def tune_hyperparameters(
    data: TrainingData,
    init: Kernel,
    n_iter: int = 200,
    lr: float = 0.05,
    prior=LENGTHSCALE_PRIOR,
    min_lengthscale=None,
) -> Kernel:
    """Adam ascent on the penalized log marginal likelihood in log-parameters.

    Returns the best iterate seen, so the objective never drops below its
    value at ``init``. With ``min_lengthscale`` the lengthscales are kept
    above that floor (``init`` is projected onto it first).
    """
    if len(data) < 2 or np.ptp(data.points, axis=0).max() < DUPLICATE_THRESHOLD:
        warnings.warn("too few distinct training points to tune hyperparameters", DegenerateDataWarning)
        return init
    X, tol2, Y = data.points, data.tolerances**2, data.values
    d = X.shape[1]
    lo = np.full(len(init.lengthscales) + len(init.variances), -12.0)
    if min_lengthscale is not None:
        lo[:d] = np.maximum(lo[:d], np.log(np.broadcast_to(min_lengthscale, (d,))))
    theta0 = np.concatenate([np.log(init.lengthscales), np.log(init.variances)])
    theta = np.clip(theta0, lo, 12.0)
    best_val, g = _lml_and_grad(theta, X, tol2, Y, prior)
    best = theta.copy()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, n_iter + 1):
        if not np.all(np.isfinite(g)):
            break
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        step = lr * (m1 / (1 - b1**t)) / (np.sqrt(m2 / (1 - b2**t)) + eps)
        theta = np.clip(theta + step, lo, 12.0)
        val, g = _lml_and_grad(theta, X, tol2, Y, prior)
        if val > best_val:
            best_val, best = val, theta.copy()
    if np.array_equal(best, theta0):
        return init
    return Kernel(np.exp(best[:d]), np.exp(best[d:]))
