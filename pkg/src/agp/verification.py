"""Randomized oracle checks of the numerical building blocks.

Each suite draws random instances from a seeded generator, compares the
library against an independent computation (dense solves, finite
differences, Monte Carlo, quadrature or exhaustive search) and returns a
:class:`CheckResult`. The ``agp verify`` command runs all of them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .bayes import Measurement, log_likelihood_full
from .design import optimize_tolerances
from .error_models import ErrorKind, ToyProblem, indicator, indicator_jacobian, lemma_check, verify_kl_bound
from .gp_core import Design, Kernel, PredictiveDistribution, TrainingData, default_kernel, dvariance_dtol, fit, tune_hyperparameters
from .sampler import (
    de_log_proposal_density,
    ensemble_step,
    init_ensemble,
    integrated_autocorr_time,
    metropolis_log_accept,
    stretch_log_accept,
    stretch_log_z_density,
)
from .work_model import WorkModel


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    limit: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: worst={self.worst:.3e} limit={self.limit:.3e} ({self.seconds:.1f}s) {self.detail}".rstrip()


def _timed(name, limit, fn, compare=lambda w, lim: w <= lim, detail=""):
    t0 = time.perf_counter()
    worst = float(fn())
    return CheckResult(name, bool(compare(worst, limit)), worst, limit, time.perf_counter() - t0, detail)


def _spd(m, rng, scale=1.0):
    A = rng.standard_normal((m, m))
    return scale * (A @ A.T / m + 0.2 * np.eye(m))


def random_gp(rng, d=None, m=None, s=None):
    d = d or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, 4))
    s = s or int(rng.integers(1, 11))
    X = rng.uniform(-1, 1, (s, d))
    kernel = Kernel(rng.uniform(0.3, 1.5, d), rng.uniform(0.5, 2.0, m))
    tol = rng.uniform(0.05, 0.5, s)
    Y = rng.standard_normal((s, m))
    return kernel, TrainingData(Design(X, tol), Y)


def _dense_predict(kernel: Kernel, data: TrainingData, P):
    """Textbook GP prediction with explicit loops and LU solves."""
    X, tol, Y = data.points, data.tolerances, data.values
    ell, c = kernel.lengthscales, kernel.variances
    k = lambda a, b: np.exp(-np.sum(((a - b) / ell) ** 2))
    K = np.array([[k(a, b) for b in X] for a in X])
    Ks = np.array([[k(a, b) for b in P] for a in X])
    mean = np.empty((len(P), len(c)))
    var = np.empty((len(P), len(c)))
    for j, cj in enumerate(c):
        A = cj * K + np.diag(tol**2)
        mean[:, j] = cj * Ks.T @ np.linalg.solve(A, Y[:, j])
        var[:, j] = cj - cj * cj * np.sum(Ks * np.linalg.solve(A, Ks), axis=0)
    return mean, var


def gp_oracle_suite(n: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)

    def worst():
        out = 0.0
        for _ in range(n):
            kernel, data = random_gp(rng)
            P = rng.uniform(-1, 1, (5, data.design.dim))
            mean, var = fit(kernel, data).predict_batch(P)
            m0, v0 = _dense_predict(kernel, data, P)
            out = max(out, np.max(np.abs(mean - m0)) / np.max(np.abs(m0)), np.max(np.abs(var - v0) / v0))
        return out

    return _timed("GP prediction vs dense solve", 1e-10, worst, detail=f"{n} instances")


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def dvar_dtol_check(rng) -> float:
    kernel, data = random_gp(rng)
    i = int(rng.integers(len(data)))
    # near point i, so the derivative is not lost in round-off
    p = data.points[i] + 0.3 * kernel.lengthscales * rng.standard_normal(data.design.dim)
    ana = np.diag(dvariance_dtol(fit(kernel, data), p, i))
    h = 1e-5 * data.tolerances[i]

    def var_at(t):
        tol = data.tolerances.copy()
        tol[i] = t
        return fit(kernel, TrainingData(Design(data.points, tol), data.values)).predict_batch(p[None])[1][0]

    fd = (var_at(data.tolerances[i] + h) - var_at(data.tolerances[i] - h)) / (2 * h)
    return _rel(ana, fd)


def random_prediction(rng, m=None):
    """A measurement and predictive distribution with moderate ``psi``."""
    m = m or int(rng.integers(1, 4))
    sigma = rng.uniform(0.05, 0.5)
    G = _spd(m, rng, sigma**2 * rng.uniform(0.05, 1.0))
    y_m = rng.standard_normal(m)
    mean = y_m + sigma * rng.uniform(0.2, 2.0) * rng.standard_normal(m) / np.sqrt(m)
    meas = Measurement(y_m, sigma)
    pred = PredictiveDistribution(mean, G)
    return meas, pred


def indicator_jacobian_check(rng, kind) -> float:
    meas, pred = random_prediction(rng)
    ana = indicator_jacobian(kind, meas, pred)
    m = meas.dim
    fd = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            h = 1e-6 * pred.covariance[a, a]
            vals = []
            for sgn in (1, -1):
                G = pred.covariance.copy()
                G[a, b] += sgn * h
                vals.append(indicator(kind, meas, PredictiveDistribution(pred.mean, G)))
            fd[a, b] = (vals[0] - vals[1]) / (2 * h)
    return _rel(ana, fd)


def dtol_dwork_check(rng) -> float:
    wm = WorkModel(rng.uniform(0.5, 4.0))
    w = 10 ** rng.uniform(0, 4)
    h = 1e-5 * w
    fd = (wm.tol_of_work(w + h) - wm.tol_of_work(w - h)) / (2 * h)
    return _rel(wm.dtol_dwork(w), fd)


def derivative_suite(n: int = 100, seed: int = 1) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = [
        ("dGamma/dtau_i vs central differences", dvar_dtol_check),
        ("de_KL/dGamma vs central differences", lambda r: indicator_jacobian_check(r, ErrorKind.KL)),
        ("de_L2/dGamma vs central differences", lambda r: indicator_jacobian_check(r, ErrorKind.L2)),
        ("dtau/dW vs central differences", dtol_dwork_check),
    ]
    return [_timed(name, 1e-5, lambda f=f: max(f(rng) for _ in range(n)), detail=f"{n} instances") for name, f in checks]


def lemma_suite(n_pairs: int = 10, n_draws: int = 100_000, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)

    def worst():
        z = 0.0
        for _ in range(n_pairs):
            m = int(rng.integers(1, 4))
            mc, se, tr = lemma_check(_spd(m, rng), _spd(m, rng, rng.uniform(0.1, 2.0)), n_draws, rng)
            z = max(z, abs(mc - tr) / se)
        return z

    return _timed("variance-trace lemma (in standard errors)", 3.0, worst, detail=f"{n_pairs} pairs")


def random_toy(rng) -> ToyProblem:
    m = int(rng.integers(1, 3))
    a, b, c = rng.uniform(0.5, 2, m), rng.uniform(1, 4, m), rng.uniform(-1, 1, m)

    def forward(P):
        P = np.atleast_2d(P)
        return a * np.sin(b * P) + c * P

    sigma = rng.uniform(0.05, 0.3)
    p_true = rng.uniform(-0.8, 0.8)
    meas = Measurement(forward([[p_true]])[0] + sigma * rng.standard_normal(m), sigma)
    s = int(rng.integers(3, 7))
    X = np.sort(rng.uniform(-1, 1, (s, 1)), axis=0)
    tol = rng.uniform(0.01, 0.1, s)
    data = TrainingData(Design(X, tol), forward(X) + tol[:, None] * rng.standard_normal((s, m)))
    kernel = tune_hyperparameters(data, default_kernel(data, [-1.0], [1.0]), n_iter=50)
    return ToyProblem(forward, -1.0, 1.0, meas, fit(kernel, data))


def kl_bound_suite(n: int = 20, seed: int = 3) -> CheckResult:
    """Smallest slack ``bound - KL`` over random 1D problems (must be >= -1e-6)."""
    rng = np.random.default_rng(seed)
    worst = lambda: min(verify_kl_bound(random_toy(rng)).slack for _ in range(n))
    return _timed("KL bound dominates exact KL (min slack)", -1e-6, worst, compare=lambda w, lim: w >= lim,
                  detail=f"{n} configurations")


def full_likelihood_suite(n: int = 10, n_draws: int = 100_000, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)

    def worst():
        out = 0.0
        for _ in range(n):
            meas, pred = random_prediction(rng)
            m, s = meas.dim, meas.noise_std
            Y = rng.multivariate_normal(pred.mean, pred.covariance, size=n_draws)
            mc = np.mean(np.exp(-0.5 * np.sum((meas.y_m - Y) ** 2, axis=1) / s**2))
            closed = np.exp(log_likelihood_full(meas, pred) + 0.5 * m * np.log(2 * np.pi) + m * np.log(s))
            out = max(out, abs(mc - closed) / closed)
        return out

    return _timed("full-likelihood identity (relative)", 0.02, worst, detail=f"{n} instances")


def gaussian_moment_check(d: int = 2, n_sweeps: int = 4000, seed: int = 5) -> CheckResult:
    """Largest deviation of mean and variance, in MC standard errors."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    logpdf = lambda P: -0.5 * np.sum(np.atleast_2d(P) ** 2, axis=1)
    ens = init_ensemble(logpdf, np.full(d, -3.0), np.full(d, 3.0), 32, rng)
    for _ in range(500):
        ens = ensemble_step(ens, logpdf)
    chain = np.empty((n_sweeps, 32, d))
    for t in range(n_sweeps):
        ens = ensemble_step(ens, logpdf)
        chain[t] = ens.walkers
    worst = 0.0
    for a in range(d):
        for f, target, unit_var in ((lambda x: x, 0.0, 1.0), (lambda x: x * x, 1.0, 2.0)):
            series = f(chain[:, :, a])
            tau = integrated_autocorr_time(series.mean(axis=1))
            se = np.sqrt(unit_var * tau / series.size)
            worst = max(worst, abs(series.mean() - target) / se)
    return CheckResult("ensemble sampler Gaussian moments (in standard errors)", worst <= 3.0, worst, 3.0,
                       time.perf_counter() - t0)


def _stationarity_error(P, mu) -> float:
    mu = mu / mu.sum()
    return float(np.max(np.abs(mu @ P - mu)) / mu.max())


def stretch_balance_error(d: int = 3, step: float = 0.1) -> float:
    """Three radial states on a ray; lattice cells scale with the radius."""
    r = np.array([1.0, 2.0, 4.0])
    log_target = lambda x: -0.5 * x**2 + np.sin(3 * x)
    P = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            if a != b:
                z = r[b] / r[a]
                lq = stretch_log_z_density(z) + np.log(z) + np.log(step)
                P[a, b] = np.exp(lq + stretch_log_accept(z, d, log_target(r[a]), log_target(r[b])))
        P[a, a] = 1.0 - P[a].sum()
    mu = np.exp(log_target(r)) * r**d
    return _stationarity_error(P, mu)


def de_balance_error(step: float = 0.1, jitter: float = 0.5) -> float:
    x = np.array([[0.0], [0.7], [1.5]])
    comp = np.array([[-1.0], [0.2], [0.5], [1.1]])
    log_target = lambda v: -0.5 * (v - 0.3) ** 2 / 0.8
    gamma = 2.38 / np.sqrt(2)
    P = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            if a != b:
                lq = de_log_proposal_density(x[a], x[b], comp, gamma, jitter) + np.log(step)
                P[a, b] = np.exp(lq + metropolis_log_accept(log_target(x[a, 0]), log_target(x[b, 0])))
        P[a, a] = 1.0 - P[a].sum()
    return _stationarity_error(P, np.exp(log_target(x[:, 0])))


def detailed_balance_suite() -> CheckResult:
    return _timed("3-state stationarity (stretch and DE moves)", 1e-12,
                  lambda: max(stretch_balance_error(), de_balance_error()))


def _oracle_log_objective(kernel, points, tols, mean, samples, meas) -> float:
    """``log mean e_KL`` from a direct GP fit; excluded points are dropped."""
    keep = np.isfinite(tols)
    data = TrainingData(Design(points[keep], tols[keep]), np.zeros((keep.sum(), len(kernel.variances))))
    _, var = fit(kernel, data).predict_batch(samples)
    t = var.sum(1) / meas.noise_std**2
    rho = np.linalg.norm(meas.y_m - mean, axis=1) / meas.noise_std
    psi = t + rho * np.sqrt(t)
    return float(logsumexp(np.log(psi) + psi) - np.log(len(psi)))


def tolerance_instance(rng):
    kernel = Kernel(np.array([rng.uniform(0.2, 0.6)]), np.array([rng.uniform(0.5, 1.5)]))
    p_old, p_new = rng.uniform(-1, 0), rng.uniform(0, 1)
    tau0 = 0.1
    data = TrainingData(Design(np.array([[p_old]]), np.array([tau0])), rng.standard_normal((1, 1)))
    model = fit(kernel, data)
    samples = rng.uniform(-1, 1, (200, 1))
    meas = Measurement(rng.standard_normal(1) * 0.1, rng.uniform(0.3, 0.8))
    return kernel, data, model, np.array([[p_new]]), samples, meas


def tolerance_oracle_suite(n: int = 10, n_split: int = 200, seed: int = 6) -> list[CheckResult]:
    """Optimizer vs an exhaustive split of the budget on a 1-old + 1-candidate problem."""
    rng = np.random.default_rng(seed)
    wm = WorkModel(1.0)
    gaps, overspend = [], []
    t0 = time.perf_counter()
    for _ in range(n):
        kernel, data, model, cand, samples, meas = tolerance_instance(rng)
        tau_def = 0.1
        budget = 2.0 * wm.work_of_tol(tau_def)
        w_old = wm.work_of_tol(data.tolerances[0])
        mean, _ = model.predict_batch(samples)
        pts = np.concatenate([data.points, cand])
        best = np.inf
        for a in np.linspace(0.0, budget, n_split):
            b = budget - a
            tols = np.array([wm.tol_of_work(w_old + a), wm.tol_of_work(b) if b > 0 else np.inf])
            best = min(best, _oracle_log_objective(kernel, pts, tols, mean, samples, meas))
        tv = optimize_tolerances(data.design, cand, budget, model, meas, "KL", samples, wm, tau_def, seed=0, min_work=0.0)
        got = _oracle_log_objective(kernel, pts, tv.values, mean, samples, meas)
        gaps.append(np.expm1(got - best))
        overspend.append(wm.work_of_tol(tv.values).sum() - w_old - budget)
    dt = time.perf_counter() - t0
    g, o = float(max(gaps)), float(max(overspend))
    return [
        CheckResult("tolerance optimizer vs grid oracle (relative gap)", g <= 0.01, g, 0.01, dt, f"{n} instances"),
        CheckResult("tolerance optimizer budget overspend", o <= 1e-9, o, 1e-9, 0.0),
    ]


def run_all(quick: bool = False) -> list[CheckResult]:
    scale = 0.2 if quick else 1.0
    n = lambda k: max(int(k * scale), 2)
    out = [gp_oracle_suite(n(200))]
    out += derivative_suite(n(100))
    out.append(lemma_suite(n(10), n(100_000)))
    out.append(kl_bound_suite(n(20)))
    out.append(full_likelihood_suite(n(10), n(100_000)))
    out.append(gaussian_moment_check(n_sweeps=n(4000)))
    out.append(detailed_balance_suite())
    out += tolerance_oracle_suite(n(10))
    return out
