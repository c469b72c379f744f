"""Candidate selection and tolerance assignment for one design iteration.

Both problems integrate over the current chain of posterior samples and
freeze the surrogate mean at its current value; only the predictive
variance responds to the trial design.

The acquisition is reported with a positive sign,

    A_hat(p) = -(1/N) sum_{p'} <de/dGamma(p'), dGamma(p')/dtau_p> * dtau/dW,

evaluated at ``tau_p`` = mean predictive standard deviation at ``p``, so
large values mark points where spending work removes the most error.
Indicator magnitudes span hundreds of orders of magnitude, so both the
acquisition and the tolerance objective are handled as logarithms (a
monotone transform, same maximizers/minimizers).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.special import logsumexp
from scipy.stats import qmc

from .bayes import Measurement
from .error_models import log_indicator_diag
from .forward_models import SimulatedEvaluator
from .gp_core import Design, SurrogateModel, TrainingData
from .work_model import WorkModel

CANDIDATE_SEPARATION = 1e-2  # in box-scaled coordinates
REFINE_MIN_STEP = 1e-3  # relative work increase below which an old point is left alone
EXCLUDE_FACTOR = 10.0  # candidates cheaper than W(10 * tau_default) are dropped


@dataclass(frozen=True)
class CandidateSet:
    """Selected points with their ``log A_hat`` values (the values overflow easily)."""

    points: np.ndarray
    log_values: np.ndarray

    def __len__(self) -> int:
        return len(self.log_values)

    @property
    def values(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_values)


@dataclass(frozen=True)
class ToleranceVector:
    """New tolerances for ``n_old`` old points followed by the candidates (``inf`` = excluded)."""

    values: np.ndarray
    n_old: int
    objective: float
    objective_noop: float

    @property
    def old(self) -> np.ndarray:
        return self.values[: self.n_old]

    @property
    def candidates(self) -> np.ndarray:
        return self.values[self.n_old :]


class Acquisition:
    """Batched evaluator of ``log A_hat`` for a fixed model and sample set."""

    def __init__(self, model: SurrogateModel, meas: Measurement, kind, samples, wm: WorkModel):
        self.model = model
        self.meas = meas
        self.kind = kind
        self.wm = wm
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if len(self.samples) == 0:
            raise ValueError("acquisition needs samples")
        self.mean, self.var = model.predict_batch(self.samples)
        self.c = model.kernel.variances
        self.W = model.weights(self.samples) if model.n_points else None  # (m, s, N)

    def log_values(self, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        model, c = self.model, self.c
        _, var_p = model.predict_batch(P)  # (B, m)
        tau_p = np.mean(np.sqrt(var_p), axis=1)  # (B,)
        ks = model.kernel.corr(self.samples, P)  # (N, B)
        if self.W is not None:
            kx = model.kernel.corr(model.data.points, P)  # (s, B)
            C = c[:, None, None] * (ks[None] - np.matmul(self.W.transpose(0, 2, 1), kx[None]))  # (m, N, B)
        else:
            C = c[:, None, None] * ks[None]
        denom = var_p.T[:, None, :] + tau_p[None, None, :] ** 2  # (m, 1, B)
        C2 = C * C
        var_new = self.var.T[:, :, None] - C2 / denom  # (m, N, B)
        out = np.full(len(P), -np.inf)
        q = self.wm.exponent
        for b in range(len(P)):
            if tau_p[b] <= 0:
                continue
            log_e, dlog = log_indicator_diag(self.kind, self.meas, self.mean, np.maximum(var_new[:, :, b].T, 0.0))
            with np.errstate(divide="ignore"):
                terms = log_e[:, None] + np.log(dlog) + np.log(C2[:, :, b].T) - 2 * np.log(denom[:, 0, b])[None, :]
            lse = logsumexp(terms)
            if not np.isfinite(lse):
                continue
            out[b] = lse - np.log(len(self.samples)) + np.log(2 * tau_p[b]) - np.log(q) + (1 + q) * np.log(tau_p[b])
        return out

    def log_value(self, p) -> float:
        return float(self.log_values(np.asarray(p, dtype=float)[None, :])[0])


def acquisition(p, model: SurrogateModel, meas: Measurement, kind, samples, wm: WorkModel) -> float:
    """Positive-sign acquisition ``A_hat(p)`` (0 where spending work gains nothing)."""
    with np.errstate(over="ignore"):
        return float(np.exp(Acquisition(model, meas, kind, samples, wm).log_value(p)))


def select_candidates(
    model: SurrogateModel,
    meas: Measurement,
    kind,
    samples,
    wm: WorkModel,
    max_count: int,
    lower,
    upper,
    seed=None,
    n_starts: int | None = None,
    exclude=None,
) -> CandidateSet:
    """Multi-start L-BFGS-B maximization of ``log A_hat`` from Halton start points.

    Local optima closer than ``CANDIDATE_SEPARATION`` (box-scaled) to each
    other or to a point in ``exclude`` are dropped; the best ``max_count``
    remaining are returned.
    """
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    d = len(lower)
    width = upper - lower
    acq = Acquisition(model, meas, kind, samples, wm)
    n_starts = n_starts or 10 * d
    starts = lower + width * qmc.Halton(d, seed=seed).random(n_starts)
    start_vals = acq.log_values(starts)
    h = 1e-5 * width
    offsets = np.concatenate([np.zeros((1, d)), np.diag(h), -np.diag(h)])

    def fun(x):
        pts = np.clip(x + offsets, lower, upper)
        v = acq.log_values(pts)
        if not np.isfinite(v[0]):
            return 1e10, np.zeros(d)
        span = pts[1 : d + 1] - pts[d + 1 :]
        g = np.where(np.isfinite(v[1 : d + 1] - v[d + 1 :]), (v[1 : d + 1] - v[d + 1 :]) / np.diag(span), 0.0)
        return -v[0], -g

    found_x, found_v = [], []
    for x0, v0 in zip(starts, start_vals):
        if not np.isfinite(v0):
            continue
        res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=list(zip(lower, upper)))
        v = acq.log_value(res.x)
        if np.isfinite(v):
            found_x.append(np.clip(res.x, lower, upper))
            found_v.append(v)
    order = np.argsort(found_v, kind="stable")[::-1]
    taken: list[np.ndarray] = []
    vals: list[float] = []
    blocked = [] if exclude is None else list(np.atleast_2d(exclude))
    for i in order:
        x = found_x[i]
        if any(np.max(np.abs((x - y) / width)) < CANDIDATE_SEPARATION for y in taken + blocked):
            continue
        taken.append(x)
        vals.append(found_v[i])
        if len(taken) == max_count:
            break
    if not taken:
        return CandidateSet(np.zeros((0, d)), np.zeros(0))
    return CandidateSet(np.array(taken), np.array(vals))


class FrozenMeanObjective:
    """``log (1/N) sum_p e(p)`` as a function of per-point work, mean frozen.

    Points with zero work are absent from the design (infinite tolerance).
    The GP system is written with noise precisions ``lam = w^(2/q)`` as
    ``I + c S K S`` (``S = sqrt(lam)``), which stays well posed as ``w -> 0``.
    """

    def __init__(self, model: SurrogateModel, points, meas: Measurement, kind, samples, wm: WorkModel):
        self.kernel = model.kernel
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        self.mean, _ = model.predict_batch(self.samples)
        self.meas, self.kind, self.q = meas, kind, wm.exponent
        self.K = self.kernel.corr(self.points, self.points)
        self.Ks = self.kernel.corr(self.points, self.samples)
        self._cache: tuple | None = None

    def variances(self, w) -> tuple[np.ndarray, np.ndarray]:
        """Predictive variances ``(N, m)`` and ``dvar/dlam`` ``(m, n, N)``."""
        w = np.maximum(np.asarray(w, dtype=float), 0.0)
        S = w ** (1.0 / self.q)
        n, N = self.Ks.shape
        c = self.kernel.variances
        var = np.empty((N, len(c)))
        dvar = np.empty((len(c), n, N))
        SK = S[:, None] * self.Ks
        small = S < 1e-3 * max(S.max(), 1e-300)
        for j, cj in enumerate(c):
            B = np.eye(n) + cj * (S[:, None] * self.K * S[None, :])
            L = linalg.cholesky(B, lower=True, check_finite=False)
            Z = linalg.solve_triangular(L, SK, lower=True, check_finite=False)
            var[:, j] = cj - cj * cj * np.sum(Z * Z, axis=0)
            u = linalg.solve_triangular(L, Z, lower=True, trans="T", check_finite=False)
            r = np.empty_like(u)
            big = ~small
            r[big] = u[big] / S[big, None]
            if np.any(small):
                r[small] = self.Ks[small] - cj * self.K[small] @ (S[:, None] * u)
            dvar[j] = -cj * cj * r * r
        return np.maximum(var, 0.0), dvar

    def __call__(self, w) -> tuple[float, np.ndarray]:
        w = np.asarray(w, dtype=float)
        if self._cache is not None and np.array_equal(self._cache[0], w):
            return self._cache[1], self._cache[2]
        var, dvar = self.variances(w)
        log_e, dlog = log_indicator_diag(self.kind, self.meas, self.mean, var)
        lse = logsumexp(log_e)
        f = float(lse - np.log(len(log_e)))
        if not np.isfinite(lse):
            grad = np.zeros_like(w)
        else:
            omega = np.exp(log_e - lse)  # (N,)
            dlam = np.einsum("n,nj,jin->i", omega, dlog, dvar)
            q = self.q
            w_eff = np.maximum(w, 1e-12 * max(w.max(), 1.0))
            grad = dlam * (2.0 / q) * w_eff ** (2.0 / q - 1.0)
        self._cache = (w.copy(), f, grad)
        return f, grad

    def value(self, w) -> float:
        return self(w)[0]


def _project(x, lo, cap):
    x = np.maximum(x, lo)
    if x.sum() > cap:
        extra = x - lo
        room = cap - lo.sum()
        x = lo + extra * (max(room, 0.0) / extra.sum()) * (1 - 1e-12)
    return x


def optimize_tolerances(
    old: Design,
    cands,
    budget: float,
    model: SurrogateModel,
    meas: Measurement,
    kind,
    samples,
    wm: WorkModel,
    tol_default: float,
    seed=None,
    n_starts: int = 4,
    maxiter: int = 200,
    min_work: float | None = None,
) -> ToleranceVector:
    """Spend at most ``budget`` extra work on refining ``old`` and adding candidates.

    Solved with SLSQP in work coordinates, where the budget is a linear
    constraint; the best of several feasible starts is kept and never worse
    than leaving the design unchanged. Candidates ending below ``min_work``
    (default ``W(10 * tol_default)``) are excluded.
    """
    cand_pts = cands.points if isinstance(cands, CandidateSet) else np.atleast_2d(cands)
    cand_pts = cand_pts.reshape(-1, old.dim)
    s, r = len(old), len(cand_pts)
    w_old = np.asarray(wm.work_of_tol(old.tolerances), dtype=float).reshape(s)
    noop = np.concatenate([old.tolerances, np.full(r, np.inf)])
    pts = np.concatenate([old.points, cand_pts])
    obj = FrozenMeanObjective(model, pts, meas, kind, samples, wm)
    lo = np.concatenate([w_old, np.zeros(r)])
    f_noop = obj.value(lo)
    if not budget > 0 or s + r == 0:
        return ToleranceVector(noop, s, f_noop, f_noop)

    w_ref = float(wm.work_of_tol(tol_default))
    # shave a relative 1e-10 off so round-off never overspends
    cap = (budget * (1 - 1e-10) + w_old.sum()) / w_ref
    lo_x = lo / w_ref
    n = s + r

    def fun(x):
        f, g = obj(x * w_ref)
        return f, g * w_ref

    cons = [{"type": "ineq", "fun": lambda x: cap - x.sum(), "jac": lambda x: -np.ones_like(x)}]
    bounds = list(zip(lo_x, np.full(n, cap)))
    room = cap - lo_x.sum()
    starts = []
    if r:
        x0 = lo_x.copy()
        x0[s:] += 0.999 * room / r
        starts.append(x0)
    u = qmc.Halton(n, seed=seed).random(max(n_starts - len(starts), 1)) + 1e-3
    for ui in u:
        starts.append(lo_x + 0.999 * room * ui / ui.sum())
    best_x, best_f = lo_x, f_noop
    for x0 in starts:
        with warnings.catch_warnings():
            # SLSQP clips its own out-of-bounds steps; the result is projected below anyway
            warnings.filterwarnings("ignore", "Values in x were outside bounds", RuntimeWarning)
            res = optimize.minimize(
                fun, x0, jac=True, method="SLSQP", bounds=bounds, constraints=cons,
                options={"maxiter": maxiter, "ftol": 1e-8},
            )
        x = _project(np.minimum(res.x, cap), lo_x, cap)
        f = obj.value(x * w_ref)
        if f < best_f:
            best_x, best_f = x, f

    w = best_x * w_ref
    if min_work is None:
        min_work = float(wm.work_of_tol(EXCLUDE_FACTOR * tol_default))
    w_c = w[s:]
    w_c[w_c < min_work] = 0.0
    w_o = w[:s]
    w_o[w_o < w_old * (1 + REFINE_MIN_STEP)] = w_old[w_o < w_old * (1 + REFINE_MIN_STEP)]
    w = np.concatenate([w_o, w_c])
    tol = np.concatenate([old.tolerances.copy(), np.full(r, np.inf)])
    upd = w[:s] > w_old
    tol[:s][upd] = wm.tol_of_work(w[:s][upd])
    acc = w[s:] > 0
    tol[s:][acc] = wm.tol_of_work(w[s:][acc])
    return ToleranceVector(tol, s, obj.value(w), f_noop)


def apply_design_update(
    data: TrainingData, tv: ToleranceVector, cand_points, evaluator: SimulatedEvaluator
) -> tuple[TrainingData, int]:
    """Evaluate refined old points and accepted candidates.

    Returns the new training data and the number of model evaluations.
    Refined points keep their position in the design; their value is
    replaced by the new, more accurate evaluation.
    """
    pts = data.points.copy()
    tol = data.tolerances.copy()
    vals = data.values.copy()
    n_eval = 0
    for i in np.nonzero(tv.old < tol)[0]:
        tol[i] = tv.old[i]
        vals[i] = evaluator.evaluate(pts[i], tol[i])
        n_eval += 1
    cand_points = np.atleast_2d(cand_points).reshape(-1, data.design.dim)
    new_p, new_t, new_v = [], [], []
    for p, t in zip(cand_points, tv.candidates):
        if np.isfinite(t):
            new_p.append(p)
            new_t.append(t)
            new_v.append(evaluator.evaluate(p, t))
            n_eval += 1
    if new_p:
        pts = np.concatenate([pts, np.array(new_p)])
        tol = np.concatenate([tol, np.array(new_t)])
        vals = np.concatenate([vals, np.array(new_v)])
    return TrainingData(Design(pts, tol), vals), n_eval
