"""Ground-truth error metrics of a surrogate posterior.

Only computable because the test forward models are analytic. For ``d <= 2``
both posteriors are integrated on a two-level midpoint grid; for ``d >= 3``
the true posterior is represented by exact-model MCMC samples and the two
evidences are estimated by importance sampling from a defensive mixture of
a Gaussian fitted to those samples and the uniform prior.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .bayes import Measurement, PriorBox, exact_log_posterior, log_posterior_batch
from .sampler import ensemble_step, init_ensemble, n_walkers

RELIABILITY_LIMIT = 0.1
IS_GAUSS_WEIGHT = 0.8
IS_INFLATE = 1.2


@dataclass(frozen=True)
class MetricEstimate:
    value: float
    stderr: float
    reliable: bool = True


def grid_quadrature(logf, lower, upper, n_coarse: int = 200, refine: int = 4, drop: float = 25.0):
    """Two-level midpoint rule over a box (``d <= 2``).

    Cells whose centre value is within ``drop`` of the maximum (and their
    neighbours) are split into ``refine^d`` subcells. Returns
    ``(points, log_volumes, logf_values, log_Z, rel_err)`` where ``rel_err``
    compares against the same scheme with ``refine // 2``.
    """
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    d = len(lower)
    if d > 2:
        raise ValueError("grid quadrature is only used for d <= 2")
    h = (upper - lower) / n_coarse
    axes = [lower[a] + h[a] * (np.arange(n_coarse) + 0.5) for a in range(d)]
    centres = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    lf = logf(centres)
    mx = np.max(lf)
    if not np.isfinite(mx):
        raise FloatingPointError("integrand vanishes on the whole grid")
    mark = (lf > mx - drop).reshape((n_coarse,) * d)
    grown = mark.copy()
    for shift in itertools.product((-1, 0, 1), repeat=d):
        grown |= np.roll(mark, shift, axis=tuple(range(d)))
    grown = grown.reshape(-1)
    log_vol = np.sum(np.log(h))

    def level(k):
        sub = h / k
        offs = np.stack(
            np.meshgrid(*[(np.arange(k) + 0.5) * sub[a] - h[a] / 2 for a in range(d)], indexing="ij"), axis=-1
        ).reshape(-1, d)
        pts = (centres[grown][:, None, :] + offs[None, :, :]).reshape(-1, d)
        return pts, np.full(len(pts), log_vol - d * np.log(k))

    pts_f, lv_f = level(refine)
    keep = ~grown
    points = np.concatenate([centres[keep], pts_f])
    log_vol_all = np.concatenate([np.full(keep.sum(), log_vol), lv_f])
    vals = np.concatenate([lf[keep], logf(pts_f)])
    log_Z = logsumexp(vals + log_vol_all)
    pts_c, lv_c = level(max(refine // 2, 1))
    log_Z_half = logsumexp(np.concatenate([lf[keep] + log_vol, logf(pts_c) + lv_c]))
    rel_err = float(abs(np.expm1(log_Z_half - log_Z)))
    return points, log_vol_all, vals, float(log_Z), rel_err


@dataclass(frozen=True)
class TruthReference:
    """Weighted representation of the exact posterior.

    ``weights`` sum to one (normalized quadrature weights or ``1/N``).
    ``log_pi`` is the unnormalized exact log posterior at ``points``.
    """

    method: str  # "grid" | "samples"
    points: np.ndarray
    weights: np.ndarray
    y_exact: np.ndarray
    log_pi: np.ndarray
    log_Z: float
    log_Z_relerr: float
    is_points: np.ndarray | None = None
    is_logq: np.ndarray | None = None

    def save(self, path) -> None:
        arrays = {k: v for k, v in self.__dict__.items() if isinstance(v, np.ndarray)}
        np.savez(path, method=self.method, log_Z=self.log_Z, log_Z_relerr=self.log_Z_relerr, **arrays)

    @classmethod
    def load(cls, path) -> "TruthReference":
        z = np.load(path, allow_pickle=False)
        kw = {k: z[k] for k in z.files if k not in ("method", "log_Z", "log_Z_relerr")}
        return cls(str(z["method"]), log_Z=float(z["log_Z"]), log_Z_relerr=float(z["log_Z_relerr"]), **kw)


def _mixture(mu, cov, prior: PriorBox):
    L = np.linalg.cholesky(cov)
    log_det = 2 * np.log(np.diag(L)).sum()
    d = len(mu)

    def logq(P):
        z = np.linalg.solve(L, (P - mu).T)
        lg = -0.5 * (np.sum(z * z, 0) + d * np.log(2 * np.pi) + log_det)
        lu = np.where(prior.contains(P), -np.log(prior.volume), -np.inf)
        return np.logaddexp(np.log(IS_GAUSS_WEIGHT) + lg, np.log(1 - IS_GAUSS_WEIGHT) + lu)

    def draw(n, rng):
        n_g = rng.binomial(n, IS_GAUSS_WEIGHT)
        g = mu + rng.standard_normal((n_g, d)) @ L.T
        u = prior.lower + (prior.upper - prior.lower) * rng.random((n - n_g, d))
        return np.concatenate([g, u])

    return logq, draw


def _is_log_evidence(log_target, P, logq):
    lw = log_target - logq
    n = len(lw)
    log_Z = logsumexp(lw) - np.log(n)
    w = np.exp(lw - logsumexp(lw))
    # relative standard error of the IS mean
    rel = float(np.sqrt(max(n * np.sum(w * w) - 1.0, 0.0) / n))
    return float(log_Z), rel


def reference_from_samples(samples, forward, meas: Measurement, prior: PriorBox, rng, n_is: int = 20000):
    samples = np.atleast_2d(samples)
    logpost = exact_log_posterior(meas, prior, forward)
    mu = samples.mean(0)
    cov = np.atleast_2d(np.cov(samples.T)) * IS_INFLATE**2 + 1e-12 * np.eye(samples.shape[1])
    logq, draw = _mixture(mu, cov, prior)
    P = draw(n_is, rng)
    lq = logq(P)
    log_Z, rel = _is_log_evidence(logpost(P), P, lq)
    return TruthReference(
        "samples", samples, np.full(len(samples), 1.0 / len(samples)), forward(samples),
        logpost(samples), log_Z, rel, P, lq,
    )


def build_reference(
    forward, meas: Measurement, prior: PriorBox, rng, n_samples: int = 20000,
    n_coarse: int = 200, refine: int = 4, thin: int = 10, warmup: int = 500,
) -> TruthReference:
    d = prior.dim
    logpost = exact_log_posterior(meas, prior, forward)
    if d <= 2:
        pts, lv, vals, log_Z, rel = grid_quadrature(logpost, prior.lower, prior.upper, n_coarse, refine)
        lw = vals + lv - log_Z
        keep = lw > np.log(1e-16)
        w = np.exp(lw[keep])
        return TruthReference("grid", pts[keep], w / w.sum(), forward(pts[keep]), vals[keep], log_Z, rel)
    ens = init_ensemble(logpost, prior.lower, prior.upper, n_walkers(d), rng)
    for _ in range(warmup):
        ens = ensemble_step(ens, logpost)
    out, total = [], 0
    while total < n_samples:
        for _ in range(thin):
            ens = ensemble_step(ens, logpost)
        out.append(ens.walkers.copy())
        total += len(ens.walkers)
    return reference_from_samples(np.concatenate(out)[:n_samples], forward, meas, prior, rng)


def reference_key(model_id: str, meas: Measurement, seed, extra: dict | None = None) -> str:
    h = hashlib.sha256()
    h.update(model_id.encode())
    h.update(np.ascontiguousarray(meas.y_m, dtype=np.float64).tobytes())
    h.update(repr(float(meas.noise_std)).encode())
    h.update(json.dumps({"seed": seed, **(extra or {})}, sort_keys=True).encode())
    return h.hexdigest()[:24]


def cached_reference(cache_dir, model_id, forward, meas, prior, seed, **kw) -> TruthReference:
    """Build once per (model, measurement, seed) and store under a content hash."""
    path = Path(cache_dir) / f"ref_{reference_key(model_id, meas, seed, kw)}.npz"
    if path.exists():
        return TruthReference.load(path)
    ref = build_reference(forward, meas, prior, np.random.default_rng(seed), **kw)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    ref.save(tmp)
    tmp.replace(path)
    return ref


def metric_L2(ref: TruthReference, model) -> MetricEstimate:
    """Posterior-weighted squared 2-norm error of the surrogate mean."""
    ybar, _ = model.predict_batch(ref.points)
    err = np.sum((ref.y_exact - ybar) ** 2, axis=1)
    val = float(np.sum(ref.weights * err))
    if ref.method == "grid":
        return MetricEstimate(val, 0.0)
    return MetricEstimate(val, float(err.std(ddof=1) / np.sqrt(len(err))))


def _surrogate_logpdf(model, meas, prior):
    return lambda P: log_posterior_batch(meas, prior, model, P)


def metric_KL(ref: TruthReference, model, meas: Measurement, prior: PriorBox, n_coarse: int = 200, refine: int = 4) -> MetricEstimate:
    """KL divergence of the surrogate posterior from the exact one."""
    logpd = _surrogate_logpdf(model, meas, prior)
    if ref.method == "grid":
        _, _, _, log_Zd, rel = grid_quadrature(logpd, prior.lower, prior.upper, n_coarse, refine)
        log_pi = ref.log_pi - ref.log_Z
        val = float(np.sum(ref.weights * (log_pi - logpd(ref.points))) + log_Zd)
        err = rel + ref.log_Z_relerr
        return MetricEstimate(val, err, err <= RELIABILITY_LIMIT)
    log_Zd, rel = _is_log_evidence(logpd(ref.is_points), ref.is_points, ref.is_logq)
    diff = ref.log_pi - logpd(ref.points)
    val = float(diff.mean() - ref.log_Z + log_Zd)
    se = float(np.sqrt(diff.var(ddof=1) / len(diff) + rel**2 + ref.log_Z_relerr**2))
    reliable = rel <= RELIABILITY_LIMIT and ref.log_Z_relerr <= RELIABILITY_LIMIT
    return MetricEstimate(val, se, reliable)
