"""Affine-invariant ensemble MCMC and the sliding-window sample chain.

Walkers are split into two halves; each half is updated against the frozen
complementary half, so proposals for a half can be evaluated in one batched
call of the log density. Each walker picks one of two moves:

* differential evolution (probability ``DE_WEIGHT``):
  ``y = x + gamma * (x_r1 - x_r2) + jitter * N(0, I)``, ``gamma = 2.38 / sqrt(2 d)``,
  a symmetric proposal;
* stretch: ``y = x_j + z (x - x_j)`` with ``g(z) ~ 1/sqrt(z)`` on ``[1/a, a]``,
  accepted with ``z^(d-1) pi(y) / pi(x)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bayes import Measurement, PriorBox, log_posterior_batch

DE_WEIGHT = 0.9
STRETCH_A = 2.0
DE_JITTER = 1e-5


class ChainClampWarning(UserWarning):
    pass


def n_walkers(d: int) -> int:
    return 2 * max(2 * (d + 1), 16)


@dataclass
class Ensemble:
    walkers: np.ndarray
    logp: np.ndarray
    rng: np.random.Generator = field(repr=False)
    n_accepted: int = 0
    n_proposed: int = 0
    n_nan: int = 0

    def __post_init__(self):
        if len(self.walkers) < 4 or len(self.walkers) % 2:
            raise ValueError("ensemble needs an even number (>= 4) of walkers")

    @property
    def dim(self) -> int:
        return self.walkers.shape[1]

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_proposed if self.n_proposed else float("nan")

    def retarget(self, logpdf) -> "Ensemble":
        """Same walker positions, log density recomputed for a new target."""
        return Ensemble(self.walkers.copy(), logpdf(self.walkers), self.rng)


def init_ensemble(logpdf, lower, upper, n: int, rng, points=None) -> Ensemble:
    """Walkers drawn uniformly in the box, or resampled from ``points`` if given."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    if points is not None and len(points) >= n:
        idx = rng.choice(len(points), size=n, replace=False)
        W = np.array(points, dtype=float)[idx]
    else:
        W = lower + (upper - lower) * rng.random((n, len(lower)))
    return Ensemble(W, logpdf(W), rng)


def stretch_log_z_density(z, a: float = STRETCH_A):
    """Log density of the stretch factor, ``g(z) = 1 / (sqrt(z) * norm)`` on ``[1/a, a]``."""
    z = np.asarray(z, dtype=float)
    norm = 2.0 * (np.sqrt(a) - 1.0 / np.sqrt(a))
    inside = (z >= 1.0 / a) & (z <= a)
    with np.errstate(divide="ignore"):
        return np.where(inside, -0.5 * np.log(z) - np.log(norm), -np.inf)


def stretch_log_accept(z, d: int, lp_x, lp_y):
    """Log acceptance probability of a stretch proposal."""
    with np.errstate(invalid="ignore"):
        return np.minimum(0.0, (d - 1) * np.log(z) + lp_y - lp_x)


def metropolis_log_accept(lp_x, lp_y):
    with np.errstate(invalid="ignore"):
        return np.minimum(0.0, lp_y - lp_x)


def de_log_proposal_density(x, y, complement, gamma: float, jitter: float) -> float:
    """Log density of the DE proposal ``x -> y`` given the complementary walkers."""
    C = np.asarray(complement, dtype=float)
    d = C.shape[1]
    diffs = (C[:, None, :] - C[None, :, :])[~np.eye(len(C), dtype=bool)]
    r = np.asarray(y) - np.asarray(x) - gamma * diffs
    logs = -0.5 * np.sum(r * r, axis=1) / jitter**2 - d * np.log(jitter * np.sqrt(2 * np.pi))
    mx = logs.max()
    return float(mx + np.log(np.mean(np.exp(logs - mx))))


def _update_half(ens: Ensemble, logpdf, active, comp):
    rng = ens.rng
    X = ens.walkers[active]
    C = ens.walkers[comp]
    k, d = X.shape
    nc = len(C)
    use_de = rng.random(k) < DE_WEIGHT
    # stretch
    z = ((STRETCH_A - 1.0) * rng.random(k) + 1.0) ** 2 / STRETCH_A
    anchor = C[rng.integers(nc, size=k)]
    Y_st = anchor + z[:, None] * (X - anchor)
    # differential evolution
    r1 = rng.integers(nc, size=k)
    r2 = (r1 + rng.integers(1, nc, size=k)) % nc
    gamma = 2.38 / math.sqrt(2 * d)
    Y_de = X + gamma * (C[r1] - C[r2]) + DE_JITTER * rng.standard_normal((k, d))
    Y = np.where(use_de[:, None], Y_de, Y_st)
    lp_y = np.asarray(logpdf(Y), dtype=float)
    lp_x = ens.logp[active]
    log_acc = np.where(use_de, metropolis_log_accept(lp_x, lp_y), stretch_log_accept(z, d, lp_x, lp_y))
    nan = np.isnan(lp_y) | np.isnan(log_acc)
    log_acc = np.where(nan, -np.inf, log_acc)
    accept = np.log(rng.random(k)) < log_acc
    ens.n_nan += int(nan.sum())
    ens.n_proposed += k
    ens.n_accepted += int(accept.sum())
    idx = np.asarray(active)[accept]
    ens.walkers[idx] = Y[accept]
    ens.logp[idx] = lp_y[accept]


def ensemble_step(ens: Ensemble, logpdf) -> Ensemble:
    """One sweep over both halves; returns a new ensemble sharing the RNG stream."""
    out = Ensemble(ens.walkers.copy(), ens.logp.copy(), ens.rng, ens.n_accepted, ens.n_proposed, ens.n_nan)
    n = len(out.walkers)
    first, second = np.arange(n // 2), np.arange(n // 2, n)
    _update_half(out, logpdf, first, second)
    _update_half(out, logpdf, second, first)
    return out


def run(ens: Ensemble, logpdf, n_samples: int, warmup: int = 0) -> tuple[np.ndarray, Ensemble]:
    """Warm up, then collect walker states sweep by sweep until ``n_samples`` are gathered."""
    for _ in range(warmup):
        ens = ensemble_step(ens, logpdf)
    if n_samples <= 0:
        return np.zeros((0, ens.dim)), ens
    n_sweeps = -(-n_samples // len(ens.walkers))
    out = []
    for _ in range(n_sweeps):
        ens = ensemble_step(ens, logpdf)
        out.append(ens.walkers.copy())
    return np.concatenate(out)[:n_samples], ens


def draw(meas: Measurement, prior: PriorBox, model, n: int, warmup: int, e0: Ensemble):
    """Samples from the surrogate posterior of ``model``; ``e0`` is retargeted first."""

    def logpdf(P):
        return log_posterior_batch(meas, prior, model, P)

    return run(e0.retarget(logpdf), logpdf, n, warmup)


def integrated_autocorr_time(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time of a 1D series (Sokal's adaptive window)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    if acf[0] == 0:
        return 1.0
    acf /= acf[0]
    taus = 2.0 * np.cumsum(acf) - 1.0
    window = np.arange(n) < c * taus
    M = int(np.argmin(window)) if not window.all() else n - 1
    return float(max(taus[M], 1.0))


# --- sliding-window chain --------------------------------------------------


@dataclass(frozen=True)
class SampleChain:
    samples: np.ndarray
    births: np.ndarray

    def __len__(self) -> int:
        return len(self.births)

    @classmethod
    def empty(cls, d: int) -> "SampleChain":
        return cls(np.zeros((0, d)), np.zeros(0, dtype=int))


def update_chain(chain: SampleChain, new, h: int, iteration: int = 0) -> SampleChain:
    """Drop the ``h`` oldest samples and append ``new`` tagged with ``iteration``."""
    new = np.asarray(new, dtype=float).reshape(-1, chain.samples.shape[1])
    if h > len(chain):
        warnings.warn(f"discard count {h} exceeds chain length {len(chain)}; discarding all", ChainClampWarning)
        h = len(chain)
    births = np.concatenate([chain.births[h:], np.full(len(new), iteration, dtype=int)])
    return SampleChain(np.concatenate([chain.samples[h:], new]), births)


@dataclass(frozen=True)
class SampleSchedule:
    """Quadratic growth of draws/discards from the first to the last iteration.

    ``n_j = n_first + (n_last - n_first) ((j-1)/J)^2`` and likewise for
    ``h_j`` with ``h_1 = 0``; with ``every=2`` only odd ``j`` draw/discard.
    """

    n_first: int
    n_last: int
    h_first: int
    h_last: int
    J: int
    every: int = 1

    def counts(self, j: int) -> tuple[int, int]:
        if not 1 <= j <= self.J + 1:
            raise ValueError(f"iteration {j} outside 1..{self.J + 1}")
        if self.every > 1 and (j - 1) % self.every:
            return 0, 0
        frac = ((j - 1) / self.J) ** 2
        n = int(round(self.n_first + (self.n_last - self.n_first) * frac))
        h = 0 if j == 1 else int(round(self.h_first + (self.h_last - self.h_first) * frac))
        return n, h

    def scaled(self, factor: float, J: int | None = None) -> "SampleSchedule":
        r = lambda v: int(round(v * factor))
        return SampleSchedule(r(self.n_first), r(self.n_last), r(self.h_first), r(self.h_last), J or self.J, self.every)


PAPER_SCHEDULES = {
    "synthetic2d": SampleSchedule(1600, 16000, 1600, 8000, 13),
    "diffusion3d": SampleSchedule(2400, 24000, 2400, 12000, 15),
    "poisson4d": SampleSchedule(3200, 32000, 3200, 15000, 20, every=2),
}


def sample_schedule(problem: str, j: int) -> tuple[int, int]:
    return PAPER_SCHEDULES[problem].counts(j)
