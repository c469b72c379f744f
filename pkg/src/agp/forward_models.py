"""Analytic forward maps and a tolerance-limited evaluator.

Three test problems are provided, selected by string id:

``synthetic2d``
    Linear map plus an oscillatory term, ``[-1/2, 1/2]^2 -> R^3``.
``diffusion3d``
    Heat kernel of a point source at ``x0``, sampled at 3 times and 6 axis
    sensors, ``[-1, 1]^3 -> R^18``. Output order is time-major: all six
    sensors at ``t=0.5``, then ``t=0.7``, then ``t=1``. Sensor order is
    ``+x, -x, +y, -y, +z, -z``.
``poisson4d``
    Dipole potential ``-log|x - x1| + log|x - x2|`` at 12 unit-circle sensors
    (angle index order), parameter ``(x1, x2)`` in ``[-1, 1]^4``.

A real solver is replaced by :class:`SimulatedEvaluator`, which returns the
exact value plus independent Gaussian noise of standard deviation ``tol``
per output component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class DomainError(ValueError):
    """Raised when a forward model is evaluated outside its domain."""


class InvalidToleranceError(ValueError):
    """Raised for non-positive evaluation tolerances."""


_SYN_K = np.array([0.0, 10.0, 20.0])
SYNTHETIC_MATRIX = np.column_stack([np.sin(_SYN_K) + np.cos(_SYN_K), np.sin(_SYN_K) - np.cos(_SYN_K)])

DIFFUSION_TIMES = np.array([0.5, 0.7, 1.0])
DIFFUSION_SENSORS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float
)

_ANGLES = 2.0 * np.pi * np.arange(12) / 12.0
POISSON_SENSORS = np.column_stack([np.cos(_ANGLES), np.sin(_ANGLES)])


def _as_batch(p, d):
    arr = np.asarray(p, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != d:
        raise DomainError(f"expected parameter dimension {d}, got {arr.shape[-1]}")
    return arr, single


def eval_synthetic_2d(p):
    """Synthetic 2D -> 3D map. Accepts a point ``(2,)`` or a batch ``(N, 2)``."""
    P, single = _as_batch(p, 2)
    if np.any(np.abs(P) > 0.5 + 1e-12):
        raise DomainError("synthetic2d is defined on [-1/2, 1/2]^2")
    phi = (np.sin(20 * P[:, 0] - 2) + np.sin(20 * P[:, 1] - 2)) / 10.0
    out = P @ SYNTHETIC_MATRIX.T + phi[:, None]
    return out[0] if single else out


def diffusion_kernel(t, x, x0):
    """Fundamental solution of ``u_t = Laplace(u)`` in R^3 for a unit source at ``x0``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("diffusion kernel requires t > 0")
    r2 = np.sum((np.asarray(x, dtype=float) - np.asarray(x0, dtype=float)) ** 2, axis=-1)
    return (4 * np.pi * t) ** -1.5 * np.exp(-r2 / (4 * t))


def eval_diffusion_3d(x0):
    """Stacked sensor readings (18,) for source position ``x0``; batched over leading axis."""
    X0, single = _as_batch(x0, 3)
    # (N, 1, 6)
    r2 = np.sum((DIFFUSION_SENSORS[None, :, :] - X0[:, None, :]) ** 2, axis=-1)[:, None, :]
    t = DIFFUSION_TIMES[None, :, None]
    out = ((4 * np.pi * t) ** -1.5 * np.exp(-r2 / (4 * t))).reshape(len(X0), 18)
    return out[0] if single else out


def dipole_potential(x, x1, x2):
    """``-log|x - x1| + log|x - x2|`` (Green's functions without the 1/(2 pi) factor)."""
    d1 = np.linalg.norm(np.asarray(x, float) - np.asarray(x1, float), axis=-1)
    d2 = np.linalg.norm(np.asarray(x, float) - np.asarray(x2, float), axis=-1)
    if np.any(d1 == 0) or np.any(d2 == 0):
        raise DomainError("sensor coincides with a point source")
    return -np.log(d1) + np.log(d2)


def eval_poisson_4d(p):
    """Stacked potentials at the 12 circle sensors for ``p = (x1, x2)``."""
    P, single = _as_batch(p, 4)
    S = POISSON_SENSORS[None, :, :]
    out = dipole_potential(S, P[:, None, :2], P[:, None, 2:])
    return out[0] if single else out


@dataclass(frozen=True)
class ForwardModel:
    """An exact forward map on an axis-aligned box."""

    name: str
    lower: np.ndarray
    upper: np.ndarray
    dim_out: int
    fn: Callable = field(repr=False)

    @property
    def dim_param(self) -> int:
        return len(self.lower)

    def contains(self, p) -> np.ndarray | bool:
        P = np.asarray(p, dtype=float)
        return np.all((P >= self.lower) & (P <= self.upper), axis=-1)

    def eval_exact(self, p):
        return self.fn(p)


def make_model(name: str) -> ForwardModel:
    """Look up one of the built-in problems by id."""
    if name == "synthetic2d":
        return ForwardModel(name, np.full(2, -0.5), np.full(2, 0.5), 3, eval_synthetic_2d)
    if name == "diffusion3d":
        return ForwardModel(name, np.full(3, -1.0), np.full(3, 1.0), 18, eval_diffusion_3d)
    if name == "poisson4d":
        return ForwardModel(name, np.full(4, -1.0), np.full(4, 1.0), 12, eval_poisson_4d)
    raise KeyError(f"unknown forward model {name!r}")


MODEL_IDS = ("synthetic2d", "diffusion3d", "poisson4d")


class SimulatedEvaluator:
    """Stand-in for a tolerance-controlled solver.

    Each call returns ``y(p) + eps`` with ``eps ~ N(0, tol^2 I_m)``; the noise
    draws come from the evaluator's own seeded stream, so two evaluators
    built with the same seed produce identical sequences. Not thread-safe.
    """

    def __init__(self, model: ForwardModel, seed=None):
        self.model = model
        self.rng = np.random.default_rng(seed)
        self.n_evaluations = 0

    def evaluate(self, p, tol: float) -> np.ndarray:
        if not np.isfinite(tol) or tol <= 0:
            raise InvalidToleranceError(f"tolerance must be positive and finite, got {tol}")
        p = np.asarray(p, dtype=float)
        if not self.model.contains(p):
            raise DomainError(f"point {p} outside the domain of {self.model.name}")
        y = self.model.eval_exact(p)
        self.n_evaluations += 1
        return y + tol * self.rng.standard_normal(self.model.dim_out)


def eval_with_tolerance(ev: SimulatedEvaluator, p, tol: float) -> np.ndarray:
    return ev.evaluate(p, tol)
