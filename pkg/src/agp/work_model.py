"""Cost of evaluations as a function of tolerance, and budget schedules.

Work follows the asymptotic adaptive-FE estimate ``W(tau) = tau^-q`` with
``q = l / r`` (spatial dimension over polynomial degree). An excluded
evaluation has ``tau = inf`` and costs nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .gp_core import Design


class RefinementError(ValueError):
    """A design does not refine the one it is compared against."""


@dataclass(frozen=True)
class WorkModel:
    exponent: float = 1.0

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError("work exponent must be positive")

    def work_of_tol(self, tol):
        tol = np.asarray(tol, dtype=float)
        if np.any(tol <= 0):
            raise ValueError("tolerance must be positive")
        with np.errstate(divide="ignore"):
            out = np.where(np.isinf(tol), 0.0, tol ** -self.exponent)
        return out if out.ndim else float(out)

    def tol_of_work(self, w):
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0):
            raise ValueError("work must be positive")
        out = w ** (-1.0 / self.exponent)
        return out if out.ndim else float(out)

    def dtol_dwork(self, w):
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0):
            raise ValueError("work must be positive")
        q = self.exponent
        out = -(1.0 / q) * w ** (-1.0 / q - 1.0)
        return out if out.ndim else float(out)


def work_of_tol(wm: WorkModel, tol):
    return wm.work_of_tol(tol)


def tol_of_work(wm: WorkModel, w):
    return wm.tol_of_work(w)


def dtol_dwork(wm: WorkModel, w):
    return wm.dtol_dwork(w)


def design_work(wm: WorkModel, design: Design) -> float:
    return float(np.sum(wm.work_of_tol(design.tolerances)))


def is_refinement(new: Design, old: Design, atol: float = 1e-12) -> bool:
    """True when every old point is present in ``new`` with no larger tolerance."""
    for p, tau in zip(old.points, old.tolerances):
        dist = np.linalg.norm(new.points - p, axis=1) if len(new) else np.array([])
        hits = np.nonzero(dist <= atol)[0]
        if len(hits) == 0 or new.tolerances[hits].min() > tau * (1 + 1e-12):
            return False
    return True


def refinement_cost(wm: WorkModel, new: Design, old: Design) -> float:
    if not is_refinement(new, old):
        raise RefinementError("new design does not refine the old one")
    return design_work(wm, new) - design_work(wm, old)


def schedule(kind: str, base: float, J: int, ratio: float = 1.0) -> list[float]:
    """Per-iteration budget increments.

    ``constant``: ``base`` every iteration. ``geometric``: ``ratio^(j-1) * base``.
    For the experiments ``base`` is ``c * tau_default^-q`` (constant) or
    ``tau_default^-q`` (geometric).
    """
    if J < 1:
        raise ValueError("need at least one iteration")
    if kind == "constant":
        return [float(base)] * J
    if kind == "geometric":
        return [float(base * ratio**j) for j in range(J)]
    raise ValueError(f"unknown schedule kind {kind!r}")


def geometric_ratio_for_total(J: int, total_units: float) -> float:
    """Ratio ``a`` with ``sum_{j<J} a^j = total_units`` (``total_units >= J``)."""
    if total_units < J:
        raise ValueError("total must be at least J base units")
    if np.isclose(total_units, J):
        return 1.0
    f = lambda a: np.sum(a ** np.arange(J)) - total_units
    return float(brentq(f, 1.0 + 1e-12, 10.0))
