"""Tolerance-aware adaptive GP surrogates for Bayesian inverse problems.

The package couples a heteroscedastic GP surrogate of an expensive forward
model with ensemble MCMC on the surrogate posterior, and spends a work
budget on new or more accurate forward evaluations where an error model
says they help most.
"""

from .bayes import Measurement, PriorBox
from .error_models import ErrorKind
from .forward_models import SimulatedEvaluator, make_model
from .gp_core import Design, Kernel, SurrogateModel, TrainingData, fit
from .work_model import WorkModel

__all__ = [
    "Design", "ErrorKind", "Kernel", "Measurement", "PriorBox", "SimulatedEvaluator",
    "SurrogateModel", "TrainingData", "WorkModel", "fit", "make_model",
]
__version__ = "0.1.0"
