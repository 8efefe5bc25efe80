"""Exception hierarchy shared by all modules."""

from __future__ import annotations

import numpy as np


class EMFGError(Exception):
    """Base class for every error raised by this package."""


class ModelError(EMFGError, ValueError):
    """A model or its constants violate a structural invariant."""


class GridError(EMFGError, ValueError):
    """Grid parameters violate the grid invariants."""


class ModelEvaluationError(EMFGError, ArithmeticError):
    """An evaluator produced a non-finite value or was called outside its domain."""

    def __init__(self, message, evaluator=None, point=None):
        super().__init__(message)
        self.evaluator = evaluator
        self.point = point


class InversionError(ModelEvaluationError):
    """H(x, p, .) = s has no admissible root (density below floor or bracket failure).

    ``index`` holds the positions (within the evaluated batch) that failed;
    callers that know the grid replace it with node coordinates.
    """

    def __init__(self, message, index=None, x=None, p=None, s=None, node=None):
        super().__init__(message, evaluator="H_inverse")
        self.index = None if index is None else np.atleast_1d(index)
        self.x = x
        self.p = p
        self.s = s
        self.node = node


class CoercivityError(InversionError):
    """Bracket expansion failed: the model is not coercive in m at this point."""


class BoundRangeError(EMFGError, ValueError):
    """A composed inverse of the bound functions is undefined at its argument."""


class NewtonError(EMFGError):
    """Base class for Newton failures; always carries the last iterate."""

    def __init__(self, message, u=None, report=None):
        super().__init__(message)
        self.u = u
        self.report = report


class MaxIterationsError(NewtonError):
    pass


class StepUnderflowError(NewtonError):
    """Armijo backtracking fell below the minimum step."""


class LinearSolveError(NewtonError):
    pass


class NewtonInversionError(NewtonError):
    """The iterate handed to Newton is not admissible (H-inversion fails)."""


class ContinuationStall(EMFGError):
    """dtheta underflow: the continuation cannot advance past ``theta``."""

    def __init__(self, message, theta, u, trace):
        super().__init__(message)
        self.theta = theta
        self.u = u
        self.trace = trace


class ConfigError(EMFGError, ValueError):
    """Invalid or unparsable run configuration."""
