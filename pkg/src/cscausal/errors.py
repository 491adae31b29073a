"""Exception types raised across the package."""

from __future__ import annotations

import numpy as np


class CsCausalError(Exception):
    """Base class for all package errors."""


class DimensionError(CsCausalError, ValueError):
    pass


class NotPSDError(CsCausalError, ValueError):
    pass


class DataError(CsCausalError, ValueError):
    """Invalid or incomplete input data."""


class SpecificationError(CsCausalError, ValueError):
    """Incompatible or malformed model/estimator specification."""


class NumericDomainError(CsCausalError, ArithmeticError):
    """Non-finite value or overflow while evaluating an estimating function."""

    def __init__(self, message: str, theta=None, observation: int | None = None):
        if theta is not None:
            message = f"{message} (theta={np.array2string(np.asarray(theta), precision=6)})"
        if observation is not None:
            message = f"{message} [observation {observation}]"
        super().__init__(message)
        self.theta = None if theta is None else np.asarray(theta).copy()
        self.observation = observation


class VarianceError(CsCausalError, np.linalg.LinAlgError):
    def __init__(self, message: str, condition_number: float = np.inf):
        super().__init__(f"{message} (condition number {condition_number:.3g})")
        self.condition_number = condition_number


class DivergentCorrectionError(CsCausalError, ArithmeticError):
    """The corrected-score integral does not exist for the given inputs."""


class InfeasibleErrorVarianceError(CsCausalError, ValueError):
    """Assumed measurement-error variance exceeds the observed residual variance."""


class InsufficientReplicatesError(CsCausalError, ValueError):
    pass


class CollinearityError(CsCausalError, np.linalg.LinAlgError):
    pass


class DegenerateStratumError(CsCausalError, ValueError):
    pass


class SimexError(CsCausalError, RuntimeError):
    def __init__(self, message: str, lam: float, replicate: int):
        super().__init__(f"{message} (lambda={lam}, b={replicate})")
        self.lam = lam
        self.replicate = replicate
