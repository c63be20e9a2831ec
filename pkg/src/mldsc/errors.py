"""Exception hierarchy shared by all modules."""

from __future__ import annotations

import numpy as np


class MldscError(Exception):
    """Base class for every error raised by this package."""


class AssemblyError(MldscError, ValueError):
    """Inconsistent block dimensions or controller indices while building a problem."""


class ProblemValidationError(MldscError, ValueError):
    """A solver was handed a problem that fails :func:`mldsc.model.validate_problem`."""

    def __init__(self, report):
        self.report = report
        lines = "\n".join(f"  - {v}" for v in report.violations)
        super().__init__(f"invalid problem:\n{lines}")


class IntegrationError(MldscError, ArithmeticError):
    """Non-finite value produced while integrating an ODE."""

    def __init__(self, message: str, node: int | None = None, step: int | None = None):
        self.node = node
        self.step = step
        super().__init__(message)


class SingularityError(MldscError, np.linalg.LinAlgError):
    """A covariance block stayed singular after jitter escalation."""


class RangeError(MldscError, ValueError):
    """Time outside the trajectory horizon."""


class ContractError(MldscError, ValueError):
    """Argument does not match an operation's contract (shapes, index sets, information sets)."""


class EstimationError(MldscError):
    """Monte Carlo estimate could not be formed (e.g. every sample diverged)."""
