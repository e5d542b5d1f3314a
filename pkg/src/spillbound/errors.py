"""Exception hierarchy.

Validation problems (bad input, bad configuration) derive from
:class:`ValidationError`; failures that arise while computing (singular
designs, divergent simulations, too little data) derive from
:class:`NumericalError`. The command line maps the two families to
distinct exit codes.
"""

from __future__ import annotations


class SpillboundError(Exception):
    """Base class for all package errors."""


class ValidationError(SpillboundError, ValueError):
    """Input or configuration violates a documented invariant."""


class ParseError(ValidationError):
    """A file could not be parsed.

    Parameters
    ----------
    message : str
        Human readable description.
    line : int, optional
        1-based line number of the offending record.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(SpillboundError, ArithmeticError):
    """A computation failed or produced unusable output."""


class SingularityError(NumericalError):
    """Evaluation at a point source of a Green's function."""


class SingularDesignError(NumericalError):
    """Regression design has no usable variation."""


class InsufficientDataError(NumericalError):
    """Filtered estimation sample is too small.

    Parameters
    ----------
    message : str
        Description.
    count : int
        Number of usable observations.
    """

    def __init__(self, message: str, count: int):
        self.count = count
        super().__init__(f"{message} (usable observations: {count})")


class SimulationDivergedError(NumericalError):
    """Knowledge stock overflowed during simulation."""


class DecayAssumptionViolated(NumericalError):
    """Estimated decay rates are not positive, so boundaries do not exist."""


class StageError(NumericalError):
    """Wraps a failure inside one pipeline stage.

    Parameters
    ----------
    stage : str
        Stage label, e.g. ``"stage2_spatial"``.
    cause : Exception
        Original error.
    """

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")


class MonteCarloAborted(NumericalError):
    """More than the allowed share of Monte Carlo replications failed.

    Parameters
    ----------
    message : str
    failures : dict
        Failure message to count.
    """

    def __init__(self, message: str, failures: dict[str, int]):
        self.failures = dict(failures)
        detail = "; ".join(f"{k} (x{v})" for k, v in sorted(self.failures.items(), key=lambda kv: -kv[1])[:5])
        super().__init__(f"{message}: {detail}" if detail else message)
