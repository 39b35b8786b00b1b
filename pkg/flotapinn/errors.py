"""Exception hierarchy shared by every flotapinn module."""


class FlotationError(RuntimeError):
    """Base class for every domain failure raised by flotapinn."""


class ConfigurationError(FlotationError):
    """Invalid or unreadable configuration."""


class UsageError(FlotationError, ValueError):
    """An API or command was called with arguments it cannot accept."""


class AutodiffDomainError(FlotationError):
    """A taped operation left its mathematical domain (e.g. division by zero)."""


class DataError(FlotationError):
    """Numeric data unusable for the requested computation."""


class FormatError(FlotationError):
    """A file does not follow the expected layout."""


class ScalingError(FlotationError):
    """Min-max scaling requested for a constant column."""


class SimulationError(FlotationError):
    """The ODE integration produced a non-finite state."""


class EvaluationError(FlotationError):
    """Metrics cannot be computed on the given data."""


class TrainingError(FlotationError):
    """Training aborted.

    Args:
        message: Human readable diagnostic
        step: Optimizer step at which the failure happened, if known
        term: Offending loss term ("data" or "residual"), if known
        parameter_index: Index of the offending parameter, if known
    """

    def __init__(
        self,
        message: str,
        step: int | None = None,
        term: str | None = None,
        parameter_index: int | None = None,
    ) -> None:
        super().__init__(message)
        self.step = step
        self.term = term
        self.parameter_index = parameter_index
