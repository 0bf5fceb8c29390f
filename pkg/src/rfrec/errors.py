"""Exception types raised across the package."""


class RFRecError(Exception):
    """Base class for all package errors."""


class ShapeError(RFRecError, ValueError):
    """Array shapes do not agree."""


class DegenerateClientError(RFRecError, ValueError):
    """A client has no observed ratings."""


class NoParticipantsError(RFRecError):
    """An aggregation was attempted with an empty cohort."""


class InvalidProbabilityError(RFRecError, ValueError):
    """A probability parameter lies outside the open interval (0, 1)."""


class DivergenceError(RFRecError, FloatingPointError):
    """Non-finite values appeared during training."""

    def __init__(self, client: int, iteration: int, what: str = "parameters"):
        self.client = client
        self.iteration = iteration
        super().__init__(
            f"non-finite {what} for client {client} at iteration {iteration}"
        )


class ConvergenceError(RFRecError):
    """An iterative solver exhausted its budget before meeting its tolerance."""


class DataFormatError(RFRecError, ValueError):
    """A ratings file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
