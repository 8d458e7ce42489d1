"""Exception types shared across the package."""


class GpregError(Exception):
    """Base class for all errors raised by this package."""


class PreconditionError(GpregError, ValueError):
    """An input violates a documented precondition (bad dims, bad config,
    malformed file).  The CLI maps this to exit code 2."""


class NonFiniteLossError(GpregError):
    """The optimization produced a non-finite loss or gradient.  Carries the
    step logs accumulated so far.  The CLI maps this to exit code 3."""

    def __init__(self, message, logs=None):
        super().__init__(message)
        self.logs = list(logs) if logs is not None else []
