"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Argument violates a documented precondition."""


class FormatError(ValueError):
    """A file on disk does not match the expected layout."""

    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class SplitError(ValueError):
    """A dataset cannot be split as requested."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")


class SearchFailure(RuntimeError):
    """Rank search could not place a candidate inside the target band.

    ``best`` holds the best candidate seen, ``trace`` the per-level log.
    """

    def __init__(self, message, best=None, trace=None):
        self.best = best
        self.trace = trace if trace is not None else []
        super().__init__(message)


class ConfigError(ValueError):
    """Pipeline configuration or command-line usage is invalid."""
