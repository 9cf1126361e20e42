"""Exception types shared across the pipeline; the HTTP layer maps them to statuses."""


class InvalidArgumentError(ValueError):
    """A parameter or input payload violates a documented precondition."""


class NotFoundError(LookupError):
    """Dataset, scale, chunk, annotation layer, or revision does not exist."""


class ConflictError(Exception):
    """Compare-and-set failure: the caller's base revision is no longer the head."""

    def __init__(self, message: str, head: int | None = None):
        super().__init__(message)
        self.head = head


class PreconditionFailedError(Exception):
    """An operation's data requirements are unmet (e.g. too few labels to retrain)."""

    def __init__(self, message: str, counts: dict | None = None):
        super().__init__(message)
        self.counts = dict(counts) if counts else {}


class BatchJobError(RuntimeError):
    """The whole batch job failed (every block errored)."""
