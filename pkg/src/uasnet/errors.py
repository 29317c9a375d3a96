"""Exception hierarchy shared by all modules."""


class UASNetError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(UASNetError, ValueError):
    """Arguments violate an operation's preconditions (shape, range, count)."""


class EmptyRegionError(InvalidInputError):
    """A density estimate was requested over a region with no pixels."""


class DataError(UASNetError):
    """A dataset, sample or manifest on disk is malformed."""


class CorruptSampleError(DataError):
    """A sample file is truncated, unreadable or inconsistent with its metadata."""


class TrainingDivergedError(UASNetError, RuntimeError):
    """A loss term became non-finite during optimisation."""

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})
