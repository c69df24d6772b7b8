class RefsepError(Exception):
    """Base class for package errors."""


class InvalidInputError(RefsepError, ValueError):
    """Raised when an operation receives input violating its preconditions."""
