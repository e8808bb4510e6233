"""Exception hierarchy shared by all modules.

The CLI maps each class to a distinct exit code.
"""


class MitokitError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigError(MitokitError, ValueError):
    """Invalid parameters or run configuration."""


class DataError(MitokitError, ValueError):
    """Input data that cannot be parsed or is semantically unusable."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(MitokitError, ValueError):
    """A referential or domain invariant would be violated."""

    def __init__(self, message: str, offending_id: str | None = None):
        self.offending_id = offending_id
        super().__init__(message)


class PartialFailure(MitokitError):
    """Some work items failed while the rest completed.

    ``failures`` maps the failed item id to a description.
    """

    def __init__(self, message: str, failures: dict[str, str]):
        self.failures = dict(failures)
        super().__init__(message)
