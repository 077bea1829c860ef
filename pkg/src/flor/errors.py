class FlorError(Exception):
    """Base class for errors raised by flor."""


class ProjectNotFound(FlorError):
    pass


class UnknownArg(FlorError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown arg in history"


class ArgParseError(FlorError, ValueError):
    pass


class MissingCheckpoint(FlorError):
    """Raised when a replay needs a checkpoint that the store does not hold.

    ``alternative`` names the cheapest scan that can still run.
    """

    def __init__(self, message: str, alternative: str | None = None):
        if alternative:
            message = f"{message} (try {alternative!r} instead)"
        super().__init__(message)
        self.alternative = alternative


class DuplicateCheckpoint(FlorError):
    pass


class RegistrationError(FlorError, TypeError):
    pass


class MalformedLogfile(FlorError, ValueError):
    pass


class BackfillConflict(FlorError):
    pass


class PredicateError(FlorError, ValueError):
    pass


class UnknownColumn(PredicateError):
    def __init__(self, column: str):
        super().__init__(f"unknown column {column!r}")
        self.column = column


class ProfileMissing(FlorError):
    pass


class UnalignableVersion(FlorError):
    pass


class VersionNotFound(FlorError, LookupError):
    pass
