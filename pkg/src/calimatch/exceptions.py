"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class CaliMatchError(Exception):
    exit_code = 1


class ConfigError(CaliMatchError, ValueError):
    """Invalid configuration, dimension mismatch, or schema violation."""

    exit_code = 3

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ":\n  " + "\n  ".join(self.problems)
        super().__init__(message)


class DomainError(CaliMatchError, ValueError):
    """A value lies outside the domain an operation accepts."""

    exit_code = 3


class NumericError(CaliMatchError, ArithmeticError):
    """Non-finite values appeared in logits or losses."""

    exit_code = 5


class IngestionError(CaliMatchError, IOError):
    exit_code = 4


class InvariantError(CaliMatchError, RuntimeError):
    """An internal invariant was violated (a bug, not a user error)."""
