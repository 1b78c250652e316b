"""Shared exception types. The CLI maps these onto exit codes."""


class InputError(ValueError):
    """An argument or data structure violates a documented precondition."""


class ParseError(ValueError):
    """A file could not be parsed; the message carries path and line number."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


class UsageError(Exception):
    """Bad command-line usage (unknown task, missing prerequisite artifact)."""
