"""Error types shared across the package.

Plain ValueError covers invalid arguments; the classes here mark conditions a
caller may want to distinguish: state misuse, capacity shortfalls, unreadable
files, and metrics that are undefined on the given inputs.
"""


class StateError(RuntimeError):
    """An operation was called in a state that cannot serve it."""


class CapacityError(ValueError):
    """A requested sample budget exceeds what the source pool can supply."""


class ParseError(ValueError):
    """A data file failed to parse; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or inconsistent with its header."""


class UndefinedMetricError(ValueError):
    """A metric has no value on the given inputs (e.g. empty class group)."""
