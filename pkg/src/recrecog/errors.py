"""Exception hierarchy shared by all recrecog modules."""


class RecrecogError(Exception):
    """Base class for all package errors."""


class ConfigError(RecrecogError, ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class RangeError(RecrecogError, ValueError):
    """A year (or similar bounded quantity) falls outside the declared range."""


class NodeLookupError(RecrecogError, LookupError):
    """An author/paper/topic id does not exist in the graph or view."""


class IntegrityError(RecrecogError, ValueError):
    """A structural invariant is violated (dangling edge, duplicate id, ...)."""


class ParseError(RecrecogError, ValueError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message, line_no=None, path=None):
        self.line_no = line_no
        self.path = path
        loc = ""
        if path is not None:
            loc += f"{path}:"
        if line_no is not None:
            loc += f"line {line_no}: "
        super().__init__(loc + message)


class DomainError(RecrecogError, ValueError):
    """A numeric argument lies outside the mathematical domain of an operation."""


class TrainingError(RecrecogError, RuntimeError):
    """Training produced a non-finite quantity or otherwise failed."""


class HindsightUnavailableError(RecrecogError, RuntimeError):
    """The predictive (hindsight) recommender was requested but the graph
    holds no data for the following year."""


class GridError(RecrecogError, RuntimeError):
    """Too many recognition-grid cells failed to produce a usable report."""


class IdentificationError(RecrecogError, RuntimeError):
    """A report row has no successful cell to identify a recommender from."""
