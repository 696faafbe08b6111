"""Exception hierarchy with machine-readable error categories.

Each category maps to a distinct process exit code so callers can tell
apart malformed inputs, contract violations, and numerical failures.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"
    exit_code = 1


class ParseError(PipelineError):
    """An input file is missing, truncated, or structurally malformed."""

    category = "parse"
    exit_code = 2


class ValidationError(PipelineError):
    """Inputs parse fine but violate a documented contract or invariant."""

    category = "validation"
    exit_code = 3


class NumericError(PipelineError):
    """A numerical procedure failed to converge or produced non-finite values."""

    category = "numeric"
    exit_code = 4
