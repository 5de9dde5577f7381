"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation and contract violations
exit with 2, everything else (IO, runtime) with 1.
"""


class SemitokError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(SemitokError):
    """A config, spec, or argument value is out of contract.

    The message always names the offending field or key.
    """


class ContractError(SemitokError):
    """An operation was called with mode/shape/state it does not support."""


class FormatError(SemitokError):
    """An on-disk artifact violates its documented binary or text format."""
