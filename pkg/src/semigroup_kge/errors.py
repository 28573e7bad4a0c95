"""Exception hierarchy shared across the package.

Every error raised by this package derives from :class:`KgeError`, so the
CLI can map any failure onto a single-line, greppable ``error[<class>]:``
diagnostic and a nonzero exit code.
"""


class KgeError(Exception):
    """Base class for all package errors."""

    cli_class = "error"


class DataError(KgeError):
    """A data file could not be read."""

    cli_class = "data"


class ParseError(KgeError):
    """A line in a data file is malformed (carries path and line number)."""

    cli_class = "parse"


class VocabularyError(KgeError):
    """A name is unknown under a frozen vocabulary."""

    cli_class = "vocab"


class ValidationError(KgeError):
    """Input values violate a documented precondition."""

    cli_class = "validation"


class ContractError(KgeError):
    """An operation was called with incompatible shapes or variants."""

    cli_class = "contract"


class ConfigError(KgeError):
    """A config file or override is invalid."""

    cli_class = "config"


class CheckpointError(KgeError):
    """A checkpoint file is unreadable, corrupted, or of the wrong format."""

    cli_class = "checkpoint"


class DivergenceError(KgeError):
    """Training produced non-finite parameters."""

    cli_class = "divergence"


class LockError(KgeError):
    """Another process owns the requested output directory."""

    cli_class = "lock"
