"""Exception hierarchy shared by all dbpnet modules.

Every user-facing failure maps to one of these so the CLI can print a
stable, greppable error code instead of a stack trace.
"""


class DbpnetError(Exception):
    """Base class; `code` is the stable machine-readable identifier."""

    code = "error"


class ContractError(DbpnetError):
    """A documented precondition was violated by the caller."""

    code = "contract-error"


class DimensionError(ContractError):
    """Tensor/matrix shapes do not chain."""

    code = "dimension-error"


class NumericError(DbpnetError):
    """Non-finite values where finite ones are required."""

    code = "numeric-error"


class ConfigError(DbpnetError):
    """Bad or unknown configuration key/value."""

    code = "config-error"


class IoError(DbpnetError):
    """File system problem surfaced with its path."""

    code = "io-error"


class ParseError(DbpnetError):
    """Malformed input file; message carries path and line number."""

    code = "parse-error"


class UnsupportedFormatError(ParseError):
    """File is recognizably the wrong flavor (e.g. binary PLY)."""

    code = "unsupported-format"


class TrainingDivergedError(DbpnetError):
    """Loss became non-finite during optimization."""

    code = "training-diverged"
