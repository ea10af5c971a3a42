"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, NumericError -> 2,
FormatError and OSError -> 3.
"""


class RdvitError(Exception):
    """Base class for everything raised deliberately by this package."""


class ShapeError(RdvitError, ValueError):
    """Operands have incompatible shapes (broadcasting, matmul, concat...)."""


class DomainError(RdvitError, ValueError):
    """Input outside an op's mathematical domain (log of non-positive, ...)."""


class NumericError(RdvitError, ArithmeticError):
    """A computation produced non-finite values or failed a numeric check."""


class TapeError(RdvitError, RuntimeError):
    """Autodiff tape misuse (double backward without a grad reset, ...)."""


class ConfigError(RdvitError, ValueError):
    """Invalid or inconsistent run configuration."""


class FormatError(RdvitError, ValueError):
    """A serialized artifact (sample, checkpoint, map) failed validation."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
