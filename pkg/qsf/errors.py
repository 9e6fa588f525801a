# /qsf/errors.py

"""Exception hierarchy shared by every QSF module.

Each class maps to a stable command-line exit code (see ``qsf.cli.exit_code_for``).
"""


class QSFError(Exception):
    """Base class for all errors raised by the qsf package."""


class DimensionError(QSFError, ValueError):
    """Operands have inconsistent or unsupported shapes."""


class RangeError(QSFError, ValueError):
    """A value lies outside the range an operation can represent or accept."""


class NumericError(QSFError, ArithmeticError):
    """A numerical procedure failed to converge or produced non-finite values."""


class ConditioningError(NumericError):
    """A matrix that must be inverted is singular to working precision."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{k}={v:.3e}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in sorted(self.diagnostics.items()))
        return f"{base} ({details})"


class UnknownOpError(QSFError, KeyError):
    """The tape was asked to run an op kind that is not registered."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown op"


class ConfigError(QSFError, ValueError):
    """A run configuration is invalid. ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class FormatError(QSFError):
    """A file on disk does not have the expected layout."""


class TransferError(QSFError):
    """Parameters could not be transferred between stages."""

    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class TrainingDivergedError(QSFError):
    """Training produced a non-finite loss. Carries the last good checkpoint."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
