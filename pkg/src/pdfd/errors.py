"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``NumericalError`` and
``TrainingAborted`` exit with 3, everything else derived from ``PDFDError``
exits with 2.
"""


class PDFDError(Exception):
    """Base class for all package errors."""


class DimensionError(PDFDError, ValueError):
    """Operand shapes do not conform."""


class DomainError(PDFDError, ValueError):
    """Operand outside the domain of a primitive (log/sqrt of non-positive)."""


class UsageError(PDFDError, ValueError):
    """API called in a way its contract forbids."""


class ConfigError(PDFDError, ValueError):
    """Invalid configuration value or key."""


class DataError(PDFDError, ValueError):
    """Dataset or split violates its invariants."""


class FormatError(PDFDError, ValueError):
    """Malformed feature or checkpoint file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(PDFDError, FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


class TrainingAborted(PDFDError):
    """Training stopped on a non-finite loss."""

    def __init__(self, component, epoch, iteration, detail=""):
        msg = f"non-finite value in {component} at epoch {epoch}, iteration {iteration}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.component = component
        self.epoch = epoch
        self.iteration = iteration
