"""Exception classes shared across the package."""


class InvalidInputError(ValueError):
    """An operation received inputs that violate its contract."""


class NumericalError(RuntimeError):
    """A linear system was too ill-conditioned to solve reliably."""


class TrainingError(RuntimeError):
    """Model training cannot proceed, e.g. an expert range without samples."""


class FileFormatError(RuntimeError):
    """A data file does not conform to its documented format."""
