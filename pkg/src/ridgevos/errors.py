"""Exception types shared across the package."""

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (pivot {pivot} is non-positive)")


class ConfigError(ValueError):
    """Invalid configuration, e.g. a split count that does not divide C."""


class DomainError(ValueError):
    """Input value outside the allowed domain."""


class SpecError(ValueError):
    """Invalid synthetic video specification."""


class MalformedFileError(ValueError):
    """A NetPBM file or dataset layout could not be parsed."""


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass
