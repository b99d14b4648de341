"""Exception taxonomy shared by every stage and by the CLI error codes."""


class I2IKitError(Exception):
    """Base class for all package errors."""

    code = "E_INTERNAL"


class ConfigurationError(I2IKitError):
    """Invalid spec, config value, or stage wiring."""

    code = "E_CONFIG"


class DataError(I2IKitError):
    """Bad or missing dataset content (empty class, label out of range, ...)."""

    code = "E_DATA"


class ShapeError(I2IKitError):
    """Tensor or pyramid shape mismatch; the message names the offending level."""

    code = "E_SHAPE"


class UsageError(I2IKitError):
    """API misuse, e.g. a conditional network called without class labels."""

    code = "E_USAGE"


class NumericalError(I2IKitError):
    """Non-finite loss or diverged computation; aborts the current step."""

    code = "E_NUMERIC"


class CheckpointError(I2IKitError):
    """Checkpoint missing, malformed, or incompatible with the requested nets."""

    code = "E_CHECKPOINT"


class SealedDataError(I2IKitError):
    """A dataset read was attempted inside a stage that must consume no data."""

    code = "E_SEALED"
