"""Exception types shared across the toolkit."""


class NldhError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(NldhError):
    """An image or array is too small or has the wrong number of channels."""


class ShapeMismatchError(NldhError):
    """A latent, message, or logits array does not match the expected shape."""


class PayloadCorruptError(NldhError):
    """An entropy-coded payload failed to decode losslessly.

    ``offset`` is the byte position at which decoding gave up: the number of
    consumed payload bytes for truncation, or the checksum position for a
    content mismatch detected at the end.
    """

    def __init__(self, message: str, offset: int = -1):
        super().__init__(message)
        self.offset = offset


class CodecMismatchError(NldhError):
    """A container or checkpoint references a different codec than supplied."""


class TrainingDivergedError(NldhError):
    """Training hit a non-finite loss; carries the recent loss trace."""

    def __init__(self, message: str, loss_trace=None):
        super().__init__(message)
        self.loss_trace = list(loss_trace or [])


class ConfigError(NldhError):
    """A config file or CLI argument is invalid or references missing paths."""


class PerceptualBackendUnavailable(NldhError):
    """The requested perceptual-metric backend cannot be constructed here."""
