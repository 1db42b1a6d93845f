"""Exception types shared across the package.

Every error that a caller is expected to branch on gets its own class; the
CLI maps them onto its stable exit codes.
"""


class SdanetError(Exception):
    """Base class for all package errors."""


class ShapeError(SdanetError, ValueError):
    """Tensor shapes are inconsistent with an op's contract."""


class WindowTooShortError(ShapeError):
    """A convolution (or its stack) would produce a non-positive time extent."""


class BatchNormStatsError(SdanetError, RuntimeError):
    """Eval-mode batch norm was asked to run with uninitialized running stats."""


class SamplingError(SdanetError, RuntimeError):
    """Window sampling could not satisfy its constraints."""


class ZeroVarianceError(SdanetError, ValueError):
    """A signal that must be standardized has (numerically) zero variance."""


class UnsupportedRateError(SdanetError, ValueError):
    """Resampling was requested for a rate that is not an integer multiple of 64 Hz."""


class FormatError(SdanetError, ValueError):
    """A serialized container is malformed.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(SdanetError, ValueError):
    """A run configuration key is unknown or has an invalid value."""


class TrainingAbort(SdanetError, RuntimeError):
    """Training stopped because of a non-finite gradient or an I/O failure."""
