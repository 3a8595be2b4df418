"""Exception hierarchy shared by every module."""

from __future__ import annotations


class OrdegradeError(Exception):
    """Base class for all package errors."""


class ZeroNormError(OrdegradeError, ValueError):
    pass


class LengthMismatchError(OrdegradeError, ValueError):
    pass


class NonFiniteInputError(OrdegradeError, ValueError):
    pass


class AntipodalInputsError(OrdegradeError, ValueError):
    pass


class EmptyInputError(OrdegradeError, ValueError):
    pass


class NonPositiveTemperatureError(OrdegradeError, ValueError):
    pass


class ConstantInputError(OrdegradeError, ValueError):
    pass


class ImageTooSmallError(OrdegradeError, ValueError):
    pass


class InvalidQualityError(OrdegradeError, ValueError):
    pass


class InvalidRecipeError(OrdegradeError, ValueError):
    pass


class EmptyCorpusError(OrdegradeError, ValueError):
    pass


class IOFailure(OrdegradeError, OSError):
    pass


class OutOfRangeError(OrdegradeError, ValueError):
    pass


class InvalidGapError(OrdegradeError, ValueError):
    pass


class ShapeMismatchError(OrdegradeError, ValueError):
    pass


class KeyMismatchError(OrdegradeError, KeyError):
    pass


class NonFiniteLossError(OrdegradeError, FloatingPointError):
    def __init__(self, message: str, batch_id: str | None = None):
        super().__init__(message)
        self.batch_id = batch_id


class EmptyDatasetError(OrdegradeError, ValueError):
    pass


class InvalidCheckpointError(OrdegradeError, ValueError):
    pass


class IndexOutOfRangeError(OrdegradeError, IndexError):
    pass
