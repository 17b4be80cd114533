"""
Error types raised across the CLIPin pipeline.
"""

from typing import Any, Dict, Optional


class CLIPinError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CLIPinError, ValueError):
    pass


class UsageError(CLIPinError):
    pass


# numerics
class ShapeMismatch(CLIPinError, ValueError):
    pass


class ZeroNormRow(CLIPinError, ValueError):
    pass


class NotScalar(CLIPinError, ValueError):
    pass


class NonFiniteValue(CLIPinError, ValueError):
    pass


# model / data
class TokenOutOfRange(CLIPinError, ValueError):
    pass


class PadOnlySequence(CLIPinError, ValueError):
    pass


class OutOfRangePixels(CLIPinError, ValueError):
    pass


class BatchTooSmall(CLIPinError, ValueError):
    pass


class EmptyDataset(CLIPinError, ValueError):
    pass


class MalformedRecord(CLIPinError, ValueError):
    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


# losses
class NonPositiveTau(CLIPinError, ValueError):
    pass


class MissingComponent(CLIPinError, ValueError):
    pass


# training
class NonFiniteLoss(CLIPinError, FloatingPointError):
    def __init__(self, step: int, diagnostics: Optional[Dict[str, Any]] = None):
        self.step = step
        self.diagnostics = diagnostics or {}
        super().__init__(f"non-finite loss at step {step}: {self.diagnostics}")


class CheckpointFormatError(CLIPinError, ValueError):
    pass


# evaluation
class DegenerateClass(CLIPinError, ValueError):
    pass


class SingleClass(CLIPinError, ValueError):
    pass


class NoPositives(CLIPinError, ValueError):
    pass


class EmptyPrompts(CLIPinError, ValueError):
    pass


# orchestration
class TrainingStepError(CLIPinError):
    """A step failed; wraps the underlying error with the step index."""

    def __init__(self, step: int, cause: BaseException):
        self.step = step
        self.cause = cause
        super().__init__(f"training failed at step {step}: {cause}")


class GradientMismatch(CLIPinError):
    pass
