"""Shared exception types.

Every failure mode raised on purpose by this package uses one of these, so
callers (and the CLI exit-code logic) can distinguish contract violations
from genuine bugs.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes; message names both."""


class MaskError(ValueError):
    """An attention mask leaves a query row with no visible key."""


class ContextLengthError(ValueError):
    """A token sequence exceeds the model's context window."""


class TemplateError(ValueError):
    """A caption/question template references an unknown slot."""


class GenerationError(ValueError):
    """A prompt references no known object and no renderable attributes."""


class TrainingError(RuntimeError):
    """A training run diverged or failed its convergence check."""


class ConfigError(ValueError):
    """A run config is malformed (unknown key, invalid value, bad combo)."""


class FormatError(ValueError):
    """A checkpoint file is malformed; message includes the byte offset."""


class MeasurementError(RuntimeError):
    """A timing measurement came back degenerate (eg. all zeros)."""


class MissingCheckpointError(LookupError):
    """An ablation cell needs a trained component that was not supplied."""
