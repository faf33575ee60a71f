"""Exception types raised by the public API.

Each error class marks a distinct failure contract so callers can tell
config mistakes from bad inputs from upstream component failures.
"""


class FacePersonaError(Exception):
    """Base class for all package errors."""


class ConfigError(FacePersonaError, ValueError):
    """Invalid configuration (bad depth set, width mismatch, unknown kind)."""


class InputShapeError(FacePersonaError, ValueError):
    """An array/tensor input does not match the expected shape."""


class TimestepError(FacePersonaError, ValueError):
    """Timestep outside the scheduler range."""


class TemplateError(FacePersonaError, ValueError):
    """Prompt template missing or duplicating the identifier placeholder."""


class SequenceLengthError(FacePersonaError, ValueError):
    """Token sequence exceeds the text encoder's maximum length."""


class SamplingError(FacePersonaError, ValueError):
    """Triplet sampling could not be satisfied (e.g. identity with one image)."""


class EmptyInputError(FacePersonaError, ValueError):
    """An operation that requires non-empty score/feature lists got none."""


class NumericError(FacePersonaError, ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


class ExpressionExtractionError(FacePersonaError, RuntimeError):
    """The expression extractor failed on an input image."""


class MissingReferenceError(FacePersonaError, ValueError):
    """Expression-conditional path invoked without a reference feature."""


class InputQualityError(FacePersonaError, ValueError):
    """The *input* (reference) image failed feature extraction.

    Distinct from the 0.0 no-face fallback, which applies only to
    generated images.
    """


class ManifestError(FacePersonaError, ValueError):
    """Dataset manifest missing or malformed; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(FacePersonaError, ValueError):
    """Checkpoint file corrupt, wrong magic, or unsupported version."""


class StageError(FacePersonaError, RuntimeError):
    """A pipeline stage failed; names the stage and wraps the cause."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
