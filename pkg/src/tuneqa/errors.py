"""Exception types shared across the package.

The CLI maps these onto stable exit codes: usage errors exit 1,
ConfigError/CheckpointError exit 2, InputError exit 3, BackendError exit 4.
"""


class TuneqaError(Exception):
    """Base class for all package errors."""


class InputError(TuneqaError):
    """User-supplied data is invalid (bad audio, malformed records, ...)."""


class ConfigError(TuneqaError):
    """Configuration is inconsistent with itself or with the data."""


class CheckpointError(ConfigError):
    """Checkpoint file is unreadable, the wrong version, or mismatched."""


class NumericError(TuneqaError):
    """Non-finite values appeared where finite numbers are required."""


class ResampleRequiredError(InputError):
    """Clip sample rate is not supported by the encoder; resample first."""


class ParseError(TuneqaError):
    """LLM backend output could not be parsed; carries the raw text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class BackendError(TuneqaError):
    """The LLM backend failed (transport, HTTP error, bad payload)."""


class GenerationError(TuneqaError):
    """QA generation for one track failed after retries; carries the id."""

    def __init__(self, message: str, track_id: str):
        super().__init__(message)
        self.track_id = track_id


class NonFiniteLossError(NumericError):
    """Training loss went non-finite; carries step index and batch ids."""

    def __init__(self, message: str, step: int, batch_ids: list):
        super().__init__(message)
        self.step = step
        self.batch_ids = batch_ids
