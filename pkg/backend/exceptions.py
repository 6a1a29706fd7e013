# backend/exceptions.py
# Error kinds raised by the engine. Service-level commands catch these and
# turn them into {"status": "error", ...} results and process exit codes.


class AecError(ValueError):
    """Base class for every error raised by the echo-cancellation engine."""


class EmptyInputError(AecError):
    """Input too short to form a single analysis frame or block."""


class ShapeError(AecError):
    """Array shapes, frame counts or bin counts do not agree."""


class ConfigurationError(AecError):
    """Invalid parameters, unsupported sample rate or inconsistent pipeline options."""


class ProcessingError(AecError):
    """Numerical failure during processing (NaN input, non-finite state)."""


class ModelLoadError(AecError):
    """Post-filter weights missing, malformed or not matching the architecture."""


class AudioIOError(AecError):
    """WAV file unreadable, unwritable, multichannel or at an unsupported rate."""
