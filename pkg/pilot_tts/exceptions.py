"""
PilotTTS core exceptions.

These exceptions are documented in README.md. Classes that can reach the
command line carry an ``exit_code`` used by ``ptts.main()``.
"""

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DEPENDENCY = 3
EXIT_DATA = 4


class PilotTTSError(Exception):
    """Base class for every error raised by this package."""

    exit_code = EXIT_DATA


# Numerics

class ShapeError(PilotTTSError, ValueError):
    """Operand extents do not match the operation's contract."""


class ContractError(PilotTTSError):
    """A documented precondition was violated (e.g. non-scalar loss)."""


class NumericalError(PilotTTSError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class RangeError(PilotTTSError, ValueError):
    """A value lies outside its documented range."""


# Audio

class EmptyInputError(PilotTTSError, ValueError):
    """The input is too short to produce a single frame."""


class DurationError(PilotTTSError, ValueError):
    """The audio is shorter than the minimum duration an operation needs."""


class NotEstimableError(PilotTTSError):
    """The quantity cannot be estimated from this signal (e.g. SNR of pure silence)."""


class UndefinedRolloffError(PilotTTSError):
    """Spectral rolloff of a silent signal is undefined."""


class AudioReadError(PilotTTSError, IOError):
    """A WAV file could not be read or is in an unsupported format."""


# Data / configuration

class VocabError(PilotTTSError, KeyError):
    """Unknown language, emotion or marker tag."""

    exit_code = EXIT_USAGE

    def __str__(self):
        return str(self.args[0]) if self.args else ''


class ConfigurationError(PilotTTSError):
    """Invalid configuration or corpus layout (e.g. a singleton speaker)."""

    exit_code = EXIT_USAGE


class ManifestError(PilotTTSError):
    """A manifest line could not be parsed."""

    def __init__(self, message: str, line_number: int = 0):
        super().__init__(f'line {line_number}: {message}' if line_number else message)
        self.line_number = line_number


class CheckpointError(PilotTTSError):
    """A checkpoint file is malformed or does not match the model."""


class DependencyError(PilotTTSError):
    """A required upstream artifact (usually a checkpoint) is missing."""

    exit_code = EXIT_DEPENDENCY

    def __init__(self, message: str, stage: str = ''):
        super().__init__(message)
        self.stage = stage
