"""Exception types shared across pcvox."""


class PcvoxError(Exception):
    """Base class for all pcvox errors."""


class PlyParseError(PcvoxError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormatError(PcvoxError):
    pass


class IntegrityError(PcvoxError):
    """Raised when a decoded structure is internally inconsistent."""


class TruncatedStreamError(IntegrityError):
    """Raised when a decoder reads past the end of its payload."""


class CheckpointMismatchError(PcvoxError):
    pass


class ConfigurationError(PcvoxError):
    pass


class TrainingDivergedError(PcvoxError):
    pass
