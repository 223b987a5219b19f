class PGGCNError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(PGGCNError, ValueError):
    pass


class ConfigurationError(PGGCNError, ValueError):
    pass


class DataError(PGGCNError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class MetadataError(DataError):
    pass


class GradientCheckError(PGGCNError, RuntimeError):
    pass


class TrainingDiverged(PGGCNError, RuntimeError):
    """Raised when the loss becomes non-finite; carries the last good checkpoint."""

    def __init__(self, message, epoch=None, checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint


class DegenerateSkeletonWarning(UserWarning):
    pass
