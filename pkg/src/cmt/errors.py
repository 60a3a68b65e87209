"""Exception types shared across the package."""


class CMTError(Exception):
    """Base class for all package errors."""


class DimensionError(CMTError, ValueError):
    pass


class ContractError(CMTError, ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(CMTError, FloatingPointError):
    pass


class DatasetFormatError(CMTError, ValueError):
    pass


class CheckpointError(CMTError, ValueError):
    pass


class ConfigError(CMTError, ValueError):
    pass


class TrainingDiverged(CMTError, RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path
