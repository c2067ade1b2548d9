"""Exception types raised across the package."""


class AssemblyError(Exception):
    """Base class for all package errors."""


class DimensionError(AssemblyError, ValueError):
    pass


class ContractError(AssemblyError, ValueError):
    """A precondition of an operation was violated."""


class GenerationError(AssemblyError, RuntimeError):
    pass


class DatasetParseError(AssemblyError, ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte offset {offset}: {message}")
        self.path = path
        self.offset = offset


class ConfigError(AssemblyError, ValueError):
    pass


class CheckpointError(AssemblyError, ValueError):
    pass


class TrainingError(AssemblyError, RuntimeError):
    pass
