"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class TableLookupError(IndexError):
    """Raised when an index falls outside an embedding table or vocabulary."""


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class ParseError(ValueError):
    """Raised for malformed input files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VocabularyError(ValueError):
    """Raised when a data value is not present in the configured vocabulary."""


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration entries."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file is corrupt or incompatible."""


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""
