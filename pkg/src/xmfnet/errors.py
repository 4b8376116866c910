"""Exception types shared across the package."""


class XMFError(Exception):
    """Base class for all package errors."""


class DimensionError(XMFError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(XMFError, RuntimeError):
    """An operation was called outside its contract (non-scalar loss, missing grad, ...)."""


class SizeError(XMFError, ValueError):
    """A requested cardinality cannot be produced from the input."""


class ConfigError(XMFError, ValueError):
    """Invalid configuration value."""


class IngestionError(XMFError, IOError):
    """A dataset file is missing or corrupt."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class SchemaError(XMFError, ValueError):
    """Loaded data does not match the expected schema."""


class DivergenceError(XMFError, FloatingPointError):
    """Training produced a non-finite loss."""
