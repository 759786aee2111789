"""Exception hierarchy shared across the package."""


class CircuitGclError(Exception):
    """Base class for all package errors."""


class DimensionError(CircuitGclError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CircuitGclError, ValueError):
    """A caller violated a documented precondition."""


class NumericError(CircuitGclError):
    """A computation produced or received non-finite values."""


class ConfigError(CircuitGclError, ValueError):
    """A run configuration file or flag set cannot be resolved."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.message = message
        self.line = line

    def __str__(self):
        if self.line is None:
            return self.message
        return f"line {self.line}: {self.message}"


class NetlistParseError(CircuitGclError):
    """Malformed netlist or parasitic-file card."""

    def __init__(self, message, line=None, token=None):
        detail = message
        if line is not None:
            detail = f"line {line}: {detail}"
        if token is not None:
            detail = f"{detail} (near {token!r})"
        super().__init__(detail)
        self.line = line
        self.token = token


class UnknownNameError(CircuitGclError):
    """A card references a net, pin, or subcircuit that does not exist."""

    def __init__(self, message, name):
        super().__init__(f"{message}: {name!r}")
        self.name = name


class GraphFormatError(CircuitGclError):
    """Corrupt or truncated serialized graph."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(CircuitGclError):
    """Training diverged or could not proceed."""


class CheckpointError(CircuitGclError):
    """Checkpoint file is unreadable or incompatible."""
