"""Exception types raised across the package."""


class ContractError(ValueError):
    """An operation received inputs that violate its shape/value contract."""


class EmptyInputError(ContractError):
    pass


class EmptyNeighborhoodError(ContractError):
    pass


class InsufficientPointsError(ContractError):
    """Raised when a cloud has too few points for the requested k."""


class InvalidHyperparameterError(ContractError):
    pass


class ResidualShapeError(ContractError):
    pass


class ConfigError(ValueError):
    """Bad or incomplete run configuration."""


class PointFileError(ValueError):
    """Malformed point-block, manifest or checkpoint file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""
