"""Exception types raised across the package."""


class GMLMError(Exception):
    pass


class ShapeError(GMLMError, ValueError):
    """Operand dimensions are incompatible."""


class ContractError(GMLMError, ValueError):
    """A precondition of an operation was violated."""


class ValidationError(GMLMError, ValueError):
    """Data or configuration failed validation."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StratificationError(ValidationError):
    pass


class SamplingError(GMLMError, ValueError):
    pass


class GradCheckError(GMLMError, RuntimeError):
    """The function under a gradient check is not deterministic."""


class EpochError(GMLMError, RuntimeError):
    pass
