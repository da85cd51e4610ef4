"""Exception types shared across the package."""


class MCAError(Exception):
    """Base class for package errors."""


class InvalidSchemaError(MCAError, ValueError):
    pass


class InvalidConfigError(MCAError, ValueError):
    pass


class InvalidInputError(MCAError, ValueError):
    pass


class ShapeError(MCAError, ValueError):
    pass


class ContractViolation(MCAError, ValueError):
    pass


class DataLoadError(MCAError, ValueError):
    pass


class NumericFailure(MCAError, FloatingPointError):
    """Non-finite activations or losses.

    ``layer`` is the encoder layer index where the failure was detected, or
    ``None`` when it happened outside the encoder stack.
    """

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer
