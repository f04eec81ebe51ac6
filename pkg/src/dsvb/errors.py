"""Exception types raised across the package."""


class DSVBError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DSVBError, ValueError):
    pass


class DomainError(DSVBError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class NonScalarOutput(DSVBError, ValueError):
    pass


class NumericalDivergence(DSVBError, FloatingPointError):
    """NaN or Inf appeared in a forward pass, loss or parameter update."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch

    def __reduce__(self):
        # keep ``epoch`` across process boundaries
        return type(self), (str(self), self.epoch)


class SchemaError(DSVBError, ValueError):
    pass


class ParseError(DSVBError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class TooShort(DSVBError, ValueError):
    pass


class UnstableConfig(DSVBError, ValueError):
    pass


class EmptyDataset(DSVBError, ValueError):
    pass


class UnknownScenario(DSVBError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown scenario"
