"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition (shape, range, axis...)."""


class FormatError(ValueError):
    """A serialized container is malformed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or failed a numeric check."""
