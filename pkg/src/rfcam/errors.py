"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValidationError):
    """On-disk data does not conform to the tensor or manifest format."""


class NotFoundError(KeyError):
    """A referenced file, entry, or record does not exist."""

    def __str__(self) -> str:  # KeyError quotes its message; keep it plain
        return str(self.args[0]) if self.args else ""


class NumericalError(RuntimeError):
    """A computation hit an invalid numerical state (e.g. zero cover)."""
