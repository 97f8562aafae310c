"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class ContractError(RuntimeError):
    """An operation was called outside its precondition (e.g. backward on a non-scalar)."""


class DomainError(ValueError):
    """A numeric argument lies outside the domain of the operation."""


class GeometryError(ValueError):
    """Degenerate skeleton geometry (collinear or coincident reference joints)."""


class ParseError(ValueError):
    """Malformed dataset record."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ValueError):
    """A parsed record violates a data invariant."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class TrainingError(RuntimeError):
    """Optimization diverged."""

    def __init__(self, epoch, message="non-finite loss"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
