"""Exception types shared across the package."""


class SpecDeskError(Exception):
    """Base class for package-specific errors."""


class ShapeError(SpecDeskError, ValueError):
    """Operands have incompatible or malformed shapes."""


class ParameterError(SpecDeskError, ValueError):
    """A parameter value violates an operation's contract."""


class CapacityError(SpecDeskError, RuntimeError):
    """A sequence or cache exceeded its configured capacity."""


class OrderingError(SpecDeskError, ValueError):
    """Position ids are not in the required order."""


class StateError(SpecDeskError, RuntimeError):
    """Operation invoked in an invalid session or cache state."""


class InternalError(SpecDeskError, RuntimeError):
    """An internal consistency check failed."""
