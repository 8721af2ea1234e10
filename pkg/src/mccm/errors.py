"""Exception hierarchy shared by every module."""


class MccmError(Exception):
    """Base class for all errors raised by the package."""


class DescriptorError(MccmError, ValueError):
    """A CNN or platform descriptor is malformed or violates an invariant."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class NotationError(MccmError, ValueError):
    """An accelerator sketch could not be parsed or violates coverage rules."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (column {position + 1})"
        super().__init__(message)
        self.position = position


class InfeasibleDesign(MccmError):
    """The accelerator cannot be materialized on the platform."""


class SimulationCapExceeded(MccmError):
    """The requested simulation exceeds the configured MAC budget."""
