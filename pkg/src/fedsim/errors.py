"""Exception types shared across the simulator."""


class FedsimError(Exception):
    """Base class for all simulator errors."""


class ShapeError(FedsimError):
    """An input does not fit a layer; carries the offending layer's name."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class ModeError(FedsimError):
    """An operation was invoked in the wrong train/eval mode."""


class CongruenceError(FedsimError):
    """Two parameter trees do not share the same names and shapes."""


class DataFormatError(FedsimError):
    """A dataset file or record is malformed."""


class ConfigError(FedsimError):
    """A config key is unknown, mistyped, or violates a constraint.

    ``path`` is the dotted key path (e.g. ``plan.Q``) so callers can point
    at the offending line.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
