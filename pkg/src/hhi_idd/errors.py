"""Exception types shared across the toolkit.

``InputError`` subclasses map to CLI exit code 2, everything else to 1.
"""


class InputError(ValueError):
    """Bad user input: malformed files, impossible arguments."""


class ConfigError(InputError):
    pass


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a forward or backward pass."""


class BVHParseError(InputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class BVHWriteError(ValueError):
    pass


class RotationError(ValueError):
    pass


class PairingError(InputError):
    pass


class SplitError(InputError):
    pass


class CheckpointError(InputError):
    pass
