"""Exception types shared across the engine."""


class GtpError(Exception):
    """Base class for all engine errors."""


class ShapeError(GtpError, ValueError):
    """Operand dimensions are inconsistent."""


class ArgumentError(GtpError, ValueError):
    """A scalar argument is out of its documented range."""


class DegenerateInputError(GtpError, ValueError):
    """Input is numerically degenerate (e.g. zero-norm vector)."""


class PartitionError(GtpError, ValueError):
    """Kept/propagated index sets do not partition the live set."""


class ConfigError(GtpError, ValueError):
    """Model or reduction configuration is invalid or infeasible."""


class StrategyError(GtpError, ValueError):
    """A selection strategy was used with incompatible inputs."""


class SchemaError(GtpError, KeyError):
    """A weight store is missing tensors or has wrong shapes."""


class FormatError(GtpError, ValueError):
    """A serialized file is malformed.

    `offset` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
