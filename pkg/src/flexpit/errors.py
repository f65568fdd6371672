"""Exception hierarchy shared across the package."""


class FlexPITError(Exception):
    """Base class for all package errors."""


class InvalidConfig(FlexPITError, ValueError):
    pass


class LengthMismatch(FlexPITError, ValueError):
    pass


class ZeroReference(FlexPITError, ValueError):
    pass


class EmptyWaveform(FlexPITError, ValueError):
    pass


class NoActiveFrames(FlexPITError, ValueError):
    pass


class InvalidPermutation(FlexPITError, ValueError):
    pass


class ShapeMismatch(FlexPITError, ValueError):
    pass


class StaleCache(FlexPITError, RuntimeError):
    pass


class TooManySources(FlexPITError, ValueError):
    pass


class SilentUtterance(FlexPITError, ValueError):
    pass


class EmptyInput(FlexPITError, ValueError):
    pass


class CoverageMismatch(FlexPITError, ValueError):
    pass


class MissingLabels(FlexPITError, KeyError):
    pass


class FormatError(FlexPITError, ValueError):
    """Raised when a binary or CSV artifact cannot be parsed."""


class EmptyCluster(FlexPITError, ValueError):
    pass
