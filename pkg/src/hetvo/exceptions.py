"""Exception hierarchy shared by every module.

Everything raised on bad data derives from :class:`HetvoError`, which lets the
CLI map data problems to a dedicated exit code.
"""


class HetvoError(Exception):
    """Base class for data and numerical errors."""


class NearPiRotation(HetvoError):
    pass


class GimbalLock(HetvoError):
    pass


class NotPositiveDefinite(HetvoError, ValueError):
    pass


class LengthMismatch(HetvoError, ValueError):
    pass


class EmptyBatch(HetvoError, ValueError):
    pass


class EmptyInput(HetvoError, ValueError):
    pass


class DimensionMismatch(HetvoError, ValueError):
    pass


class InsufficientSamples(HetvoError, ValueError):
    pass


class MissingOracle(HetvoError):
    pass


class DegenerateTrajectory(HetvoError, ValueError):
    pass


class SingularSystem(HetvoError):
    pass


class FormatError(HetvoError):
    """A file does not follow its documented format."""


class MalformedLine(FormatError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class NonRigidRotation(FormatError):
    pass


class ConfigError(HetvoError):
    pass
