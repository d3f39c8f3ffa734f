"""Exception types raised across the package."""


class IdynError(Exception):
    pass


class DimensionMismatch(IdynError, ValueError):
    pass


class SingularA(IdynError):
    pass


class RayTermination(IdynError):
    pass


class MaxPivotsExceeded(IdynError):
    pass


class SingularSubBlock(IdynError):
    pass


class NoSolution(IdynError):
    pass


class EnumerationCapExceeded(IdynError):
    pass


class Infeasible(IdynError):
    pass


class Unbounded(IdynError):
    pass


class ZeroNormal(IdynError, ValueError):
    pass


class CoincidentCenters(IdynError, ValueError):
    pass


class UnknownBody(IdynError, KeyError):
    pass


class UnsupportedMechanism(IdynError, ValueError):
    pass


class SolverFailure(IdynError):
    pass


class InconsistentDesiredAccel(IdynError):
    pass


class NegativeBase(IdynError, ValueError):
    pass


class ConfigError(IdynError, ValueError):
    pass


class IoError(IdynError, OSError):
    pass
