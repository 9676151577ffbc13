"""Exception hierarchy shared by all stages.

Each class carries the CLI exit code it maps to.
"""


class HomogError(Exception):
    exit_code = 3


class ConfigError(HomogError):
    exit_code = 2


class GeometryError(ConfigError):
    pass


class MeshError(HomogError):
    def __init__(self, message, region=None):
        super().__init__(message if region is None else f"{message} (region: {region})")
        self.region = region


class DomainError(ValueError, HomogError):
    """Argument outside the domain of a kinetics function."""

    exit_code = 2


class CompatibilityError(HomogError):
    """Periodic problem whose right-hand side has nonzero mean."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class AssemblyError(HomogError):
    pass


class NumericalError(HomogError):
    pass


class RangeError(NumericalError):
    pass


class InvariantViolation(HomogError):
    exit_code = 4
