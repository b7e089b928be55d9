"""Exception hierarchy.

Every error carries a ``category`` used by the command line front end to
choose an exit code (2 config, 3 numeric failure, 4 degenerate data).
"""


class RobSurError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(RobSurError, ValueError):
    category = "config"
    exit_code = 2


class DimensionError(ConfigError):
    pass


class NumericFailure(RobSurError, ArithmeticError):
    category = "numeric"
    exit_code = 3


class DegenerateData(RobSurError):
    category = "degenerate"
    exit_code = 4


class RankDeficiencyError(DegenerateData):
    pass


class SingularCovarianceError(DegenerateData):
    pass


class ExactFitError(DegenerateData):
    """Too many zero distances: the M-scale collapses to zero."""


class DegenerateDesignError(DegenerateData):
    pass


class SingularResampleError(DegenerateData):
    pass


class InsufficientReplicatesError(ConfigError):
    pass
