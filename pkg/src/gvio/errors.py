"""Exception types shared across the package."""


class GvioError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(GvioError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


class DatasetError(GvioError):
    """Malformed or missing dataset files (CLI exit code 3)."""


class NumericalError(GvioError):
    """Numerical failure, e.g. a non-invertible innovation covariance or a
    covariance that lost positive semi-definiteness (CLI exit code 4)."""


class InitializationRejected(GvioError):
    """Delayed initialization rejected (singular block Jacobian); the
    candidate state stays out of the filter."""
