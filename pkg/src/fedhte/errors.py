"""Exception hierarchy shared across the package."""


class FedhteError(Exception):
    """Base class for all package-specific errors."""


class DataValidationError(FedhteError):
    """Raised when an input table or CSV file violates the data contract."""


class DesignError(FedhteError):
    """Raised when a working design or model design matrix is unusable."""


class PositivityError(FedhteError):
    """Raised when a fitted propensity is exactly zero for an observed arm."""


class ConvergenceError(FedhteError):
    """Raised when an iterative routine fails and the failure is fatal."""


class BootstrapError(FedhteError):
    """Raised when too many bootstrap replicates fail to converge."""


class ProtocolError(FedhteError):
    """Raised on malformed, unexpected, or version-mismatched messages."""


class FramingError(ProtocolError):
    """Raised when a transport frame is truncated or oversized."""


class ConfigError(FedhteError):
    """Raised when a user-supplied configuration file is invalid."""


class StudyError(FedhteError):
    """Raised when a Monte Carlo study exceeds its failure budget."""
