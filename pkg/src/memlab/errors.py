"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Dataset cannot support the requested operation."""


class TrainingError(RuntimeError):
    """Training hit a non-recoverable numerical state (non-finite values)."""


class EstimationError(RuntimeError):
    """A Monte Carlo estimate is undefined for every evaluation point."""
