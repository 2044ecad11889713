"""Exception types shared across the package."""


class EdgedmlError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(EdgedmlError):
    """Invalid shapes, dimensions, or option values."""


class FormatError(EdgedmlError):
    """Malformed input file (bad magic, truncation, count mismatch)."""


class AllocationError(EdgedmlError):
    """Invalid data-allocation request (e.g. shard larger than dataset)."""


class InsufficientDataError(EdgedmlError):
    """Not enough observations to act on (outlier fences, warm-up window)."""


class SimulationError(EdgedmlError):
    """Broken simulator invariant (event in the past, double init, ...)."""
