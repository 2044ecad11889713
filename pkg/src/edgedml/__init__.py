"""edgedml: deterministic parameter-server training simulator for
heterogeneous edge clusters, with significance-gated gradient pushes,
loss-weighted aggregation, and dynamic per-worker data sizing."""

from . import aggregator, allocator, cli, dataio, gate, metrics, nnkernel, simcore, strategies
from .errors import (
    AllocationError,
    ConfigurationError,
    EdgedmlError,
    FormatError,
    InsufficientDataError,
    SimulationError,
)

__version__ = "0.1.0"
