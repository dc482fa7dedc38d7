"""Model-dependent capabilities behind one contract: oracle and wire backends."""

from .base import (
    CAPABILITIES,
    Backend,
    BackendRequest,
    CompositeBackend,
    NormalizedGroup,
    OptionChoice,
    PageDescription,
    PlannedStep,
)
from .oracle import OracleBackend
from .wire import WireBackend, WireConfig

__all__ = [
    "CAPABILITIES",
    "Backend",
    "BackendRequest",
    "CompositeBackend",
    "NormalizedGroup",
    "OptionChoice",
    "OracleBackend",
    "PageDescription",
    "PlannedStep",
    "WireBackend",
    "WireConfig",
]
