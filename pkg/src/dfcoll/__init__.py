"""Deadlock-free collective communication on a simulated device.

Collectives are submitted through a queue to a preemptible daemon that
multiplexes them on a small set of lanes, so misordered or blocking
submission patterns cannot wedge the job.
"""

from .errors import (
    DfcollError,
    DuplicateSubmission,
    InvalidMeta,
    OracleMismatch,
    WatchdogTimeout,
)
from .geometry import CollectiveKind, CollectiveMeta, ElemKind, ReduceFn, SliceConfig
from .ring import reference_oracle
from .runtime import RuntimeConfig, World
from .stickiness import OrderKind, OrderPolicy, SpinPolicy

__all__ = [
    "CollectiveKind",
    "CollectiveMeta",
    "DfcollError",
    "DuplicateSubmission",
    "ElemKind",
    "InvalidMeta",
    "OracleMismatch",
    "OrderKind",
    "OrderPolicy",
    "ReduceFn",
    "RuntimeConfig",
    "SliceConfig",
    "SpinPolicy",
    "WatchdogTimeout",
    "World",
    "reference_oracle",
]
