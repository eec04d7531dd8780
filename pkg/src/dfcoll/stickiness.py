"""Stickiness: task-queue ordering and spin-threshold policies.

Every rank of a job must run the same policies; the alignment is what turns
purely local decisions into de facto gang scheduling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Protocol, Sequence

from .errors import DuplicateEntry


class OrderKind(enum.Enum):
    FIFO = "fifo"
    PRIORITY_FRONT = "priority"
    # no ordering policy at all: fetch every round, append at the tail
    EAGER = "eager"


@dataclass(frozen=True)
class OrderPolicy:
    kind: OrderKind = OrderKind.FIFO
    fetch_cadence: int = 1

    @classmethod
    def parse(cls, name: str) -> "OrderPolicy":
        return cls(OrderKind(name))


@dataclass(frozen=True)
class SpinPolicy:
    base_threshold: int = 4096
    position_step: int = 256
    min_threshold: int = 64
    boost_factor: int = 2
    boost_cap: int | None = None

    def __post_init__(self):
        if self.boost_cap is None:
            object.__setattr__(self, "boost_cap", 4 * self.base_threshold)
        if not 1 <= self.min_threshold <= self.base_threshold <= self.boost_cap:
            raise ValueError(f"need 1 <= min <= base <= cap, got {self}")
        if self.position_step < 0 or self.boost_factor < 1:
            raise ValueError("position_step must be >= 0 and boost_factor >= 1")

    @classmethod
    def constant(cls, threshold: int) -> "SpinPolicy":
        """Same threshold at every position, never boosted."""
        return cls(threshold, 0, threshold, 1, threshold)


class Entry(Protocol):
    collective_id: int
    threshold: int
    stall_streak: int


def admit(queue: list, entry: Entry, policy: OrderPolicy) -> int:
    """Insert ``entry`` into the task queue and return its position."""
    if any(e.collective_id == entry.collective_id for e in queue):
        raise DuplicateEntry(f"collective {entry.collective_id} is already queued")
    if policy.kind is OrderKind.PRIORITY_FRONT:
        queue.insert(0, entry)
        return 0
    queue.append(entry)
    return len(queue) - 1


def fetch_allowed(
    policy: OrderPolicy,
    queue: Sequence[Entry],
    stall_rounds_limit: int,
    rounds_since_check: int,
) -> bool:
    """Whether the lane may read the SQ this round."""
    if policy.kind is OrderKind.FIFO:
        return not queue or all(e.stall_streak >= stall_rounds_limit for e in queue)
    if policy.kind is OrderKind.PRIORITY_FRONT:
        return rounds_since_check + 1 >= policy.fetch_cadence
    return True


def initial_threshold(position: int, policy: SpinPolicy) -> int:
    if position < 0:
        raise ValueError("position must be >= 0")
    return max(policy.min_threshold, policy.base_threshold - position * policy.position_step)


def on_step_success(entry: Entry, policy: SpinPolicy) -> int:
    entry.threshold = min(policy.boost_cap, entry.threshold * policy.boost_factor)
    entry.stall_streak = 0
    return entry.threshold
