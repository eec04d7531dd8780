"""Submission and completion queues between host invokers and the daemon.

The SQ is a single-producer ring read by every lane: each lane keeps a
private cursor, and the read that brings an entry's consumer counter up to
the lane count frees the slot. Three completion queues share one interface
(``try_write`` / ``write`` / ``poll``):

``vanilla``
    ring with a reserved tail, an id store, a fence, then a per-slot publish
    marker. Host-side operations per write: tail load, head load, tail CAS,
    id store, marker store (5) plus the fence.
``packed``
    ring whose slot holds one 64-bit word ``(tail << 32) | id``; the poller
    accepts a slot iff the high half equals its head. Tail load, head load,
    tail CAS, word store (4), no fence.
``slot``
    no ring at all: slot index is the collective id and a write is one CAS
    from ``EMPTY`` to the id; the poller scans and clears.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .atomics import AtomicInt, fence
from .errors import SubmitAfterExit, UnknownId
from .geometry import ReduceFn

log = logging.getLogger(__name__)

EXITING = -1
EMPTY = -1
_MASK32 = 0xFFFF_FFFF


@dataclass
class SQE:
    collective_id: int
    send_buf: np.ndarray | None = None
    recv_buf: np.ndarray | None = None
    elem_count: int = 0
    reduce_fn: ReduceFn | None = None
    root: int | None = None
    consumer_count: AtomicInt = field(default_factory=AtomicInt)
    seq: int = -1

    @property
    def exiting(self) -> bool:
        return self.collective_id == EXITING

    @classmethod
    def exiting_entry(cls) -> "SQE":
        return cls(EXITING)


class SubmissionQueue:
    def __init__(self, lane_count: int, capacity: int = 64):
        self.lane_count = lane_count
        self.capacity = capacity
        self._slots: list[SQE | None] = [None] * capacity
        self.tail = 0
        self.freed = 0
        self._exit_pushed = False

    def push(self, sqe: SQE) -> bool:
        """Insert an entry; ``False`` when the target slot is not yet free."""
        if self._exit_pushed:
            raise SubmitAfterExit("the exiting entry was already submitted")
        idx = self.tail % self.capacity
        if self._slots[idx] is not None:
            return False
        sqe.seq = self.tail
        self._slots[idx] = sqe
        if sqe.exiting:
            self._exit_pushed = True
        self.tail += 1  # publish
        return True

    def read(self, lane_cursor: int) -> SQE | None:
        """The entry at ``lane_cursor`` if published; the caller advances its cursor."""
        if lane_cursor >= self.tail:
            return None
        idx = lane_cursor % self.capacity
        sqe = self._slots[idx]
        if sqe is None or sqe.seq != lane_cursor:
            raise RuntimeError(f"SQ slot {idx} does not hold seq {lane_cursor}")
        if sqe.consumer_count.add_fetch(1) == self.lane_count:
            self._slots[idx] = None
            self.freed += 1
        return sqe

    def pending_for(self, lane_cursor: int) -> int:
        return self.tail - lane_cursor

    @property
    def in_flight(self) -> int:
        return self.tail - self.freed

    def full(self) -> bool:
        return self._slots[self.tail % self.capacity] is not None

    @property
    def exit_pushed(self) -> bool:
        return self._exit_pushed


class _RingCQ:
    HOST_OPS_PER_WRITE = 0

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity
        self.tail = AtomicInt(0)
        self.head = 0

    def _reserve(self) -> int | None:
        while True:
            t = self.tail.load()
            if t - self.head >= self.capacity:
                return None
            if self.tail.compare_exchange(t, t + 1):
                return t

    def write(self, collective_id: int) -> None:
        while not self.try_write(collective_id):
            time.sleep(0)


class VanillaCQ(_RingCQ):
    HOST_OPS_PER_WRITE = 5
    NEEDS_FENCE = True

    def __init__(self, capacity: int = 1024):
        super().__init__(capacity)
        self._ids = [EMPTY] * capacity
        self._ready = [-1] * capacity

    def try_write(self, collective_id: int) -> bool:
        t = self._reserve()
        if t is None:
            return False
        idx = t % self.capacity
        self._ids[idx] = collective_id
        fence()
        self._ready[idx] = t
        return True

    def poll(self) -> list[int]:
        out = []
        h = self.head
        while self._ready[h % self.capacity] == h:
            out.append(self._ids[h % self.capacity])
            h += 1
            self.head = h
        return out


def pack_cqe(tail: int, collective_id: int) -> int:
    return ((tail & _MASK32) << 32) | (collective_id & _MASK32)


def unpack_cqe(word: int) -> tuple[int, int]:
    return word >> 32, word & _MASK32


class PackedCQ(_RingCQ):
    HOST_OPS_PER_WRITE = 4
    NEEDS_FENCE = False

    def __init__(self, capacity: int = 1024):
        super().__init__(capacity)
        self.words = [-1] * capacity

    def try_write(self, collective_id: int) -> bool:
        t = self._reserve()
        if t is None:
            return False
        self.words[t % self.capacity] = pack_cqe(t, collective_id)  # one 64-bit store
        return True

    def poll(self) -> list[int]:
        out = []
        h = self.head
        while True:
            w = self.words[h % self.capacity]
            if w < 0 or (w >> 32) != (h & _MASK32):
                break
            out.append(w & _MASK32)
            h += 1
            self.head = h
        return out


class SlotCQ:
    HOST_OPS_PER_WRITE = 1
    NEEDS_FENCE = False

    def __init__(self, capacity: int = 1000):
        self.capacity = capacity
        self.slots = np.full(capacity, EMPTY, dtype=np.int64)
        self._lock = threading.Lock()
        self._pending = AtomicInt(0)
        self._bound = 0

    def try_write(self, collective_id: int) -> bool:
        if not 0 <= collective_id < self.capacity:
            raise ValueError(f"collective id {collective_id} outside slot range")
        with self._lock:  # CAS EMPTY -> id
            if self.slots[collective_id] != EMPTY:
                return False
            self.slots[collective_id] = collective_id
            if collective_id >= self._bound:
                self._bound = collective_id + 1
        self._pending.fetch_add(1)
        return True

    def write(self, collective_id: int) -> None:
        while not self.try_write(collective_id):
            time.sleep(0)

    def poll(self) -> list[int]:
        if self._pending.load() == 0:
            return []
        window = self.slots[: self._bound]
        hit = np.flatnonzero(window != EMPTY)
        out = window[hit].tolist()
        window[hit] = EMPTY  # writers only CAS from EMPTY, so clearing after the read is safe
        if out:
            self._pending.fetch_add(-len(out))
        return out


CQ_IMPLS = {"vanilla": VanillaCQ, "packed": PackedCQ, "slot": SlotCQ}


def make_cq(impl: str, capacity: int | None = None):
    cls = CQ_IMPLS[impl]
    return cls(capacity) if capacity else cls()


class CallbackMap:
    def __init__(self):
        self._map: dict[int, Callable[[int], None]] = {}
        self._lock = threading.Lock()

    def bind(self, collective_id: int, callback: Callable[[int], None]) -> None:
        with self._lock:
            self._map[collective_id] = callback

    def take(self, collective_id: int) -> Callable[[int], None] | None:
        with self._lock:
            return self._map.pop(collective_id, None)

    def __contains__(self, collective_id: int) -> bool:
        return collective_id in self._map


class Poller:
    """Drains the CQ and fires each bound callback exactly once.

    Callbacks run on the poller's context and must return quickly.
    """

    def __init__(self, cq, callbacks: CallbackMap):
        self.cq = cq
        self.callbacks = callbacks
        self.fired = Counter()
        self.unknown = Counter()

    def poll_and_dispatch(self) -> int:
        n = 0
        for cid in self.cq.poll():
            cb = self.callbacks.take(cid)
            if cb is None:
                self.unknown[cid] += 1
                log.error("%s", UnknownId(f"CQE for collective {cid} has no bound callback"))
                continue
            cb(cid)
            self.fired[cid] += 1
            n += 1
        return n
