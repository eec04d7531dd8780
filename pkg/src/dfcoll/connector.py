"""Send/recv connectors: bounded single-writer/single-reader slice rings.

A commit is a payload store into the slot followed by the write-cursor
publish; a release is the read-cursor publish after the payload was copied
out. Neither cursor is part of any collective's saved context, so a slice
committed by a writer that is then preempted stays poppable by the reader.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import AlreadyWired, ConnectorOwnershipError

FULL = None
EMPTY = None

DEFAULT_CAPACITY = 8


@dataclass
class ConnectorAudit:
    pushes: int = 0
    pops: int = 0
    max_occupancy: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


class Connector:
    def __init__(self, capacity: int = DEFAULT_CAPACITY, owner: int | None = None, audit: bool = True):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.owner = owner
        self.slots: list[np.ndarray | None] = [None] * capacity
        self.write_cursor = 0
        self.read_cursor = 0
        self.audit = ConnectorAudit() if audit else None
        self._crc: dict[int, int] = {}

    def occupancy(self) -> int:
        return self.write_cursor - self.read_cursor

    def can_push(self) -> bool:
        return self.write_cursor - self.read_cursor < self.capacity

    def can_pop(self) -> bool:
        return self.read_cursor < self.write_cursor

    def try_push(self, payload: np.ndarray) -> int | None:
        """Commit one slice; returns its sequence number, or ``None`` when full."""
        seq = self.write_cursor
        if seq - self.read_cursor >= self.capacity:
            return FULL
        data = np.array(payload, copy=True)
        self.slots[seq % self.capacity] = data
        if self.audit is not None:
            self._crc[seq] = zlib.crc32(data.tobytes())
        self.write_cursor = seq + 1  # publish
        if self.audit is not None:
            a = self.audit
            a.pushes += 1
            occ = self.write_cursor - self.read_cursor
            if occ > a.max_occupancy:
                a.max_occupancy = occ
            if occ > self.capacity:
                a.violations.append(f"occupancy {occ} > capacity {self.capacity}")
        return seq

    def try_pop(self) -> tuple[np.ndarray, int] | None:
        """Take the oldest committed slice as ``(payload, seq)``, or ``None`` when empty."""
        seq = self.read_cursor
        if seq >= self.write_cursor:
            return EMPTY
        idx = seq % self.capacity
        data = self.slots[idx]
        self.slots[idx] = None
        self.read_cursor = seq + 1  # release
        if self.audit is not None:
            a = self.audit
            expected = self._crc.pop(seq, None)
            if expected is None:
                a.violations.append(f"popped seq {seq} was never committed")
            elif zlib.crc32(data.tobytes()) != expected:
                a.violations.append(f"payload of seq {seq} changed between commit and pop")
            if a.pops != seq:
                a.violations.append(f"pop #{a.pops} returned seq {seq}")
            a.pops += 1
        return data, seq

    def check(self) -> list[str]:
        """Audit findings; empty when every pop matched a commit in order."""
        if self.audit is None:
            return []
        out = list(self.audit.violations)
        if self.audit.pushes != self.write_cursor or self.audit.pops != self.read_cursor:
            out.append("audit counters disagree with cursors")
        return out


class SendHandle:
    __slots__ = ("conn", "collective_id")

    def __init__(self, conn: Connector, collective_id: int):
        self.conn = conn
        self.collective_id = collective_id

    def _own(self) -> Connector:
        if self.conn.owner != self.collective_id:
            raise ConnectorOwnershipError(
                f"collective {self.collective_id} pushed on connector owned by {self.conn.owner}"
            )
        return self.conn

    def ready(self) -> bool:
        return self._own().can_push()

    def try_push(self, payload: np.ndarray) -> int | None:
        return self._own().try_push(payload)


class RecvHandle:
    __slots__ = ("conn", "collective_id")

    def __init__(self, conn: Connector, collective_id: int):
        self.conn = conn
        self.collective_id = collective_id

    def _own(self) -> Connector:
        if self.conn.owner != self.collective_id:
            raise ConnectorOwnershipError(
                f"collective {self.collective_id} popped on connector owned by {self.conn.owner}"
            )
        return self.conn

    def ready(self) -> bool:
        return self._own().can_pop()

    def try_pop(self) -> tuple[np.ndarray, int] | None:
        return self._own().try_pop()


Endpoint = tuple[int, int]  # (rank, lane)


class Fabric:
    """Owns every connector in the process, keyed by collective and endpoints."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, audit: bool = True):
        self.capacity = capacity
        self.audit = audit
        self._links: dict[tuple[int, Endpoint, Endpoint], Connector] = {}
        self._senders: set[tuple[int, Endpoint]] = set()
        self._receivers: set[tuple[int, Endpoint]] = set()

    def peer_wire(self, src: Endpoint, dst: Endpoint, collective_id: int) -> tuple[SendHandle, RecvHandle]:
        key = (collective_id, tuple(src), tuple(dst))
        if key in self._links or (collective_id, key[1]) in self._senders or (collective_id, key[2]) in self._receivers:
            raise AlreadyWired(f"collective {collective_id}: {src} -> {dst} already wired")
        conn = Connector(self.capacity, owner=collective_id, audit=self.audit)
        self._links[key] = conn
        self._senders.add((collective_id, key[1]))
        self._receivers.add((collective_id, key[2]))
        return SendHandle(conn, collective_id), RecvHandle(conn, collective_id)

    def connectors(self) -> list[Connector]:
        return list(self._links.values())

    def audit_report(self) -> list[str]:
        out = []
        for (cid, src, dst), conn in self._links.items():
            out.extend(f"collective {cid} {src}->{dst}: {v}" for v in conn.check())
        return out


def peer_wire(fabric: Fabric, rank_a_lane: Endpoint, rank_b_lane: Endpoint, collective_id: int):
    return fabric.peer_wire(rank_a_lane, rank_b_lane, collective_id)
