"""In-process cluster: ranks, their host-side API, and the world that steps them."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .connector import DEFAULT_CAPACITY, Fabric
from .daemon import Daemon, DaemonConfig, Supervisor
from .engine import Engine, HostProgram
from .errors import DuplicateSubmission, InvalidMeta
from .geometry import (
    DEFAULT_SLICES,
    CollectiveKind,
    CollectiveMeta,
    ElemKind,
    ReduceFn,
    Registry,
    SliceConfig,
)
from .queues import SQE, CallbackMap, Poller, SubmissionQueue, make_cq
from .stickiness import OrderPolicy, SpinPolicy


@dataclass
class RuntimeConfig:
    lanes: int = 1
    mode: str = "occl"
    order: OrderPolicy = field(default_factory=OrderPolicy)
    spin: SpinPolicy = field(default_factory=SpinPolicy)
    idle_rounds_limit: int = 256
    stall_rounds_limit: int = 64
    cache_ways: int = 4
    spins_per_round: int = 256
    stream_slots: int | None = None
    sq_capacity: int = 64
    cq_impl: str = "packed"
    cq_capacity: int = 1024
    connector_capacity: int = DEFAULT_CAPACITY
    slices: SliceConfig = DEFAULT_SLICES
    max_collectives: int = 1000
    audit: bool = True
    events: bool = True

    def daemon_config(self) -> DaemonConfig:
        return DaemonConfig(
            lanes=self.lanes,
            mode=self.mode,
            order=self.order,
            spin=self.spin,
            idle_rounds_limit=self.idle_rounds_limit,
            stall_rounds_limit=self.stall_rounds_limit,
            cache_ways=self.cache_ways,
            spins_per_round=self.spins_per_round,
            stream_slots=self.stream_slots,
        )


@dataclass
class Submission:
    rank: int
    collective_id: int
    send_buf: np.ndarray
    recv_buf: np.ndarray
    elem_count: int
    submit_round: int
    submit_time: float
    callback: Callable[[int], None] | None = None
    done: bool = False
    done_round: int = -1
    done_time: float = 0.0
    callbacks: int = 0
    preemptions: dict[int, int] = field(default_factory=dict)
    queue_len_at_fetch: dict[int, int] = field(default_factory=dict)

    @property
    def latency(self) -> float:
        return self.done_time - self.submit_time

    @property
    def rounds(self) -> int:
        return self.done_round - self.submit_round


def elem_count_for(kind: CollectiveKind, nranks: int, send_len: int, recv_len: int) -> int:
    if kind is CollectiveKind.REDUCE_SCATTER:
        return recv_len
    return send_len


def expected_lengths(kind: CollectiveKind, nranks: int, count: int) -> tuple[int, int]:
    if kind is CollectiveKind.ALL_GATHER:
        return count, nranks * count
    if kind is CollectiveKind.REDUCE_SCATTER:
        return nranks * count, count
    return count, count


class _PollerActor:
    __slots__ = ("poller",)

    def __init__(self, poller: Poller):
        self.poller = poller

    def tick(self) -> None:
        self.poller.poll_and_dispatch()


class Rank:
    def __init__(self, world: "World", index: int, config: RuntimeConfig):
        self.world = world
        self.index = index
        self.config = config
        self.registry = Registry(config.lanes, config.max_collectives)
        self.sq = SubmissionQueue(config.lanes, config.sq_capacity)
        cq_cap = config.max_collectives if config.cq_impl == "slot" else config.cq_capacity
        self.cq = make_cq(config.cq_impl, cq_cap)
        self.callbacks = CallbackMap()
        self.poller = Poller(self.cq, self.callbacks)
        self.daemon = Daemon(self, config.daemon_config(), config.slices)
        self.supervisor = Supervisor(self)
        self.links: dict[tuple[int, int], tuple] = {}
        self.outstanding: dict[int, Submission] = {}
        self.history: list[Submission] = []
        self.down_epoch = 0
        self.sqes_pushed = 0

    # -- host API ----------------------------------------------------------

    def try_submit(
        self,
        collective_id: int,
        send_buf: np.ndarray,
        recv_buf: np.ndarray,
        callback: Callable[[int], None] | None = None,
    ) -> Submission | None:
        """Push one SQE; ``None`` when the SQ is full (retry later)."""
        if collective_id in self.outstanding:
            raise DuplicateSubmission(f"collective {collective_id} is still in flight on rank {self.index}")
        meta = self.registry[collective_id]
        count = elem_count_for(meta.kind, meta.nranks, len(send_buf), len(recv_buf))
        want = expected_lengths(meta.kind, meta.nranks, count)
        if (len(send_buf), len(recv_buf)) != want or count < 1:
            raise InvalidMeta(f"{meta.kind.value} buffers must have lengths {want}, got {(len(send_buf), len(recv_buf))}")
        dtype = meta.elem_kind.dtype
        if send_buf.dtype != dtype or recv_buf.dtype != dtype:
            raise InvalidMeta(f"buffers must be {dtype}")
        sqe = SQE(collective_id, send_buf, recv_buf, count, meta.reduce_fn, meta.root)
        if self.sq.full():
            return None
        sub = Submission(
            self.index, collective_id, send_buf, recv_buf, count,
            self.world.engine.round, time.perf_counter(), callback,
        )
        self.callbacks.bind(collective_id, lambda cid, s=sub: self._on_callback(s))
        self.outstanding[collective_id] = sub
        self.sq.push(sqe)
        self.sqes_pushed += 1
        self.history.append(sub)
        return sub

    def submit(self, collective_id, send_buf, recv_buf, callback=None):
        """Generator form of :meth:`try_submit` that waits out a full SQ."""
        while True:
            sub = self.try_submit(collective_id, send_buf, recv_buf, callback)
            if sub is not None:
                return sub
            yield None

    def wait(self, *subs: Submission):
        yield lambda: all(s.done for s in subs)

    def synchronize(self):
        """Block the calling host program until no lane of this rank is running.

        Work already in the SQ counts as launched: if the daemon is down but
        has unread entries, the call waits for the launch they trigger to end.
        """
        if self.quiescent():
            return
        epoch = self.down_epoch
        yield lambda: self.down_epoch != epoch

    def quiescent(self) -> bool:
        d = self.daemon
        return d.down and all(self.sq.pending_for(c) == 0 for c in d.sq_cursors)

    def close(self):
        if self.sq.exit_pushed:
            return
        while not self.sq.push(SQE.exiting_entry()):
            yield None

    # -- daemon-side hooks ---------------------------------------------------

    def _on_callback(self, sub: Submission) -> None:
        sub.callbacks += 1
        sub.done = True
        sub.done_round = self.world.engine.round
        sub.done_time = time.perf_counter()
        if self.outstanding.get(sub.collective_id) is sub:
            del self.outstanding[sub.collective_id]
        if sub.callback is not None:
            sub.callback(sub.collective_id)

    def on_daemon_down(self) -> None:
        self.down_epoch += 1

    def record_lane_completion(self, slot) -> None:
        sub = self.outstanding.get(slot.collective_id)
        if sub is not None:
            sub.preemptions[slot.lane] = slot.preemptions
            sub.queue_len_at_fetch[slot.lane] = slot.queue_len_at_fetch


class World:
    """All ranks of one job, hosted in one process and stepped by one engine."""

    def __init__(self, nranks: int, config: RuntimeConfig | None = None, seed: int = 0):
        self.nranks = nranks
        self.config = config or RuntimeConfig()
        if self.config.connector_capacity < 2 * self.config.slices.slices_per_chunk:
            # every rank opens a loop with a whole-chunk send; fused recv+send
            # steps then need a free slot beyond that chunk or the ring wedges
            raise ValueError("connector_capacity must hold two chunks (2 * slices_per_chunk slots)")
        self.engine = Engine(seed)
        self.fabric = Fabric(self.config.connector_capacity, audit=self.config.audit)
        self.events: list[dict] | None = [] if self.config.events else None
        self.ranks = [Rank(self, i, self.config) for i in range(nranks)]
        self.programs: list[HostProgram] = []
        for rank in self.ranks:
            self.engine.add(rank.supervisor)
            for lane in rank.daemon.lanes:
                self.engine.add(lane)
            self.engine.add(_PollerActor(rank.poller))

    def register(
        self,
        kind: CollectiveKind,
        *,
        root: int | None = None,
        reduce_fn: ReduceFn | None = None,
        lanes_used: int = 1,
        lane_width: int = 32,
        elem_kind: ElemKind = ElemKind.INT32,
    ) -> int:
        """Register one collective on every rank and wire its ring connectors."""
        n = self.nranks
        ids = [
            rank.registry.register(
                CollectiveMeta(kind, n, rank.index, root, lanes_used, lane_width, reduce_fn, elem_kind)
            )
            for rank in self.ranks
        ]
        cid = ids[0]
        if any(i != cid for i in ids):
            raise InvalidMeta(f"ranks disagree on collective id: {ids}")
        if n > 1:
            for lane in range(lanes_used):
                recv_side = {}
                send_side = {}
                for r in range(n):
                    dst = (r + 1) % n
                    s, rv = self.fabric.peer_wire((r, lane), (dst, lane), cid)
                    send_side[r] = s
                    recv_side[dst] = rv
                for r in range(n):
                    self.ranks[r].links[(cid, lane)] = (send_side[r], recv_side[r])
        return cid

    def spawn(self, gen, name: str = "") -> HostProgram:
        prog = HostProgram(gen, name)
        self.programs.append(prog)
        self.engine.add(prog)
        return prog

    def _check_programs(self) -> None:
        for p in self.programs:
            if p.error is not None:
                raise p.error

    def run(self, watchdog: float | None = 60.0, until: Callable[[], bool] | None = None) -> int:
        """Step until every spawned program finished (or ``until()`` holds)."""
        def done():
            if any(p.error is not None for p in self.programs):
                return True
            if until is not None:
                return until()
            return all(p.done for p in self.programs)

        rounds = self.engine.run_until(done, watchdog, self.describe, lambda: self.events or [])
        self._check_programs()
        return rounds

    def device_synchronize(self, rank: int, watchdog: float | None = 60.0) -> int:
        r = self.ranks[rank]
        if r.quiescent():
            return 0
        epoch = r.down_epoch
        return self.engine.run_until(lambda: r.down_epoch != epoch, watchdog, self.describe)

    def shutdown(self, watchdog: float | None = 60.0) -> int:
        """Send the exiting entry to every daemon that ever ran and wait for exit."""
        live = [r for r in self.ranks if r.daemon.launches > 0]
        for r in live:
            self.spawn(r.close(), f"close-{r.index}")
        return self.run(watchdog, until=lambda: all(r.daemon.exited for r in live))

    # -- diagnostics ---------------------------------------------------------

    def describe(self) -> str:
        parts = []
        for r in self.ranks:
            d = r.daemon
            queues = [[e.collective_id for e in l.queue] for l in d.lanes]
            parts.append(
                f"rank{r.index}(running={d.running} queues={queues} received={d.received} "
                f"completed={d.completed} outstanding={sorted(r.outstanding)})"
            )
        return "; ".join(parts)

    def connector_report(self) -> list[str]:
        return self.fabric.audit_report()

    def transfer_mismatches(self) -> list:
        return [m for r in self.ranks for m in r.daemon.transfer_mismatches]

    def preemptions(self) -> int:
        return sum(l.preemptions for r in self.ranks for l in r.daemon.lanes)
