"""The per-rank daemon: lanes, context storage, completion counting, supervisor.

State is split the way the device splits it. ``Daemon`` holds what survives a
quit (context buffer, SQ cursors, completion counters, pending CQEs); each
``Lane`` holds what a launch owns (task queue, context cache) and loses on
exit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np

from .atomics import AtomicInt
from .errors import CorruptContext, DuplicateEntry
from .geometry import CollectiveMeta, SliceConfig, plan_geometry
from .primitives import (
    COLLECTIVE_DONE,
    STEP_DONE,
    DynamicContext,
    StaticContext,
    exec_step,
)
from .queues import SQE
from .ring import build_sequence
from .stickiness import (
    OrderKind,
    OrderPolicy,
    SpinPolicy,
    admit,
    fetch_allowed,
    initial_threshold,
    on_step_success,
)

if TYPE_CHECKING:
    from .runtime import Rank


@dataclass
class DaemonConfig:
    lanes: int = 1
    mode: str = "occl"  # or "baseline"
    order: OrderPolicy = field(default_factory=OrderPolicy)
    spin: SpinPolicy = field(default_factory=SpinPolicy)
    idle_rounds_limit: int = 256
    stall_rounds_limit: int = 64
    cache_ways: int = 4
    # failed probes a lane may make per scheduler round before yielding
    spins_per_round: int = 256
    # baseline only: concurrent non-preemptive executions per lane (streams)
    stream_slots: int | None = None

    @property
    def baseline(self) -> bool:
        return self.mode == "baseline"


@dataclass
class ContextSlot:
    """One (collective, lane) slot of the collective context buffer."""

    collective_id: int
    lane: int
    saved: DynamicContext = field(default_factory=DynamicContext)
    static: StaticContext | None = None
    active: bool = False
    admit_seq: int = -1
    preemptions: int = 0
    queue_len_at_fetch: int = 0
    submission_seq: int = -1


class ContextBuffer:
    """Global-memory store of dynamic contexts, one slot per (collective, lane)."""

    def __init__(self):
        self.slots: dict[tuple[int, int], ContextSlot] = {}

    def slot(self, collective_id: int, lane: int) -> ContextSlot:
        key = (collective_id, lane)
        s = self.slots.get(key)
        if s is None:
            s = self.slots[key] = ContextSlot(collective_id, lane)
        return s

    def save(self, collective_id: int, lane: int, dyn: DynamicContext) -> None:
        self.slot(collective_id, lane).saved = dyn.copy()

    def load(self, collective_id: int, lane: int) -> DynamicContext:
        return self.slot(collective_id, lane).saved.copy()

    def active_for(self, lane: int) -> list[ContextSlot]:
        return sorted((s for s in self.slots.values() if s.lane == lane and s.active), key=lambda s: s.admit_seq)


class ContextCache:
    """Direct-mapped working copies of dynamic contexts, indexed by id mod ways."""

    def __init__(self, buffer: ContextBuffer, ways: int = 4):
        self.buffer = buffer
        self.ways = ways
        self._tags: list[ContextSlot | None] = [None] * ways
        self._dyn: list[DynamicContext | None] = [None] * ways
        self.hits = 0
        self.misses = 0
        self.saves = 0
        self.skipped_saves = 0

    def load(self, slot: ContextSlot) -> DynamicContext:
        w = slot.collective_id % self.ways
        if self._tags[w] is slot:
            self.hits += 1
            return self._dyn[w]
        self._evict(w)
        self.misses += 1
        dyn = slot.saved.copy()
        self._tags[w] = slot
        self._dyn[w] = dyn
        return dyn

    def save(self, slot: ContextSlot) -> bool:
        """Lazy save: write back only if the context progressed since the last save."""
        w = slot.collective_id % self.ways
        if self._tags[w] is not slot:
            return False
        dyn = self._dyn[w]
        if not dyn.progressed:
            self.skipped_saves += 1
            return False
        dyn.progressed = False
        slot.saved = dyn.copy()
        self.saves += 1
        return True

    def dirty(self, slot: ContextSlot) -> bool:
        w = slot.collective_id % self.ways
        return self._tags[w] is slot and self._dyn[w].progressed

    def _evict(self, w: int) -> None:
        slot = self._tags[w]
        if slot is not None:
            self.save(slot)
        self._tags[w] = None
        self._dyn[w] = None

    def invalidate(self, slot: ContextSlot) -> None:
        w = slot.collective_id % self.ways
        if self._tags[w] is slot:
            self._tags[w] = None
            self._dyn[w] = None

    def flush(self) -> None:
        for w in range(self.ways):
            self._evict(w)


class CompletionCounter:
    def __init__(self):
        self._counts: dict[int, AtomicInt] = {}

    def arrive(self, collective_id: int, lanes_used: int) -> bool:
        """Count one finished lane; true for the lane that completes the collective."""
        c = self._counts.setdefault(collective_id, AtomicInt())
        if c.add_fetch(1) == lanes_used:
            c.store(0)
            return True
        return False

    def value(self, collective_id: int) -> int:
        c = self._counts.get(collective_id)
        return 0 if c is None else c.load()


@dataclass
class TaskQueueEntry:
    collective_id: int
    slot: ContextSlot
    threshold: int = 0
    stall_streak: int = 0
    boosted: bool = False
    preempted: bool = False


CONTINUE = "continue"
QUIT = "quit"


def voluntary_quit_check(
    queue: list[TaskQueueEntry],
    rounds_without_fetch: int,
    idle_rounds_limit: int,
    stall_rounds_limit: int,
) -> str:
    stuck = not queue or all(e.stall_streak >= stall_rounds_limit for e in queue)
    if stuck and rounds_without_fetch >= idle_rounds_limit:
        return QUIT
    return CONTINUE


@dataclass
class TransferMismatch:
    rank: int
    collective_id: int
    lane: int
    actual: tuple
    expected: tuple


class Daemon:
    def __init__(self, rank: "Rank", config: DaemonConfig, slices: SliceConfig):
        self.rank = rank
        self.config = config
        self.slices = slices
        self.buffer = ContextBuffer()
        self.completion = CompletionCounter()
        self.sq_cursors = [0] * config.lanes
        self.pending_cqes: list[int] = []
        self.lanes = [Lane(self, i) for i in range(config.lanes)]
        self.received = 0
        self.completed = 0
        self.launches = 0
        self.quits = 0
        self.exited = False
        self.transfer_checks = 0
        self.transfer_mismatches: list[TransferMismatch] = []
        self._admit_seq = 0
        self._plans: dict = {}
        self._sequences: dict = {}

    @property
    def running(self) -> bool:
        return any(l.running for l in self.lanes)

    @property
    def down(self) -> bool:
        return not self.running

    def launch(self) -> None:
        if self.running or self.exited:
            return
        self.launches += 1
        for lane in self.lanes:
            lane.launch()

    def lane_stopped(self, lane: "Lane", exiting: bool) -> None:
        if self.running:
            return
        if exiting and all(l.saw_exit for l in self.lanes):
            self.exited = True
        else:
            self.quits += 1
        self.rank.on_daemon_down()

    def next_admit_seq(self) -> int:
        self._admit_seq += 1
        return self._admit_seq

    def plan_for(self, meta: CollectiveMeta, count: int, lane: int):
        key = (meta.id, count, lane)
        p = self._plans.get(key)
        if p is None:
            p = self._plans[key] = plan_geometry(meta, count, lane, self.slices)
        return p

    def sequence_for(self, meta: CollectiveMeta):
        s = self._sequences.get(meta.id)
        if s is None:
            s = self._sequences[meta.id] = build_sequence(meta.kind, meta.nranks, meta.rank, meta.root)
        return s

    def post_cqe(self, collective_id: int) -> None:
        if self.pending_cqes or not self.rank.cq.try_write(collective_id):
            self.pending_cqes.append(collective_id)
            return
        self.completed += 1

    def flush_cqes(self) -> None:
        while self.pending_cqes and self.rank.cq.try_write(self.pending_cqes[0]):
            self.pending_cqes.pop(0)
            self.completed += 1

    def check_transfers(self, slot: ContextSlot) -> None:
        sctx = slot.static
        exp = sctx.expected_counters()
        got = sctx.counters
        self.transfer_checks += 1
        if got.pushes != exp.pushes or got.pops != exp.pops:
            self.transfer_mismatches.append(
                TransferMismatch(
                    self.rank.index,
                    slot.collective_id,
                    slot.lane,
                    (tuple(got.pushes), tuple(got.pops)),
                    (tuple(exp.pushes), tuple(exp.pops)),
                )
            )


class Lane:
    """One execution stream of the daemon (a thread block on the device)."""

    def __init__(self, daemon: Daemon, index: int):
        self.daemon = daemon
        self.index = index
        self.running = False
        self.saw_exit = False
        self.queue: list[TaskQueueEntry] = []
        self.cache: ContextCache | None = None
        self.pos = 0
        self.round_start = True
        self.rounds = 0
        self.rounds_without_fetch = 0
        self.fetch_checks = 0
        self.current: TaskQueueEntry | None = None
        self.cur_dyn: DynamicContext | None = None
        self.preemptions = 0
        self.ticks = 0
        self.fetched = False

    # -- lifecycle ---------------------------------------------------------

    def launch(self) -> None:
        d = self.daemon
        self.running = True
        self.cache = ContextCache(d.buffer, d.config.cache_ways)
        self.queue = []
        self.pos = 0
        self.round_start = True
        self.rounds_without_fetch = 0
        self.fetch_checks = 0
        self.current = None
        for slot in d.buffer.active_for(self.index):
            self.queue.append(TaskQueueEntry(slot.collective_id, slot, preempted=slot.preemptions > 0))
        self._emit("start", None)

    def _stop(self, exiting: bool) -> None:
        if self.cache is not None:
            self.cache.flush()
        self.running = False
        self.current = None
        self.queue = []
        self._emit("quit" if not exiting else "exit", None)
        self.daemon.lane_stopped(self, exiting)

    # -- scheduling --------------------------------------------------------

    def tick(self) -> None:
        if not self.running:
            return
        self.ticks += 1
        d = self.daemon
        if d.pending_cqes:
            d.flush_cqes()
        if d.config.baseline:
            self._tick_baseline()
            return
        if self.round_start:
            self.round_start = False
            self.fetched = self._maybe_fetch()
            if self.saw_exit and not self.queue and not d.pending_cqes:
                self._stop(exiting=True)
                return
        q = self.queue
        if not q:
            self._end_round()
            return
        entry = q[self.pos]
        if self.current is not entry:
            self._resume(entry)
        dyn = self.cur_dyn
        sctx = entry.slot.static
        spin = d.config.spin
        per_round = d.config.spins_per_round
        while True:
            res = exec_step(sctx, dyn, max(1, min(per_round, entry.threshold - dyn.spins_used)))
            if res is STEP_DONE:
                on_step_success(entry, spin)
                entry.boosted = True
                continue
            break
        if res is COLLECTIVE_DONE:
            self._complete(entry)
            if self.pos >= len(q):
                self._end_round()
        elif res.spins_used >= entry.threshold:
            self._preempt(entry, dyn)
            self.pos += 1
            if self.pos >= len(q):
                self._end_round()

    def _resume(self, entry: TaskQueueEntry) -> None:
        dyn = self.cache.load(entry.slot)
        base = initial_threshold(self.pos, self.daemon.config.spin)
        entry.threshold = max(base, entry.threshold) if entry.boosted else base
        dyn.spins_used = 0
        self.current = entry
        self.cur_dyn = dyn
        if entry.preempted:
            self._emit("resume", entry, dyn)

    def _preempt(self, entry: TaskQueueEntry, dyn: DynamicContext) -> None:
        progressed = dyn.progressed
        self.cache.save(entry.slot)
        if progressed:
            entry.stall_streak = 0
        else:
            entry.stall_streak += 1
            entry.boosted = False
        entry.preempted = True
        entry.slot.preemptions += 1
        self.preemptions += 1
        self.current = None
        self._emit("preempt", entry, dyn)

    def _end_round(self) -> None:
        self.rounds += 1
        if self.fetched:
            self.rounds_without_fetch = 0
        else:
            self.rounds_without_fetch += 1
        self.pos = 0
        self.round_start = True
        cfg = self.daemon.config
        verdict = voluntary_quit_check(
            self.queue, self.rounds_without_fetch, cfg.idle_rounds_limit, cfg.stall_rounds_limit
        )
        if verdict == QUIT and not self.saw_exit:
            self._stop(exiting=False)

    # -- SQ / completion ---------------------------------------------------

    def _maybe_fetch(self) -> bool:
        d = self.daemon
        cfg = d.config
        if self.saw_exit:
            return False
        allowed = fetch_allowed(cfg.order, self.queue, cfg.stall_rounds_limit, self.fetch_checks)
        if not allowed:
            self.fetch_checks += 1
            return False
        self.fetch_checks = 0
        limit = math.inf if cfg.order.kind is OrderKind.EAGER else 1
        fetched = 0
        while fetched < limit and self._fetch_one():
            fetched += 1
        return fetched > 0

    def _fetch_one(self) -> bool:
        d = self.daemon
        rank = d.rank
        cursor = d.sq_cursors[self.index]
        sqe = rank.sq.read(cursor)
        if sqe is None:
            return False
        d.sq_cursors[self.index] = cursor + 1
        if sqe.consumer_count.load() == 1 and not sqe.exiting:
            d.received += 1
        if sqe.exiting:
            self.saw_exit = True
            return True
        meta = rank.registry[sqe.collective_id]
        if self.index >= meta.lanes_used:
            return True
        self._admit(sqe, meta)
        return True

    def _admit(self, sqe: SQE, meta: CollectiveMeta) -> None:
        d = self.daemon
        slot = d.buffer.slot(meta.id, self.index)
        if slot.active:
            raise DuplicateEntry(f"collective {meta.id} already active on lane {self.index}")
        plan = d.plan_for(meta, sqe.elem_count, self.index)
        send_h, recv_h = d.rank.links.get((meta.id, self.index), (None, None))
        slot.static = StaticContext(
            meta=meta,
            plan=plan,
            sequence=d.sequence_for(meta),
            send_buf=sqe.send_buf,
            recv_buf=sqe.recv_buf,
            send_conn=send_h,
            recv_conn=recv_h,
        )
        slot.saved = DynamicContext()
        slot.active = True
        slot.admit_seq = d.next_admit_seq()
        slot.preemptions = 0
        slot.submission_seq = sqe.seq
        entry = TaskQueueEntry(meta.id, slot)
        pos = admit(self.queue, entry, d.config.order)
        entry.threshold = initial_threshold(pos, d.config.spin)
        slot.queue_len_at_fetch = len(self.queue)
        self._emit("fetch", entry, slot.saved)

    def _complete(self, entry: TaskQueueEntry) -> None:
        d = self.daemon
        slot = entry.slot
        self.queue.remove(entry)
        self.cache.invalidate(slot)
        self.current = None
        slot.active = False
        d.check_transfers(slot)
        d.rank.record_lane_completion(slot)
        self._emit("complete", entry, None)
        if d.completion.arrive(slot.collective_id, slot.static.meta.lanes_used):
            d.post_cqe(slot.collective_id)

    # -- baseline (non-preemptive streams) ---------------------------------

    def _tick_baseline(self) -> None:
        d = self.daemon
        slots = d.config.stream_slots
        while (slots is None or len(self.queue) < slots) and not self.saw_exit and self._fetch_one():
            pass
        for entry in list(self.queue):
            if self.current is not entry:
                self.current = entry
            dyn = entry.slot.saved
            sctx = entry.slot.static
            while True:
                res = exec_step(sctx, dyn, 1)
                if res is not STEP_DONE:
                    break
            if res is COLLECTIVE_DONE:
                self._complete(entry)
        if not self.queue and not d.pending_cqes:
            if self.saw_exit:
                self._stop(exiting=True)
            elif d.rank.sq.pending_for(d.sq_cursors[self.index]) == 0:
                self._stop(exiting=False)

    # -- events ------------------------------------------------------------

    def _emit(self, event: str, entry: TaskQueueEntry | None, dyn: DynamicContext | None = None) -> None:
        sink = self.daemon.rank.world.events
        if sink is None:
            return
        sink.append(
            {
                "event": event,
                "rank": self.daemon.rank.index,
                "lane": self.index,
                "collective_id": None if entry is None else entry.collective_id,
                "loop": None if dyn is None else dyn.loop_id,
                "step": None if dyn is None else dyn.step_id,
                "slice": None if dyn is None else dyn.slice_id,
                "spins": None if dyn is None else dyn.spins_used,
                "queue_len": len(self.queue),
                "timestamp": self.daemon.rank.world.engine.round,
            }
        )


class Supervisor:
    """Host-side watcher that (re)launches the daemon when work is outstanding."""

    def __init__(self, rank: "Rank"):
        self.rank = rank

    def should_launch(self) -> bool:
        d = self.rank.daemon
        if d.exited or d.running:
            return False
        tail = self.rank.sq.tail
        sq_nonempty = any(c < tail for c in d.sq_cursors)
        return sq_nonempty or d.completed < d.received or bool(d.pending_cqes)

    def tick(self) -> None:
        if self.should_launch():
            self.rank.daemon.launch()

    supervisor_pump = tick
