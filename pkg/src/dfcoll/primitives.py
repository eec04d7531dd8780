"""Fused primitives and the resumable single-lane executor."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import CorruptContext
from .geometry import ChunkPlan, CollectiveKind, CollectiveMeta, ReduceFn

if TYPE_CHECKING:
    from .connector import RecvHandle, SendHandle
    from .ring import SequencePlan


class PrimitiveKind(enum.Enum):
    SEND = "send"
    RECV = "recv"
    COPY_SEND = "copySend"
    RECV_COPY_SEND = "recvCopySend"
    RECV_REDUCE_SEND = "recvReduceSend"
    RECV_REDUCE_COPY = "recvReduceCopy"
    RECV_REDUCE_COPY_SEND = "recvReduceCopySend"

    @property
    def has_send(self) -> bool:
        return self in _SENDS

    @property
    def has_recv(self) -> bool:
        return self in _RECVS

    @property
    def has_reduce(self) -> bool:
        return self in _REDUCES

    @property
    def reads_local(self) -> bool:
        """Whether the primitive consumes a slice of the local send buffer."""
        return self.has_reduce or self in (PrimitiveKind.SEND, PrimitiveKind.COPY_SEND)

    @property
    def writes_recv_buf(self) -> bool:
        return self in _COPIES


P = PrimitiveKind
_SENDS = {P.SEND, P.COPY_SEND, P.RECV_COPY_SEND, P.RECV_REDUCE_SEND, P.RECV_REDUCE_COPY_SEND}
_RECVS = {P.RECV, P.RECV_COPY_SEND, P.RECV_REDUCE_SEND, P.RECV_REDUCE_COPY, P.RECV_REDUCE_COPY_SEND}
_REDUCES = {P.RECV_REDUCE_SEND, P.RECV_REDUCE_COPY, P.RECV_REDUCE_COPY_SEND}
_COPIES = {P.RECV, P.COPY_SEND, P.RECV_COPY_SEND, P.RECV_REDUCE_COPY, P.RECV_REDUCE_COPY_SEND}


def apply_action_set(
    kind: PrimitiveKind,
    incoming: np.ndarray | None,
    local_in: np.ndarray | None,
    reduce_fn: ReduceFn | None = None,
) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Pure data path of one primitive on one slice.

    Returns ``(to_recv_buf, to_send_conn)``; either side is ``None`` when the
    primitive has no copy / send action.
    """
    if kind.has_reduce:
        value = reduce_fn.apply(incoming, local_in)
    elif kind.has_recv:
        value = incoming
    else:
        value = local_in
    return (value if kind.writes_recv_buf else None), (value if kind.has_send else None)


@dataclass
class DynamicContext:
    loop_id: int = 0
    step_id: int = 0
    slice_id: int = 0
    spins_used: int = 0
    progressed: bool = False

    def copy(self) -> "DynamicContext":
        return DynamicContext(self.loop_id, self.step_id, self.slice_id, self.spins_used, self.progressed)


@dataclass
class TransferCounters:
    """Per-step slice counts of one execution, summed over loops."""

    pushes: list[int]
    pops: list[int]


@dataclass
class StaticContext:
    meta: CollectiveMeta
    plan: ChunkPlan
    sequence: "SequencePlan"
    send_buf: np.ndarray
    recv_buf: np.ndarray
    send_conn: "SendHandle | None" = None
    recv_conn: "RecvHandle | None" = None
    counters: TransferCounters | None = field(default=None)

    def __post_init__(self):
        if self.counters is None:
            n = len(self.sequence.steps)
            self.counters = TransferCounters([0] * n, [0] * n)

    def expected_counters(self) -> TransferCounters:
        n = len(self.sequence.steps)
        pushes, pops = [0] * n, [0] * n
        for loop in range(self.plan.num_loops):
            for i, step in enumerate(self.sequence.steps):
                k = self.plan.num_slices(loop, step.chunk)
                if step.kind.has_send:
                    pushes[i] += k
                if step.kind.has_recv:
                    pops[i] += k
        return TransferCounters(pushes, pops)

    def buffer_views(self, chunk: int, lo: int, hi: int) -> tuple[slice, slice]:
        """Map a global cell range to (send_buf, recv_buf) index ranges."""
        kind = self.plan.kind
        if kind is CollectiveKind.ALL_GATHER:
            off = chunk * self.plan.count
            return slice(lo - off, hi - off), slice(lo, hi)
        if kind is CollectiveKind.REDUCE_SCATTER:
            off = chunk * self.plan.count
            return slice(lo, hi), slice(lo - off, hi - off)
        return slice(lo, hi), slice(lo, hi)


class StepDone:
    __slots__ = ()

    def __repr__(self) -> str:
        return "StepDone"


class CollectiveDone:
    __slots__ = ()

    def __repr__(self) -> str:
        return "CollectiveDone"


STEP_DONE = StepDone()
COLLECTIVE_DONE = CollectiveDone()


@dataclass(frozen=True)
class Stalled:
    spins_used: int


def exec_step(sctx: StaticContext, dctx: DynamicContext, spin_budget: int):
    """Advance the current primitive of one lane.

    Works slice by slice. Each readiness probe of the connectors is one
    attempt; a failed attempt costs one spin, a success clears the spin
    count. Returns ``STEP_DONE`` when the current step finished (the cursor
    already points at the next one), ``COLLECTIVE_DONE`` after the last slice
    of the last loop, or ``Stalled(k)`` after ``spin_budget`` failed attempts
    in this call, where ``k`` counts failures since the last success.
    """
    if spin_budget < 1:
        raise ValueError("spin_budget must be positive")
    seq = sctx.sequence
    plan = sctx.plan
    if seq.local_copy:
        _local_copy(sctx)
        dctx.loop_id = plan.num_loops
        dctx.progressed = True
        return COLLECTIVE_DONE
    nsteps = len(seq.steps)
    if dctx.loop_id == plan.num_loops and dctx.step_id == 0 and dctx.slice_id == 0:
        return COLLECTIVE_DONE
    if not (0 <= dctx.loop_id < plan.num_loops and 0 <= dctx.step_id < nsteps):
        raise CorruptContext(f"cursor {dctx} outside plan ({plan.num_loops} loops, {nsteps} steps)")

    step = seq.steps[dctx.step_id]
    kind = step.kind
    nslices = plan.num_slices(dctx.loop_id, step.chunk)
    if dctx.slice_id > nslices:
        raise CorruptContext(f"slice {dctx.slice_id} beyond {nslices} slices of step {dctx.step_id}")
    send, recv = sctx.send_conn, sctx.recv_conn
    counters = sctx.counters
    while dctx.slice_id < nslices:
        if (kind.has_send and not send.ready()) or (kind.has_recv and not recv.ready()):
            # peers cannot move while this call runs, so every further probe in
            # the call would fail the same way: charge them all at once
            dctx.spins_used += spin_budget
            return Stalled(dctx.spins_used)
        lo, hi = plan.slice_span(dctx.loop_id, step.chunk, dctx.slice_id)
        s_idx, r_idx = sctx.buffer_views(step.chunk, lo, hi)
        incoming = None
        if kind.has_recv:
            incoming, _ = recv.try_pop()
            counters.pops[dctx.step_id] += 1
        local_in = sctx.send_buf[s_idx] if kind.reads_local else None
        to_recv, to_send = apply_action_set(kind, incoming, local_in, sctx.meta.reduce_fn)
        if step.local_copy:
            sctx.recv_buf[r_idx] = local_in
        if to_recv is not None:
            sctx.recv_buf[r_idx] = to_recv
        if to_send is not None:
            send.try_push(to_send)
            counters.pushes[dctx.step_id] += 1
        dctx.slice_id += 1
        dctx.spins_used = 0
        dctx.progressed = True

    dctx.slice_id = 0
    dctx.step_id += 1
    if dctx.step_id == nsteps:
        dctx.step_id = 0
        dctx.loop_id += 1
        if dctx.loop_id == plan.num_loops:
            return COLLECTIVE_DONE
    return STEP_DONE


def _local_copy(sctx: StaticContext) -> None:
    # single rank: for every kind the only block is the whole buffer on both sides
    lo = sctx.plan.part_start
    hi = lo + sctx.plan.part_len
    sctx.recv_buf[lo:hi] = sctx.send_buf[lo:hi]
