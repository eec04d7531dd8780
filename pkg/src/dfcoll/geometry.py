"""Collective registration and chunk/slice geometry.

Every element a lane owns is addressed by a (loop, chunk, slice) cell. Cell
coordinates are expressed in a kind-dependent *global* element space:

* AllReduce, Broadcast, Reduce: index into the (equal-sized) send/recv buffer.
* AllGather, ReduceScatter: index into the large ``nranks * count`` buffer
  (recv buffer for AllGather, send buffer for ReduceScatter); chunk ``c`` of a
  loop lives in rank block ``c``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import threading
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import InvalidMeta, RegistryFull


class CollectiveKind(enum.Enum):
    ALL_REDUCE = "allreduce"
    ALL_GATHER = "allgather"
    REDUCE_SCATTER = "reducescatter"
    BROADCAST = "broadcast"
    REDUCE = "reduce"

    @property
    def rooted(self) -> bool:
        return self in (CollectiveKind.BROADCAST, CollectiveKind.REDUCE)

    @property
    def reducing(self) -> bool:
        return self in (CollectiveKind.ALL_REDUCE, CollectiveKind.REDUCE_SCATTER, CollectiveKind.REDUCE)

    @property
    def per_rank_chunks(self) -> bool:
        return not self.rooted


class ReduceFn(enum.Enum):
    SUM = "sum"
    PROD = "prod"
    MIN = "min"
    MAX = "max"

    @property
    def ufunc(self) -> np.ufunc:
        return _UFUNCS[self]

    def apply(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _UFUNCS[self](a, b)


_UFUNCS = {
    ReduceFn.SUM: np.add,
    ReduceFn.PROD: np.multiply,
    ReduceFn.MIN: np.minimum,
    ReduceFn.MAX: np.maximum,
}


class ElemKind(enum.Enum):
    INT32 = "int32"
    INT64 = "int64"
    FLOAT32 = "float32"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)


@dataclass(frozen=True)
class CollectiveMeta:
    kind: CollectiveKind
    nranks: int
    rank: int
    root: int | None = None
    lanes_used: int = 1
    lane_width: int = 32
    reduce_fn: ReduceFn | None = None
    elem_kind: ElemKind = ElemKind.INT32
    id: int | None = None

    def validate(self, device_lanes: int | None = None) -> None:
        if self.nranks < 1:
            raise InvalidMeta(f"nranks must be positive, got {self.nranks}")
        if not 0 <= self.rank < self.nranks:
            raise InvalidMeta(f"rank {self.rank} outside [0, {self.nranks})")
        if self.kind.rooted:
            if self.root is None or not 0 <= self.root < self.nranks:
                raise InvalidMeta(f"{self.kind.value} needs a root in [0, {self.nranks}), got {self.root}")
        elif self.root is not None:
            raise InvalidMeta(f"{self.kind.value} takes no root")
        if self.kind.reducing and self.reduce_fn is None:
            raise InvalidMeta(f"{self.kind.value} needs a reduce_fn")
        if self.lanes_used < 1 or self.lane_width < 1:
            raise InvalidMeta("lanes_used and lane_width must be positive")
        if device_lanes is not None and self.lanes_used > device_lanes:
            raise InvalidMeta(f"lanes_used={self.lanes_used} exceeds device lanes {device_lanes}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "nranks": self.nranks,
            "rank": self.rank,
            "root": self.root,
            "lanes_used": self.lanes_used,
            "reduce_fn": self.reduce_fn.value if self.reduce_fn else None,
            "elem_kind": self.elem_kind.value,
        }


@dataclass(frozen=True)
class SliceConfig:
    slice_elems: int = 256
    slices_per_chunk: int = 4


DEFAULT_SLICES = SliceConfig()


def _cdiv(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class ChunkPlan:
    kind: CollectiveKind
    nranks: int
    count: int
    part_start: int
    part_len: int
    slice_elems: int
    slices_per_chunk: int
    chunk_elems: int
    loop_elems: int
    num_loops: int
    tail_slice_elems: int

    def chunk_span(self, loop: int, chunk: int) -> tuple[int, int]:
        """Global element range ``[lo, hi)`` of one chunk of one loop."""
        if self.kind is CollectiveKind.ALL_REDUCE:
            done = loop * self.loop_elems
            rem = min(self.loop_elems, self.part_len - done)
            real = min(self.chunk_elems, _cdiv(rem, self.nranks))
            base = self.part_start + done
            return base + min(chunk * real, rem), base + min((chunk + 1) * real, rem)
        start = self.part_start + loop * self.chunk_elems
        stop = min(start + self.chunk_elems, self.part_start + self.part_len)
        if self.kind.per_rank_chunks:
            off = chunk * self.count
            return off + start, off + stop
        return start, stop

    def num_slices(self, loop: int, chunk: int) -> int:
        lo, hi = self.chunk_span(loop, chunk)
        return _cdiv(max(hi - lo, 0), self.slice_elems)

    def slice_span(self, loop: int, chunk: int, s: int) -> tuple[int, int]:
        lo, hi = self.chunk_span(loop, chunk)
        a = lo + s * self.slice_elems
        return a, min(a + self.slice_elems, hi)

    @property
    def chunks_per_loop(self) -> int:
        return self.nranks if self.kind.per_rank_chunks else 1

    def cells(self) -> Iterator[tuple[int, int, int, int, int]]:
        """Yield ``(loop, chunk, slice, lo, hi)`` for every non-empty cell."""
        for loop in range(self.num_loops):
            for chunk in range(self.chunks_per_loop):
                for s in range(self.num_slices(loop, chunk)):
                    lo, hi = self.slice_span(loop, chunk, s)
                    yield loop, chunk, s, lo, hi


def lane_partition(elem_count: int, lanes_used: int, lane_index: int) -> tuple[int, int]:
    per = _cdiv(elem_count, lanes_used)
    start = min(lane_index * per, elem_count)
    return start, min(start + per, elem_count) - start


def plan_geometry(
    meta: CollectiveMeta,
    elem_count: int,
    lane_index: int,
    config: SliceConfig = DEFAULT_SLICES,
) -> ChunkPlan:
    """Deterministic chunk plan for one lane of one collective.

    ``elem_count`` is the per-rank block size for AllGather/ReduceScatter and
    the full buffer length otherwise. A lane whose partition is empty gets a
    zero-loop plan.
    """
    if elem_count < 1:
        raise ValueError("elem_count must be >= 1")
    if not 0 <= lane_index < meta.lanes_used:
        raise ValueError(f"lane_index {lane_index} outside [0, {meta.lanes_used})")
    start, length = lane_partition(elem_count, meta.lanes_used, lane_index)
    chunk = config.slice_elems * config.slices_per_chunk
    if meta.kind is CollectiveKind.ALL_REDUCE:
        loop_elems = chunk * meta.nranks
        num_loops = _cdiv(length, loop_elems)
    elif meta.kind.per_rank_chunks:
        loop_elems = chunk * meta.nranks
        num_loops = _cdiv(length, chunk)
    else:
        loop_elems = chunk
        num_loops = _cdiv(length, chunk)
    plan = ChunkPlan(
        kind=meta.kind,
        nranks=meta.nranks,
        count=elem_count,
        part_start=start,
        part_len=length,
        slice_elems=config.slice_elems,
        slices_per_chunk=config.slices_per_chunk,
        chunk_elems=chunk,
        loop_elems=loop_elems,
        num_loops=num_loops,
        tail_slice_elems=0,
    )
    return dataclasses.replace(plan, tail_slice_elems=_tail_slice(plan))


def _tail_slice(plan: ChunkPlan) -> int:
    if plan.num_loops == 0:
        return 0
    last = plan.num_loops - 1
    for chunk in reversed(range(plan.chunks_per_loop)):
        n = plan.num_slices(last, chunk)
        if n:
            lo, hi = plan.slice_span(last, chunk, n - 1)
            return hi - lo
    return 0


class Registry:
    """Per-rank collective registry. IDs are dense and never reused."""

    def __init__(self, device_lanes: int = 1, max_collectives: int = 1000):
        self.device_lanes = device_lanes
        self.max_collectives = max_collectives
        self._metas: list[CollectiveMeta] = []
        self._lock = threading.Lock()

    def register(self, meta: CollectiveMeta) -> int:
        meta.validate(self.device_lanes)
        with self._lock:
            if len(self._metas) >= self.max_collectives:
                raise RegistryFull(f"registry holds {self.max_collectives} collectives")
            cid = len(self._metas)
            self._metas.append(dataclasses.replace(meta, id=cid))
        return cid

    def __getitem__(self, cid: int) -> CollectiveMeta:
        return self._metas[cid]

    def __len__(self) -> int:
        return len(self._metas)

    def __contains__(self, cid: object) -> bool:
        return isinstance(cid, int) and 0 <= cid < len(self._metas)

    def snapshot(self) -> list[dict]:
        return [m.to_json() for m in self._metas]

    def dumps(self) -> str:
        return json.dumps(self.snapshot())
