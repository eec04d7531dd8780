"""Ring primitive sequences and the single-threaded reference oracle.

Ranks form the ring ``r -> r + 1``. Rooted collectives use the ring cut at
the root: Broadcast flows ``root, root+1, ..., root-1`` and Reduce flows
``root+1, ..., root-1, root``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import reduce as _fold

import numpy as np

from .errors import InvalidMeta
from .geometry import CollectiveKind, ReduceFn
from .primitives import PrimitiveKind as P


@dataclass(frozen=True)
class Step:
    kind: P
    chunk: int
    local_copy: bool = False  # Broadcast root also writes its own recv buffer


@dataclass(frozen=True)
class SequencePlan:
    kind: CollectiveKind
    nranks: int
    rank: int
    steps: tuple[Step, ...]
    local_copy: bool = False

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "nranks": self.nranks,
            "rank": self.rank,
            "local_copy": self.local_copy,
            "steps": [{"kind": s.kind.value, "chunk": s.chunk, "local_copy": s.local_copy} for s in self.steps],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def build_sequence(kind: CollectiveKind, nranks: int, rank: int, root: int | None = None) -> SequencePlan:
    if nranks < 1 or not 0 <= rank < nranks:
        raise InvalidMeta(f"rank {rank} outside [0, {nranks})")
    if kind.rooted and (root is None or not 0 <= root < nranks):
        raise InvalidMeta(f"{kind.value} needs a root in [0, {nranks})")
    if nranks == 1:
        return SequencePlan(kind, 1, 0, (), local_copy=True)

    n = nranks
    ring = lambda k: (rank + k) % n  # noqa: E731
    if kind is CollectiveKind.ALL_REDUCE:
        steps = [Step(P.SEND, ring(-1))]
        steps += [Step(P.RECV_REDUCE_SEND, ring(-j)) for j in range(2, n)]
        steps += [Step(P.RECV_REDUCE_COPY_SEND, rank)]
        steps += [Step(P.RECV_COPY_SEND, ring(-j)) for j in range(1, n - 1)]
        steps += [Step(P.RECV, ring(1))]
    elif kind is CollectiveKind.REDUCE_SCATTER:
        steps = [Step(P.SEND, ring(-1))]
        steps += [Step(P.RECV_REDUCE_SEND, ring(-j)) for j in range(2, n)]
        steps += [Step(P.RECV_REDUCE_COPY, rank)]
    elif kind is CollectiveKind.ALL_GATHER:
        steps = [Step(P.COPY_SEND, rank)]
        steps += [Step(P.RECV_COPY_SEND, ring(-j)) for j in range(1, n - 1)]
        steps += [Step(P.RECV, ring(1))]
    elif kind is CollectiveKind.BROADCAST:
        pos = (rank - root) % n
        if pos == 0:
            steps = [Step(P.SEND, 0, local_copy=True)]
        elif pos == n - 1:
            steps = [Step(P.RECV, 0)]
        else:
            steps = [Step(P.RECV_COPY_SEND, 0)]
    else:
        pos = (rank - root - 1) % n
        if pos == 0:
            steps = [Step(P.SEND, 0)]
        elif pos == n - 1:
            steps = [Step(P.RECV_REDUCE_COPY, 0)]
        else:
            steps = [Step(P.RECV_REDUCE_SEND, 0)]
    return SequencePlan(kind, n, rank, tuple(steps))


def reference_oracle(
    kind: CollectiveKind,
    inputs: list[np.ndarray],
    reduce_fn: ReduceFn | None = None,
    root: int | None = None,
) -> list[np.ndarray | None]:
    """Expected recv buffer of every rank.

    ``None`` marks a rank whose recv buffer the collective leaves untouched
    (non-root ranks of Reduce).
    """
    n = len(inputs)
    if len({len(x) for x in inputs}) > 1:
        raise ValueError("inputs must have equal length on every rank")
    if kind is CollectiveKind.ALL_GATHER:
        out = np.concatenate(inputs)
        return [out.copy() for _ in range(n)]
    if kind is CollectiveKind.BROADCAST:
        return [inputs[root].copy() for _ in range(n)]
    folded = _fold(reduce_fn.ufunc, inputs)
    if kind is CollectiveKind.ALL_REDUCE:
        return [folded.copy() for _ in range(n)]
    if kind is CollectiveKind.REDUCE:
        return [folded.copy() if r == root else None for r in range(n)]
    count = len(folded) // n
    return [folded[r * count:(r + 1) * count].copy() for r in range(n)]
