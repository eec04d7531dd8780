"""Scenario runner: benchmarks, deadlock scenarios and scheduling traces.

Every scenario checks payloads against :func:`reference_oracle`; liveness
alone never passes. Deadlock is detected only by the wall-clock watchdog.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import OracleMismatch, WatchdogTimeout
from .geometry import CollectiveKind, ElemKind, ReduceFn
from .ring import reference_oracle
from .runtime import RuntimeConfig, Submission, World, expected_lengths
from .stickiness import OrderPolicy, SpinPolicy

log = logging.getLogger(__name__)

BENCH_COLUMNS = ["kind", "nranks", "bytes", "lat", "algbw", "preemptions"]
TRACE_COLUMNS = ["rank", "index", "collective_id", "bytes", "preemptions", "queue_len"]
SCENARIOS = ("bench", "misorder", "depletion", "syncop", "trace")


@dataclass
class ScenarioSpec:
    scenario: str = "bench"
    ranks: int = 4
    lanes: int = 1
    kind: CollectiveKind = CollectiveKind.ALL_REDUCE
    op: ReduceFn = ReduceFn.SUM
    minbytes: int = 256
    maxbytes: int = 65536
    stepfactor: int = 2
    iters: int = 5
    collectives: int = 8
    order_policy: str = "fifo"
    spin_base: int = 4096
    spin_step: int = 256
    spin_min: int = 64
    boost: int = 2
    boost_cap: int | None = None
    idle_rounds: int = 256
    stall_rounds: int = 64
    spins_per_round: int = 256
    cq_impl: str = "packed"
    mode: str = "occl"
    stream_slots: int | None = None
    delay_rank: int | None = None
    delay_rounds: int = 0
    seed: int = 0
    watchdog: float = 60.0
    out: str | None = None
    format: str = "csv"

    def spin_policy(self) -> SpinPolicy:
        return SpinPolicy(self.spin_base, self.spin_step, self.spin_min, self.boost, self.boost_cap)

    def runtime_config(self) -> RuntimeConfig:
        return RuntimeConfig(
            lanes=self.lanes,
            mode=self.mode,
            order=OrderPolicy.parse(self.order_policy),
            spin=self.spin_policy(),
            idle_rounds_limit=self.idle_rounds,
            stall_rounds_limit=self.stall_rounds,
            spins_per_round=self.spins_per_round,
            stream_slots=self.stream_slots,
            cq_impl=self.cq_impl,
        )


@dataclass
class MetricsRecord:
    collective_id: int
    iteration: int
    kind: str
    nranks: int
    bytes: int
    latency: float  # seconds, mean over ranks of submit -> callback
    rounds: int  # engine rounds, max over ranks
    preemptions: dict = field(default_factory=dict)  # (rank, lane) -> count
    queue_len: dict = field(default_factory=dict)  # (rank, lane) -> length at fetch

    @property
    def algbw(self) -> float:
        return self.bytes / self.latency if self.latency > 0 else float("inf")

    @property
    def total_preemptions(self) -> int:
        return sum(self.preemptions.values())


@dataclass
class ScenarioResult:
    scenario: str
    mode: str
    passed: bool
    reason: str = ""
    records: list[MetricsRecord] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    preemptions: int = 0
    rounds: int = 0
    seconds: float = 0.0
    connector_issues: list[str] = field(default_factory=list)
    transfer_mismatches: list = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    timed_out: bool = False
    world: World | None = field(default=None, repr=False)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.reason})" if self.reason else ""
        return (
            f"{self.scenario}[{self.mode}] {status}{extra}: rounds={self.rounds} "
            f"preemptions={self.preemptions} wall={self.seconds:.2f}s"
        )


def size_sweep(minbytes: int, maxbytes: int, factor: int) -> list[int]:
    if factor < 2:
        raise ValueError("stepfactor must be >= 2")
    out, b = [], minbytes
    while b <= maxbytes:
        out.append(b)
        b *= factor
    return out


def geometric_sizes(minbytes: int, maxbytes: int, k: int, itemsize: int) -> list[int]:
    """``k`` element counts spread geometrically between the byte bounds."""
    raw = np.geomspace(minbytes, maxbytes, k) if k > 1 else np.array([minbytes])
    return [max(1, int(round(b / itemsize))) for b in raw]


class _Job:
    """One world plus its registered collectives and the oracle bookkeeping."""

    def __init__(self, spec: ScenarioSpec, nranks: int | None = None, config: RuntimeConfig | None = None):
        self.spec = spec
        self.n = nranks or spec.ranks
        self.world = World(self.n, config or spec.runtime_config(), seed=spec.seed)
        self.rng = np.random.default_rng(spec.seed)
        self.elem = ElemKind.INT32
        self.mismatches: list[str] = []
        self.root = 0 if spec.kind.rooted else None

    def register(self, kind: CollectiveKind | None = None) -> int:
        kind = kind or self.spec.kind
        return self.world.register(
            kind,
            root=0 if kind.rooted else None,
            reduce_fn=self.spec.op if kind.reducing else None,
            lanes_used=self.spec.lanes,
            elem_kind=self.elem,
        )

    def buffers(self, cid: int, count: int):
        meta = self.world.ranks[0].registry[cid]
        s_len, r_len = expected_lengths(meta.kind, self.n, count)
        ins = [self.rng.integers(-8, 9, s_len, dtype=np.int32) for _ in range(self.n)]
        outs = [np.full(r_len, -1, dtype=np.int32) for _ in range(self.n)]
        return ins, outs

    def check(self, cid: int, ins, outs, tag: str = "") -> None:
        meta = self.world.ranks[0].registry[cid]
        exp = reference_oracle(meta.kind, ins, meta.reduce_fn, meta.root)
        for r in range(self.n):
            want = exp[r] if exp[r] is not None else np.full(len(outs[r]), -1, dtype=np.int32)
            if not np.array_equal(want, outs[r]):
                bad = int(np.flatnonzero(want != outs[r])[0])
                self.mismatches.append(
                    f"{tag}collective {cid} rank {r}: first diff at {bad}: got {outs[r][bad]} want {want[bad]}"
                )

    def finish(self, result: ScenarioResult, start: float) -> ScenarioResult:
        w = self.world
        result.world = w
        result.seconds = time.perf_counter() - start
        result.rounds = w.engine.round
        result.preemptions = w.preemptions()
        result.connector_issues = w.connector_report()
        result.transfer_mismatches = w.transfer_mismatches()
        result.events = w.events or []
        if self.mismatches:
            result.passed = False
            result.reason = "oracle mismatch: " + self.mismatches[0]
        elif result.connector_issues:
            result.passed = False
            result.reason = "connector audit: " + result.connector_issues[0]
        elif result.transfer_mismatches:
            result.passed = False
            result.reason = f"transfer counters: {result.transfer_mismatches[0]}"
        return result

    def run(self, result: ScenarioResult) -> bool:
        try:
            self.world.run(self.spec.watchdog)
            self.world.shutdown(self.spec.watchdog)
        except WatchdogTimeout as exc:
            result.passed = False
            result.timed_out = True
            result.reason = f"watchdog timeout after {self.spec.watchdog:g}s"
            log.info("%s", exc)
            return False
        result.passed = True
        return True


def _record(cid: int, it: int, subs: list[Submission], kind: CollectiveKind, n: int, nbytes: int) -> MetricsRecord:
    pre, ql = {}, {}
    for s in subs:
        for lane, v in s.preemptions.items():
            pre[(s.rank, lane)] = v
        for lane, v in s.queue_len_at_fetch.items():
            ql[(s.rank, lane)] = v
    return MetricsRecord(
        collective_id=cid,
        iteration=it,
        kind=kind.value,
        nranks=n,
        bytes=nbytes,
        latency=statistics.fmean(s.latency for s in subs),
        rounds=max(s.rounds for s in subs),
        preemptions=pre,
        queue_len=ql,
    )


def run_bench(spec: ScenarioSpec) -> ScenarioResult:
    job = _Job(spec)
    w, n = job.world, job.n
    itemsize = job.elem.dtype.itemsize
    sizes = size_sweep(spec.minbytes, spec.maxbytes, spec.stepfactor)
    result = ScenarioResult("bench", spec.mode, False)
    plan = []
    for nbytes in sizes:
        count = max(1, nbytes // itemsize)
        plan.append((nbytes, count, job.register()))
    per_size: dict[int, list[MetricsRecord]] = {b: [] for b in sizes}

    def program(r: int, work):
        rank = w.ranks[r]
        for nbytes, cid, it, ins, outs in work:
            sub = yield from rank.submit(cid, ins[r], outs[r])
            yield from rank.wait(sub)

    work = []
    for nbytes, count, cid in plan:
        for it in range(spec.iters):
            ins, outs = job.buffers(cid, count)
            work.append((nbytes, cid, it, ins, outs))
    for r in range(n):
        w.spawn(program(r, work), f"bench-{r}")
    start = time.perf_counter()
    job.run(result)
    if result.passed:
        subs_by = {}
        for rank in w.ranks:
            for i, s in enumerate(rank.history):
                subs_by.setdefault(i, []).append(s)
        for i, (nbytes, cid, it, ins, outs) in enumerate(work):
            job.check(cid, ins, outs, f"iter {it} ")
            per_size[nbytes].append(_record(cid, it, subs_by[i], spec.kind, n, nbytes))
        for nbytes in sizes:
            recs = per_size[nbytes]
            lat = statistics.fmean(r.latency for r in recs)
            result.rows.append(
                {
                    "kind": spec.kind.value,
                    "nranks": n,
                    "bytes": nbytes,
                    "lat": round(lat * 1e6, 3),
                    "algbw": round(nbytes / lat / 1e9, 6) if lat > 0 else float("inf"),
                    "preemptions": sum(r.total_preemptions for r in recs),
                }
            )
            result.records.extend(recs)
    job.finish(result, start)
    if job.mismatches:
        raise OracleMismatch("\n".join(job.mismatches))
    return result


def pair_orders(k: int, nranks: int, rng: np.random.Generator) -> list[list[int]]:
    """Adjacent rank pairs submit in mutually reversed orders."""
    base = [int(x) for x in rng.permutation(k)]
    return [base if r % 2 == 0 else base[::-1] for r in range(nranks)]


def rotated_orders(k: int, nranks: int) -> list[list[int]]:
    return [[(i + r) % k for i in range(k)] for r in range(nranks)]


def run_misorder(spec: ScenarioSpec) -> ScenarioResult:
    if spec.ranks < 2 or spec.ranks % 2:
        raise ValueError("misorder needs an even number of ranks >= 2")
    cfg = spec.runtime_config()
    if spec.mode == "baseline" and spec.stream_slots is None:
        cfg = dataclasses.replace(cfg, stream_slots=1)  # one in-order queue per rank
    job = _Job(spec, config=cfg)
    w = job.world
    sizes = geometric_sizes(spec.minbytes, spec.maxbytes, spec.collectives, job.elem.dtype.itemsize)
    cids = [job.register() for _ in sizes]
    order_rng = np.random.default_rng(spec.seed + 1)
    work = []
    for it in range(spec.iters):
        orders = pair_orders(len(cids), job.n, order_rng)
        bufs = [(cid, *job.buffers(cid, count)) for cid, count in zip(cids, sizes)]
        work.append((orders, bufs))
    result = ScenarioResult("misorder", spec.mode, False)
    _spawn_iterations(job, work)
    start = time.perf_counter()
    if job.run(result):
        for it, (orders, bufs) in enumerate(work):
            for cid, ins, outs in bufs:
                job.check(cid, ins, outs, f"iter {it} ")
        _collect_records(job, result, sizes, cids)
    return job.finish(result, start)


def _spawn_iterations(job: _Job, work) -> None:
    w = job.world

    def program(r: int):
        rank = w.ranks[r]
        for orders, bufs in work:
            subs = []
            for idx in orders[r]:
                cid, ins, outs = bufs[idx]
                subs.append((yield from rank.submit(cid, ins[r], outs[r])))
            yield from rank.wait(*subs)

    for r in range(job.n):
        w.spawn(program(r), f"rank-{r}")


def _collect_records(job: _Job, result: ScenarioResult, sizes, cids) -> None:
    itemsize = job.elem.dtype.itemsize
    size_of = dict(zip(cids, sizes))
    by_key: dict[tuple[int, int], list[Submission]] = {}
    seen: dict[tuple[int, int], int] = {}
    for rank in job.world.ranks:
        for s in rank.history:
            k = (rank.index, s.collective_id)
            it = seen.get(k, 0)
            seen[k] = it + 1
            by_key.setdefault((s.collective_id, it), []).append(s)
    for (cid, it), subs in sorted(by_key.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        meta = job.world.ranks[0].registry[cid]
        result.records.append(_record(cid, it, subs, meta.kind, job.n, size_of[cid] * itemsize))


def run_depletion(spec: ScenarioSpec) -> ScenarioResult:
    """Streams analog: each rank can run at most ``stream_slots`` collectives at once."""
    slots = spec.stream_slots or 2
    k = spec.collectives
    n = spec.ranks
    cfg = spec.runtime_config()
    if spec.mode == "baseline":
        cfg = dataclasses.replace(cfg, stream_slots=slots)
    job = _Job(spec, nranks=n, config=cfg)
    sizes = geometric_sizes(spec.minbytes, spec.maxbytes, k, job.elem.dtype.itemsize)
    cids = [job.register() for _ in sizes]
    work = []
    for it in range(spec.iters):
        bufs = [(cid, *job.buffers(cid, count)) for cid, count in zip(cids, sizes)]
        work.append((rotated_orders(k, n), bufs))
    result = ScenarioResult("depletion", spec.mode, False)
    _spawn_iterations(job, work)
    start = time.perf_counter()
    if job.run(result):
        for it, (orders, bufs) in enumerate(work):
            for cid, ins, outs in bufs:
                job.check(cid, ins, outs, f"iter {it} ")
        _collect_records(job, result, sizes, cids)
    return job.finish(result, start)


def run_syncop(spec: ScenarioSpec) -> ScenarioResult:
    """Rank 0 runs A, sync, B; rank 1 runs B, sync, A."""
    n = spec.ranks
    if n not in (1, 2):
        raise ValueError("syncop runs on 2 ranks (or 1 for the degenerate control)")
    job = _Job(spec, nranks=n)
    w = job.world
    count = max(1, spec.minbytes // job.elem.dtype.itemsize)
    a, b = job.register(), job.register()
    bufs = {cid: job.buffers(cid, count) for cid in (a, b)}
    orders = [(a, b), (b, a)]

    def program(r: int):
        rank = w.ranks[r]
        first, second = orders[r]
        s1 = yield from rank.submit(first, bufs[first][0][r], bufs[first][1][r])
        yield from rank.synchronize()
        s2 = yield from rank.submit(second, bufs[second][0][r], bufs[second][1][r])
        yield from rank.wait(s1, s2)

    for r in range(n):
        w.spawn(program(r), f"rank-{r}")
    result = ScenarioResult("syncop", spec.mode, False)
    start = time.perf_counter()
    if job.run(result):
        for cid in (a, b):
            job.check(cid, *bufs[cid])
        _collect_records(job, result, [count, count], [a, b])
    return job.finish(result, start)


def run_trace(spec: ScenarioSpec) -> ScenarioResult:
    """Burst of back-to-back collectives with one rank issuing late."""
    job = _Job(spec)
    w = job.world
    itemsize = job.elem.dtype.itemsize
    k = spec.collectives
    size_rng = np.random.default_rng(spec.seed + 7)
    lo, hi = np.log(spec.minbytes), np.log(spec.maxbytes)
    sizes = [max(1, int(np.exp(size_rng.uniform(lo, hi))) // itemsize) for _ in range(k)]
    cids = [job.register() for _ in range(k)]
    bufs = [(cid, *job.buffers(cid, count)) for cid, count in zip(cids, sizes)]

    def program(r: int):
        rank = w.ranks[r]
        subs = []
        for cid, ins, outs in bufs:
            if r == spec.delay_rank and spec.delay_rounds:
                yield _sleep(spec.delay_rounds)
            subs.append((yield from rank.submit(cid, ins[r], outs[r])))
        yield from rank.wait(*subs)

    for r in range(job.n):
        w.spawn(program(r), f"rank-{r}")
    result = ScenarioResult("trace", spec.mode, False)
    start = time.perf_counter()
    if job.run(result):
        for cid, ins, outs in bufs:
            job.check(cid, ins, outs)
        _collect_records(job, result, sizes, cids)
        for idx, cid in enumerate(cids):
            for rank in w.ranks:
                s = next(s for s in rank.history if s.collective_id == cid)
                result.rows.append(
                    {
                        "rank": rank.index,
                        "index": idx,
                        "collective_id": cid,
                        "bytes": sizes[idx] * itemsize,
                        "preemptions": sum(s.preemptions.values()),
                        "queue_len": max(s.queue_len_at_fetch.values(), default=0),
                    }
                )
    return job.finish(result, start)


def _sleep(rounds: int):
    from .engine import Sleep

    return Sleep(rounds)


RUNNERS = {
    "bench": run_bench,
    "misorder": run_misorder,
    "depletion": run_depletion,
    "syncop": run_syncop,
    "trace": run_trace,
}


def run_scenario(spec: ScenarioSpec) -> ScenarioResult:
    return RUNNERS[spec.scenario](spec)


# -- output ------------------------------------------------------------------


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row.get(c) for c in columns})
    return buf.getvalue()


def events_to_jsonl(events: list[dict]) -> str:
    return "".join(json.dumps(e) + "\n" for e in events)


def write_outputs(result: ScenarioResult, out: str | None, fmt: str) -> list[Path]:
    """Write the result table (and the event log when present) next to ``out``."""
    if out is None:
        return []
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = BENCH_COLUMNS if result.scenario == "bench" else TRACE_COLUMNS
    rows = result.rows or [_record_row(r) for r in result.records]
    if result.scenario not in ("bench", "trace"):
        columns = ["collective_id", "iteration", "bytes", "lat", "rounds", "preemptions", "queue_len"]
    written = [path]
    if fmt == "json":
        path.write_text(json.dumps({"summary": result.summary(), "passed": result.passed, "rows": rows}, indent=1))
    else:
        path.write_text(rows_to_csv(rows, columns))
    if result.events:
        ev = path.with_suffix(".events.jsonl")
        ev.write_text(events_to_jsonl(result.events))
        written.append(ev)
    return written


def _record_row(rec: MetricsRecord) -> dict:
    return {
        "collective_id": rec.collective_id,
        "iteration": rec.iteration,
        "bytes": rec.bytes,
        "lat": round(rec.latency * 1e6, 3),
        "rounds": rec.rounds,
        "preemptions": rec.total_preemptions,
        "queue_len": max(rec.queue_len.values(), default=0),
    }
