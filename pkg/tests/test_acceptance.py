"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import os
import statistics
import sys
import time
from collections import Counter

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from conftest import cq_stress, run_collective  # noqa: E402
from dfcoll import CollectiveKind as K, ReduceFn, RuntimeConfig, SpinPolicy, World, reference_oracle  # noqa: E402
from dfcoll.engine import Sleep  # noqa: E402
from dfcoll.geometry import SliceConfig  # noqa: E402
from dfcoll.harness import ScenarioSpec, run_depletion, run_misorder, run_syncop, run_trace  # noqa: E402
from dfcoll.runtime import expected_lengths  # noqa: E402

RESULTS: dict[int, str] = {}
WORLDS: list[tuple[str, World, bool]] = []  # (label, world, finished) for the connector audit

COUNTS = (1, 7, 256, 1000, 65536)
NRANKS = (2, 3, 4, 8)


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(RESULTS[n])


def fns(kind):
    return list(ReduceFn) if kind.reducing else [None]


def outputs_match(kind, ins, outs, fn, root):
    exp = reference_oracle(kind, ins, fn, root)
    for e, o in zip(exp, outs):
        want = np.full(len(o), -1, dtype=o.dtype) if e is None else e
        if not np.array_equal(want, o):
            return False
    return True


# -- 1 ------------------------------------------------------------------------


def criterion_1():
    start = time.perf_counter()
    runs = bad = 0
    for kind in K:
        for n in NRANKS:
            for count in COUNTS:
                for fn in fns(kind):
                    root = (count + n) % n
                    ins, outs, w = run_collective(kind, n, count, fn, seed=runs, root=root)
                    runs += 1
                    if not outputs_match(kind, ins, outs, fn, root if kind.rooted else None):
                        bad += 1
                    WORLDS.append((f"matrix {kind.value} n={n} count={count}", w, True))
    secs = time.perf_counter() - start
    return bad == 0 and secs < 120, f"{runs} runs, {bad} mismatches, {secs:.1f}s (limit 120s)"


# -- 2 ------------------------------------------------------------------------


def criterion_2():
    rng = np.random.default_rng(2024)
    runs = bad = counter_bad = 0
    budgets = Counter()
    for kind in K:
        for count in COUNTS:
            for fn in fns(kind):
                b = 1 if runs % 3 == 0 else int(rng.integers(1, 17))
                budgets[b] += 1
                cfg = RuntimeConfig(spin=SpinPolicy.constant(b), spins_per_round=1, stall_rounds_limit=16, idle_rounds_limit=32)
                delay = {int(rng.integers(4)): int(rng.integers(0, 200))}
                root = int(rng.integers(4))
                ins, outs, w = run_collective(kind, 4, count, fn, cfg, seed=runs, root=root, delay=delay)
                runs += 1
                if not outputs_match(kind, ins, outs, fn, root if kind.rooted else None):
                    bad += 1
                checks = sum(r.daemon.transfer_checks for r in w.ranks)
                if w.transfer_mismatches() or checks != 4:
                    counter_bad += 1
                WORLDS.append((f"budgets {kind.value} count={count} b={b}", w, True))
    ok = bad == 0 and counter_bad == 0 and budgets[1] > 0
    return ok, f"{runs} runs ({budgets[1]} at budget 1), {bad} output mismatches, {counter_bad} counter mismatches"


# -- 3 ------------------------------------------------------------------------

MISORDER = dict(scenario="misorder", ranks=4, collectives=8, minbytes=256, maxbytes=65536, iters=200,
                watchdog=60.0, stall_rounds=8, seed=3)


def criterion_3():
    occl = run_misorder(ScenarioSpec(**MISORDER))
    WORLDS.append(("misorder occl", occl.world, occl.passed))
    base = run_misorder(ScenarioSpec(**MISORDER, mode="baseline"))
    WORLDS.append(("misorder baseline", base.world, False))
    ok = occl.passed and base.timed_out
    return ok, f"occl: {occl.summary()}; baseline: {base.summary()}"


# -- 4 ------------------------------------------------------------------------


def criterion_4():
    out, ok = [], True
    dep = dict(scenario="depletion", ranks=3, collectives=3, stream_slots=2, iters=1, stall_rounds=8, watchdog=20.0)
    sync = dict(scenario="syncop", ranks=2, stall_rounds=8, watchdog=20.0)
    for name, runner, spec in (("depletion", run_depletion, dep), ("syncop", run_syncop, sync)):
        o = runner(ScenarioSpec(**spec))
        b = runner(ScenarioSpec(**spec, mode="baseline"))
        WORLDS.append((f"{name} occl", o.world, o.passed))
        WORLDS.append((f"{name} baseline", b.world, False))
        ok &= o.passed and o.seconds < 60 and b.timed_out
        out.append(f"{name} occl {'pass' if o.passed else 'fail'} in {o.seconds:.1f}s, baseline "
                   f"{'timed out' if b.timed_out else 'did not time out'} after {b.seconds:.1f}s")
    return ok, "; ".join(out)


# -- 5 ------------------------------------------------------------------------


def criterion_5(total_sqes=1000, nranks=4, seed=5):
    rng = np.random.default_rng(seed)
    cfg = RuntimeConfig(
        lanes=2,
        stall_rounds_limit=8,
        idle_rounds_limit=16,
        spin=SpinPolicy(256, 32, 16, 2),
        cq_impl="slot",
    )
    w = World(nranks, cfg, seed=seed)
    kinds = [K.ALL_REDUCE, K.ALL_GATHER, K.REDUCE_SCATTER, K.BROADCAST, K.REDUCE]
    cids = []
    for i in range(10):
        kind = kinds[i % len(kinds)]
        cids.append(w.register(kind, root=i % nranks if kind.rooted else None,
                               reduce_fn=ReduceFn.MAX if kind.reducing else None, lanes_used=1 + i % 2))
    instances = []  # (cid, ins, outs)
    batches = []
    while len(instances) * nranks < total_sqes:
        size = int(rng.integers(1, 5))
        chosen = rng.choice(len(cids), size=min(size, (total_sqes // nranks) - len(instances)), replace=False)
        batch = []
        for c in chosen:
            cid = cids[int(c)]
            meta = w.ranks[0].registry[cid]
            count = int(rng.integers(1, 3000))
            s_len, r_len = expected_lengths(meta.kind, nranks, count)
            ins = [rng.integers(-9, 10, s_len, dtype=np.int32) for _ in range(nranks)]
            outs = [np.full(r_len, -1, dtype=np.int32) for _ in range(nranks)]
            batch.append(len(instances))
            instances.append((cid, ins, outs))
        batches.append(batch)
    orders = [[list(rng.permutation(b)) for b in batches] for _ in range(nranks)]
    # long pauses exceed the quit horizon (idle 16 traversal rounds) many times over
    pauses = [[int(rng.choice([0, 0, 5, 400])) for _ in batches] for _ in range(nranks)]
    fired = Counter()

    def prog(r):
        rank = w.ranks[r]
        for bi, order in enumerate(orders[r]):
            if pauses[r][bi]:
                yield Sleep(pauses[r][bi])
            subs = []
            for idx in order:
                cid, ins, outs = instances[idx]
                subs.append((yield from rank.submit(cid, ins[r], outs[r], callback=lambda c, r=r: fired.update([(r, c)]))))
            yield from rank.wait(*subs)

    for r in range(nranks):
        w.spawn(prog(r), f"rank-{r}")
    w.run(120)
    WORLDS.append(("quit/restart", w, True))
    bad = 0
    for cid, ins, outs in instances:
        meta = w.ranks[0].registry[cid]
        if not outputs_match(meta.kind, ins, outs, meta.reduce_fn, meta.root):
            bad += 1
    sqes = sum(r.sqes_pushed for r in w.ranks)
    submitted = Counter()
    for r in w.ranks:
        for s in r.history:
            submitted[(r.index, s.collective_id)] += 1
    once = all(s.callbacks == 1 for r in w.ranks for s in r.history)
    cqes = sum(r.daemon.completed for r in w.ranks)
    polled = sum(sum(r.poller.fired.values()) for r in w.ranks)
    unknown = sum(sum(r.poller.unknown.values()) for r in w.ranks)
    restarts = min(r.daemon.launches for r in w.ranks) - 1
    quits = sum(r.daemon.quits for r in w.ranks)
    ok = (bad == 0 and sqes == total_sqes and cqes == polled == sqes and fired == submitted and once
          and unknown == 0 and restarts >= 1 and not w.transfer_mismatches())
    return ok, (f"{sqes} SQEs, {cqes} CQEs, {polled} callbacks, exactly-once={once}, {bad} oracle mismatches, "
                f"{quits} voluntary quits, >= {restarts} restarts per rank")


# -- 6 ------------------------------------------------------------------------


def criterion_6(seeds=10):
    bad = []
    for seed in range(seeds):
        delivered = {}
        for impl in ("vanilla", "packed", "slot"):
            got, expected = cq_stress(impl, 10_000, 4, seed)
            delivered[impl] = Counter(got)
            if delivered[impl] != Counter(expected) or len(got) != 10_000:
                bad.append((seed, impl))
    return not bad, f"{seeds} seeds x 3 CQs x 10000 completions from 4 writers, mismatches: {bad or 'none'}"


# -- 7 ------------------------------------------------------------------------


def _trace(seed, sticky):
    spec = ScenarioSpec(scenario="trace", ranks=4, collectives=161, delay_rank=2, delay_rounds=20,
                        seed=seed, watchdog=60.0)
    if not sticky:
        spec.order_policy = "eager"
        spec.spin_base = spec.spin_min = 64
        spec.spin_step = 0
        spec.boost = 1
    res = run_trace(spec)
    WORLDS.append((f"trace seed={seed} sticky={sticky}", res.world, res.passed))
    med = statistics.median(rec.total_preemptions for rec in res.records) if res.records else float("inf")
    qmax = max((row["queue_len"] for row in res.rows), default=float("inf"))
    return res.passed, med, qmax


def criterion_7(seeds=10):
    wins = 0
    lines = []
    for seed in range(seeds):
        ok_a, med_a, q_a = _trace(seed, True)
        ok_b, med_b, q_b = _trace(seed, False)
        won = ok_a and ok_b and med_a < med_b and q_a < q_b
        wins += won
        lines.append(f"{med_a:g}/{med_b:g},{q_a}/{q_b}")
    return wins == seeds, f"{wins}/{seeds} seeds strictly lower (median preemptions, max queue len sticky/flat: {' '.join(lines)})"


# -- 8 ------------------------------------------------------------------------


def _random_schedules(seeds=6):
    rng = np.random.default_rng(8)
    for seed in range(seeds):
        cfg = RuntimeConfig(
            spin=SpinPolicy.constant(int(rng.integers(1, 6))),
            spins_per_round=1,
            slices=SliceConfig(32, 2),
            connector_capacity=int(rng.integers(4, 9)),
        )
        kind = list(K)[seed % 5]
        delay = {int(rng.integers(4)): int(rng.integers(10, 300))}
        _, _, w = run_collective(kind, 4, int(rng.integers(500, 5000)), ReduceFn.SUM, cfg, seed=seed, root=1, delay=delay)
        WORLDS.append((f"random schedule {seed}", w, True))


def criterion_8():
    _random_schedules()
    conns = issues = 0
    first = ""
    for label, w, finished in WORLDS:
        if w is None:
            continue
        found = list(w.connector_report())
        for c in w.fabric.connectors():
            conns += 1
            a = c.audit
            if a.max_occupancy > c.capacity:
                found.append(f"occupancy {a.max_occupancy} > {c.capacity}")
            if finished and a.pushes != a.pops:
                found.append(f"{a.pushes} pushes but {a.pops} pops")
        if found:
            issues += len(found)
            first = first or f"{label}: {found[0]}"
    ok = issues == 0 and conns > 0
    return ok, f"{conns} connectors across {len(WORLDS)} runs, {issues} audit findings" + (f" (first: {first})" if first else "")


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4,
            5: criterion_5, 6: criterion_6, 7: criterion_7, 8: criterion_8}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, detail = CRITERIA[n]()
    record(n, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for n, fn in CRITERIA.items():
        ok, detail = fn()
        record(n, ok, detail)
        failed += not ok
    sys.exit(1 if failed else 0)
