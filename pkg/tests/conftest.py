import sys

import numpy as np
import pytest

from dfcoll import CollectiveKind, ReduceFn, RuntimeConfig, World, reference_oracle
from dfcoll.engine import Sleep
from dfcoll.runtime import expected_lengths


def run_collective(kind, nranks, count, reduce_fn=ReduceFn.SUM, config=None, seed=0, root=0, watchdog=60.0, delay=None):
    """Submit one collective on every rank and return (inputs, outputs, world).

    ``delay`` maps rank -> rounds that rank sleeps before submitting.
    """
    world = World(nranks, config or RuntimeConfig(), seed=seed)
    cid = world.register(
        kind,
        root=root if kind.rooted else None,
        reduce_fn=reduce_fn if kind.reducing else None,
    )
    rng = np.random.default_rng(seed)
    s_len, r_len = expected_lengths(kind, nranks, count)
    ins = [rng.integers(-5, 6, s_len, dtype=np.int32) for _ in range(nranks)]
    outs = [np.full(r_len, -1, dtype=np.int32) for _ in range(nranks)]

    def prog(r):
        rank = world.ranks[r]
        if delay and delay.get(r):
            yield Sleep(delay[r])
        sub = yield from rank.submit(cid, ins[r], outs[r])
        yield from rank.wait(sub)

    for r in range(nranks):
        world.spawn(prog(r))
    world.run(watchdog)
    return ins, outs, world


def assert_oracle(kind, ins, outs, reduce_fn=ReduceFn.SUM, root=0):
    exp = reference_oracle(kind, ins, reduce_fn if kind.reducing else None, root if kind.rooted else None)
    for r, (e, o) in enumerate(zip(exp, outs)):
        if e is None:
            assert (o == -1).all(), f"rank {r} recv buffer was written"
        else:
            np.testing.assert_array_equal(o, e, err_msg=f"rank {r}")


@pytest.fixture
def small_spin():
    from dfcoll import SpinPolicy

    return SpinPolicy(64, 8, 8, 2)


def cq_stress(impl, completions=10_000, producers=4, seed=0, ids=1000, timeout=60.0):
    """Hammer one CQ from ``producers`` threads; returns the delivered ids.

    The seed fixes which ids each producer writes and where it yields.
    """
    import random
    import sys
    import threading
    import time

    from dfcoll.queues import make_cq

    rng = random.Random(seed)
    per = [completions // producers + (i < completions % producers) for i in range(producers)]
    plans = [[rng.randrange(ids) for _ in range(k)] for k in per]
    yields = [[rng.random() < 0.1 for _ in range(k)] for k in per]
    cq = make_cq(impl, 1000 if impl == "slot" else 256)
    got: list[int] = []
    stop = threading.Event()
    start = threading.Barrier(producers + 1)

    def producer(i):
        start.wait()
        for cid, y in zip(plans[i], yields[i]):
            cq.write(cid)
            if y:
                time.sleep(0)

    def consumer():
        start.wait()
        deadline = time.monotonic() + timeout
        while len(got) < completions and time.monotonic() < deadline:
            got.extend(cq.poll())
        stop.set()

    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-3)
    try:
        threads = [threading.Thread(target=producer, args=(i,)) for i in range(producers)]
        threads.append(threading.Thread(target=consumer))
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout)
    finally:
        sys.setswitchinterval(old)
    got.extend(cq.poll())
    expected = [c for p in plans for c in p]
    return got, expected


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
