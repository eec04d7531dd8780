import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfcoll import CollectiveKind, ReduceFn, RuntimeConfig, World
from dfcoll.errors import SubmitAfterExit
from dfcoll.queues import (
    SQE,
    CallbackMap,
    PackedCQ,
    Poller,
    SlotCQ,
    SubmissionQueue,
    VanillaCQ,
    make_cq,
    pack_cqe,
    unpack_cqe,
)

from conftest import cq_stress


def test_sq_bound():
    sq = SubmissionQueue(lane_count=1, capacity=16)
    assert all(sq.push(SQE(i)) for i in range(16))
    assert sq.full() and not sq.push(SQE(16))


def test_submit_after_exit():
    sq = SubmissionQueue(1)
    sq.push(SQE.exiting_entry())
    with pytest.raises(SubmitAfterExit):
        sq.push(SQE(0))


def test_slot_freed_after_all_lanes_read():
    sq = SubmissionQueue(lane_count=4, capacity=2)
    sq.push(SQE(0))
    for lane in range(3):
        assert sq.read(0).collective_id == 0
        assert sq.freed == 0
    sq.read(0)
    assert sq.freed == 1 and sq.in_flight == 0
    assert sq.read(1) is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=400))
def test_every_lane_sees_push_order(ops):
    # op 3 pushes, ops 0..2 are reads by that lane
    sq = SubmissionQueue(lane_count=3, capacity=8)
    cursors = [0, 0, 0]
    seen = [[], [], []]
    pushed = 0
    for op in ops:
        if op == 3:
            if pushed < 100 and sq.push(SQE(pushed)):
                pushed += 1
        else:
            e = sq.read(cursors[op])
            if e is not None:
                cursors[op] += 1
                seen[op].append(e.collective_id)
    for lane in range(3):
        while (e := sq.read(cursors[lane])) is not None:
            cursors[lane] += 1
            seen[lane].append(e.collective_id)
    assert all(s == list(range(pushed)) for s in seen)
    assert sq.freed == pushed and sq.in_flight == 0


def test_lane_beyond_lanes_used_consumes_without_running():
    w = World(2, RuntimeConfig(lanes=4))
    cid = w.register(CollectiveKind.ALL_REDUCE, reduce_fn=ReduceFn.SUM, lanes_used=1)
    bufs = [(np.ones(10, np.int32), np.zeros(10, np.int32)) for _ in range(2)]

    def prog(r):
        sub = yield from w.ranks[r].submit(cid, *bufs[r])
        yield from w.ranks[r].wait(sub)

    for r in range(2):
        w.spawn(prog(r))
    w.run(10)
    for rank in w.ranks:
        assert rank.daemon.sq_cursors[3] == 1 or not rank.daemon.lanes[3].running
        assert rank.sq.freed == rank.sq.tail
    fetches = [e for e in w.events if e["event"] == "fetch"]
    assert {e["lane"] for e in fetches} == {0}
    assert all((b[1] == 2).all() for b in bufs)


def test_packed_word_layout():
    assert pack_cqe(5, 7) == 0x0000_0005_0000_0007
    assert unpack_cqe(0x0000_0005_0000_0007) == (5, 7)


def test_packed_poll_advances_head():
    cq = PackedCQ(8)
    for i in range(5):
        cq.write(100 + i)
    assert cq.poll() == [100, 101, 102, 103, 104]
    cq.write(7)
    assert cq.words[5] == pack_cqe(5, 7)
    assert cq.head == 5
    assert cq.poll() == [7] and cq.head == 6


def test_stale_lap_is_not_accepted():
    cq = PackedCQ(2)
    cq.write(1)
    cq.write(2)
    assert cq.poll() == [1, 2]
    assert cq.poll() == []  # slots still hold tails 0 and 1, head is 2


@pytest.mark.parametrize("impl", ["vanilla", "packed", "slot"])
def test_full_cq_refuses(impl):
    cq = make_cq(impl, 2)
    assert cq.try_write(0) and cq.try_write(1)
    assert not cq.try_write(0)
    assert sorted(cq.poll()) == [0, 1]
    assert cq.try_write(0)


def test_host_op_counts():
    assert (VanillaCQ.HOST_OPS_PER_WRITE, PackedCQ.HOST_OPS_PER_WRITE, SlotCQ.HOST_OPS_PER_WRITE) == (5, 4, 1)
    assert VanillaCQ.NEEDS_FENCE and not PackedCQ.NEEDS_FENCE


@pytest.mark.parametrize("seed", range(3))
def test_cq_variants_agree_small(seed):
    results = {impl: cq_stress(impl, 2000, 4, seed) for impl in ("vanilla", "packed", "slot")}
    multisets = {impl: Counter(got) for impl, (got, _) in results.items()}
    expected = Counter(results["packed"][1])
    assert all(m == expected for m in multisets.values())


def test_poller_accounting(caplog):
    cq = make_cq("packed", 64)
    cbs = CallbackMap()
    poller = Poller(cq, cbs)
    assert poller.poll_and_dispatch() == 0
    fired = Counter()
    subs = Counter()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        cid = int(rng.integers(8))
        cbs.bind(cid, lambda c: fired.update([c]))
        subs[cid] += 1
        cq.write(cid)
        poller.poll_and_dispatch()
    assert fired == subs == poller.fired
    with caplog.at_level(logging.ERROR):
        cq.write(99)
        assert poller.poll_and_dispatch() == 0
    assert poller.unknown[99] == 1 and "99" in caplog.text


def test_one_completion_one_callback():
    cq, cbs = make_cq("slot", 10), CallbackMap()
    hits = []
    cbs.bind(3, hits.append)
    cq.write(3)
    Poller(cq, cbs).poll_and_dispatch()
    assert hits == [3]
