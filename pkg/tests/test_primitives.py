import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfcoll import CollectiveKind as K, ReduceFn, RuntimeConfig, SpinPolicy
from dfcoll.connector import Fabric
from dfcoll.errors import CorruptContext
from dfcoll.geometry import CollectiveMeta, SliceConfig, plan_geometry
from dfcoll.primitives import (
    COLLECTIVE_DONE,
    STEP_DONE,
    DynamicContext,
    PrimitiveKind as P,
    StaticContext,
    Stalled,
    apply_action_set,
    exec_step,
)
from dfcoll.ring import build_sequence

from conftest import assert_oracle, run_collective


def arr(*v):
    return np.array(v, dtype=np.int32)


def test_every_kind_sends_or_receives():
    assert all(k.has_send or k.has_recv for k in P)


def test_action_set_examples():
    assert apply_action_set(P.RECV, arr(7), None)[0].tolist() == [7]
    assert apply_action_set(P.RECV, arr(7), None)[1] is None
    to_recv, to_send = apply_action_set(P.RECV_REDUCE_COPY_SEND, arr(1, 1), arr(2, 3), ReduceFn.SUM)
    assert to_recv.tolist() == [3, 4] and to_send.tolist() == [3, 4]
    to_recv, to_send = apply_action_set(P.COPY_SEND, None, arr(9))
    assert to_recv.tolist() == [9] and to_send.tolist() == [9]
    to_recv, to_send = apply_action_set(P.RECV_REDUCE_SEND, arr(1, 2, 3), arr(10, 20, 30), ReduceFn.SUM)
    assert to_recv is None and to_send.tolist() == [11, 22, 33]
    assert apply_action_set(P.SEND, None, arr(4)) [0] is None


@settings(max_examples=200, deadline=None)
@given(
    kind=st.sampled_from(list(P)),
    fn=st.sampled_from(list(ReduceFn)),
    data=st.lists(st.tuples(st.integers(-1000, 1000), st.integers(-1000, 1000)), min_size=1, max_size=20),
)
def test_action_set_is_pure(kind, fn, data):
    incoming = np.array([a for a, _ in data], dtype=np.int64) if kind.has_recv else None
    local = np.array([b for _, b in data], dtype=np.int64) if kind.reads_local else None
    snap = (None if incoming is None else incoming.copy(), None if local is None else local.copy())
    first = apply_action_set(kind, incoming, local, fn)
    second = apply_action_set(kind, incoming, local, fn)
    ops = {ReduceFn.SUM: lambda a, b: a + b, ReduceFn.PROD: lambda a, b: a * b, ReduceFn.MIN: min, ReduceFn.MAX: max}
    want = []
    for a, b in data:
        if kind.has_reduce:
            want.append(ops[fn](a, b))
        elif kind.has_recv:
            want.append(a)
        else:
            want.append(b)
    for x, y in zip(first, second):
        assert (x is None) == (y is None)
        if x is not None:
            assert x.tolist() == y.tolist() == want
    assert (first[0] is not None) == kind.writes_recv_buf
    assert (first[1] is not None) == kind.has_send
    if incoming is not None:
        assert incoming.tolist() == snap[0].tolist()
    if local is not None:
        assert local.tolist() == snap[1].tolist()


def _ctx(kind, n, rank, count, root=None, fn=ReduceFn.SUM, capacity=8, cfg=SliceConfig(256, 4)):
    meta = CollectiveMeta(kind, n, rank, root, reduce_fn=fn if kind.reducing else None)
    fab = Fabric(capacity)
    up_send, recv = fab.peer_wire(((rank - 1) % n, 0), (rank, 0), 0)
    send, down_recv = fab.peer_wire((rank, 0), ((rank + 1) % n, 0), 0)
    plan = plan_geometry(meta, count, 0, cfg)
    sctx = StaticContext(
        meta, plan, build_sequence(kind, n, rank, root),
        np.arange(count, dtype=np.int32), np.full(count, -1, dtype=np.int32), send, recv,
    )
    return sctx, up_send, down_recv


def test_pure_stall_on_empty_recv():
    sctx, _, _ = _ctx(K.BROADCAST, 3, 2, 100, root=0)  # tail: Recv
    dyn = DynamicContext()
    res = exec_step(sctx, dyn, 10)
    assert res == Stalled(10)
    assert dyn == DynamicContext(spins_used=10)


def test_spins_accumulate_until_success():
    sctx, up, _ = _ctx(K.BROADCAST, 3, 2, 100, root=0)
    dyn = DynamicContext()
    assert exec_step(sctx, dyn, 3) == Stalled(3)
    assert exec_step(sctx, dyn, 4) == Stalled(7)
    up.try_push(np.arange(100, dtype=np.int32))
    assert exec_step(sctx, dyn, 4) is COLLECTIVE_DONE
    assert dyn.spins_used == 0 and dyn.progressed


def test_send_with_one_free_slot():
    sctx, _, down = _ctx(K.BROADCAST, 2, 0, 512, root=0, capacity=1)  # root Send, 2 slices
    dyn = DynamicContext()
    res = exec_step(sctx, dyn, 10)
    assert res == Stalled(10)
    assert dyn.slice_id == 1 and dyn.progressed
    assert sctx.counters.pushes == [1]
    assert down.try_pop()[0].tolist() == list(range(256))
    assert exec_step(sctx, dyn, 10) is COLLECTIVE_DONE
    np.testing.assert_array_equal(sctx.recv_buf, sctx.send_buf)  # root's local copy


def test_recv_reduce_send_slice():
    sctx, up, down = _ctx(K.REDUCE, 3, 1, 3, root=2)  # rank 1 is the middle of 0 -> 1 -> 2
    assert sctx.sequence.steps[0].kind is P.RECV_REDUCE_SEND
    sctx.send_buf[:] = [10, 20, 30]
    up.try_push(arr(1, 2, 3))
    assert exec_step(sctx, DynamicContext(), 1) is COLLECTIVE_DONE
    assert down.try_pop()[0].tolist() == [11, 22, 33]
    assert (sctx.recv_buf == -1).all()


def test_step_done_advances_cursor():
    sctx, up, down = _ctx(K.ALL_GATHER, 2, 0, 10)
    dyn = DynamicContext()
    assert exec_step(sctx, dyn, 1) is STEP_DONE  # CopySend
    assert (dyn.loop_id, dyn.step_id, dyn.slice_id) == (0, 1, 0)


def test_corrupt_context():
    sctx, _, _ = _ctx(K.ALL_GATHER, 2, 0, 10)
    with pytest.raises(CorruptContext):
        exec_step(sctx, DynamicContext(loop_id=5), 1)
    with pytest.raises(CorruptContext):
        exec_step(sctx, DynamicContext(step_id=9), 1)


def test_zero_budget_rejected():
    sctx, _, _ = _ctx(K.ALL_GATHER, 2, 0, 10)
    with pytest.raises(ValueError):
        exec_step(sctx, DynamicContext(), 0)


@settings(max_examples=12, deadline=None)
@given(
    kind=st.sampled_from(list(K)),
    budget=st.integers(1, 6),
    count=st.sampled_from([1, 7, 300, 2500]),
    seed=st.integers(0, 2**16),
)
def test_resume_exactness(kind, budget, count, seed):
    cfg = RuntimeConfig(spin=SpinPolicy.constant(budget), spins_per_round=1, slices=SliceConfig(64, 2), connector_capacity=4)
    ins, outs, world = run_collective(kind, 4, count, ReduceFn.SUM, cfg, seed=seed, root=1, delay={seed % 4: 40})
    assert_oracle(kind, ins, outs, root=1)
    assert world.transfer_mismatches() == []
    assert sum(r.daemon.transfer_checks for r in world.ranks) == 4
