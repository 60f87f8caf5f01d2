"""Memory buffer: FIFO semantics, views, window isolation."""

import numpy as np
import pytest

from statm import memory as M
from statm.errors import ContractViolation
from statm.tensor import Tensor


def ss(t, n=2, d=3, fill=None):
    data = np.full((n, d), t if fill is None else fill, dtype=np.float32)
    return M.SlotSet(Tensor(data), timestep=t)


def test_push_evicts_oldest_at_capacity():
    buf = M.MemoryBuffer(capacity=2)
    for t in range(3):
        buf = M.push(buf, ss(t))
    assert [e.timestep for e in buf.entries] == [1, 2]


def test_unbounded_capacity_keeps_everything():
    buf = M.MemoryBuffer()
    for t in range(24):
        buf = M.push(buf, ss(t))
    assert len(buf) == 24


def test_push_rejects_mismatched_slot_count():
    buf = M.push(M.MemoryBuffer(), ss(0, n=2))
    with pytest.raises(ContractViolation):
        M.push(buf, ss(1, n=3))


def test_push_rejects_non_monotonic_timestep():
    buf = M.push(M.MemoryBuffer(), ss(5))
    with pytest.raises(ContractViolation):
        M.push(buf, ss(5))


def test_replay_matches_plain_list():
    rng = np.random.default_rng(0)
    for cap in (1, 3, 6, None):
        buf = M.MemoryBuffer(capacity=cap)
        pushed = []
        for t in range(10):
            s = M.SlotSet(Tensor(rng.normal(size=(3, 4)).astype(np.float32)), t)
            pushed.append(s)
            buf = M.push(buf, s)
        keep = pushed if cap is None else pushed[-cap:]
        assert [e.timestep for e in buf.entries] == [s.timestep for s in keep]
        for got, want in zip(buf.entries, keep):
            assert got.slots is want.slots


def test_cs_view_selects_one_slot_per_entry():
    buf = M.MemoryBuffer()
    sets = []
    rng = np.random.default_rng(1)
    for t in range(3):
        s = M.SlotSet(Tensor(rng.normal(size=(4, 5)).astype(np.float32)), t)
        sets.append(s)
        buf = M.push(buf, s)
    view = M.history_view(buf, M.CS, slot_index=1, window=3)
    assert len(view) == 3
    for v, s in zip(view, sets):
        assert np.array_equal(v.data, s.slots.data[1])


def test_as_view_flattens_all_slots():
    buf = M.MemoryBuffer()
    for t in range(3):
        buf = M.push(buf, ss(t, n=4))
    view = M.history_view(buf, M.AS, window=3)
    assert len(view) == 12
    # oldest first, slot order preserved within a step
    assert view[0].data[0] == 0 and view[4].data[0] == 1 and view[11].data[0] == 2


def test_window_one_returns_newest_only():
    buf = M.MemoryBuffer()
    for t in range(5):
        buf = M.push(buf, ss(t))
    view = M.history_view(buf, M.CS, slot_index=0, window=1)
    assert len(view) == 1
    assert view[0].data[0] == 4


def test_view_lengths():
    for n in (1, 3):
        buf = M.MemoryBuffer()
        for t in range(4):
            buf = M.push(buf, ss(t, n=n))
        for w in (1, 2, 4, 9):
            assert len(M.history_view(buf, M.CS, 0, w)) == min(w, 4)
            assert len(M.history_view(buf, M.AS, None, w)) == n * min(w, 4)


def test_window_never_touches_entries_outside_it():
    # marker tensors: NaN outside the window must not leak into the view
    buf = M.MemoryBuffer()
    for t in range(6):
        fill = np.nan if t < 4 else float(t)
        buf = M.push(buf, ss(t, fill=fill))
    for topo, idx in ((M.CS, 0), (M.AS, None)):
        view = M.history_view(buf, topo, idx, window=2)
        for v in view:
            assert np.all(np.isfinite(v.data))


def test_empty_buffer_view_is_contract_violation():
    with pytest.raises(ContractViolation):
        M.history_view(M.MemoryBuffer(), M.CS, 0, 1)
