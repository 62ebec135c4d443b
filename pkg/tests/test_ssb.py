import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybrid_rl import policy as P
from hybrid_rl.config import BufferConfig
from hybrid_rl.grpo import collect_groups, make_group
from hybrid_rl.ssb import SelectiveSampleBuffer, effective_fraction, filter_prompt_pool


def _resp(i=0):
    return P.Response((10 + i % 5,), np.array([-1.0]))


@pytest.fixture
def task(world):
    return world.generate_task(0)


def test_eviction_keeps_largest_magnitudes(task):
    buf = SelectiveSampleBuffer(BufferConfig(capacity=2, max_age=100))
    buf.add(task, _resp(), 1.2, 0)
    buf.add(task, _resp(), 0.3, 0)
    buf.add(task, _resp(), 0.5, 1)
    assert sorted(e.advantage for e in buf) == [0.5, 1.2]


def test_eviction_ties_go_to_oldest(task):
    buf = SelectiveSampleBuffer(BufferConfig(capacity=2, max_age=100))
    buf.add(task, _resp(), -0.4, 0)
    buf.add(task, _resp(), 0.4, 1)
    buf.add(task, _resp(), 0.9, 2)
    assert sorted((e.insert_step, e.advantage) for e in buf) == [(1, 0.4), (2, 0.9)]


def test_zero_and_non_finite_advantages_are_skipped(task):
    buf = SelectiveSampleBuffer()
    assert not buf.add(task, _resp(), 0.0, 0)
    assert not buf.add(task, _resp(), float("nan"), 0)
    assert len(buf) == 0


def test_draw_frequency_follows_weights(task):
    buf = SelectiveSampleBuffer(BufferConfig(max_age=10**9))
    buf.add(task, _resp(0), 3.0, 0)
    buf.add(task, _resp(1), -1.0, 0)
    rng = np.random.default_rng(0)
    n = 100_000
    hits = sum(buf.draw(1, 0, rng)[0].advantage == 3.0 for _ in range(n))
    assert abs(hits / n - 0.75) < 0.02


def test_high_temperature_is_uniform(task):
    buf = SelectiveSampleBuffer(BufferConfig(weight_temperature=1e9))
    for a in (0.01, 1.0, 50.0):
        buf.add(task, _resp(), a, 0)
    assert np.allclose(buf.weights(buf.snapshot()), 1 / 3, atol=1e-6)


def test_draw_without_replacement_and_bounds(task):
    buf = SelectiveSampleBuffer(BufferConfig(max_age=100))
    for i in range(5):
        buf.add(task, _resp(i), 0.1 * (i + 1), 0)
    drawn = buf.draw(10, 0, np.random.default_rng(1))
    assert len(drawn) == 5 and len({e.uid for e in drawn}) == 5
    assert buf.draw(0, 0, np.random.default_rng(1)) == []
    with pytest.raises(P.InputError):
        buf.draw(-1, 0, np.random.default_rng(1))


def test_stale_entries_expire_on_draw(task):
    buf = SelectiveSampleBuffer(BufferConfig(max_age=3))
    buf.add(task, _resp(), 1.0, 0)
    buf.add(task, _resp(), 1.0, 5)
    assert len(buf.draw(5, 4, np.random.default_rng(0))) == 1
    assert len(buf) == 1


def _reference(world, task):
    ref = world.reference_response(task)
    return P.Response(ref, np.zeros(len(ref)))


def test_effective_fraction(world):
    task = world.generate_task(0)
    r = P.Response((10, 14), np.zeros(2))
    flat = make_group(world, task, [r, r])
    assert effective_fraction([flat]) == 0.0
    live = make_group(world, task, [_reference(world, task), r])
    assert effective_fraction([live, live, live, flat, flat]) == 0.6
    with pytest.raises(P.InputError):
        effective_fraction([])


def test_insert_keeps_only_nonzero_advantages(world, params):
    groups = collect_groups(params, world, [world.generate_task(s) for s in range(8)], 6, 1.0, 8,
                            np.random.default_rng(3))
    buf = SelectiveSampleBuffer()
    n = sum(buf.insert(g, 0) for g in groups)
    assert n == sum(int(np.count_nonzero(g.advantages)) for g in groups) == len(buf)


def test_prompt_pool_filter(world, params):
    tasks = [world.generate_task(s) for s in range(40)]
    res = filter_prompt_pool(params, world, tasks, 4, 1.0, 8, np.random.default_rng(0), chunk=16)
    assert res.total == 40 and 0 <= res.retention <= 1
    assert all(t in tasks for t in res.retained)


ops = st.lists(st.tuples(st.sampled_from(["add", "draw"]), st.floats(-3, 3, allow_nan=False),
                         st.integers(0, 5)), max_size=200)


@given(ops=ops, capacity=st.integers(1, 8), max_age=st.integers(1, 6))
def test_buffer_invariants_under_random_operations(task, ops, capacity, max_age):
    buf = SelectiveSampleBuffer(BufferConfig(capacity=capacity, max_age=max_age))
    rng = np.random.default_rng(0)
    step = 0
    for op, adv, k in ops:
        step += 1
        if op == "add":
            before = sorted(abs(e.advantage) for e in buf)
            kept = buf.add(task, _resp(), adv, step)
            assert kept == (adv != 0)
            if kept and len(before) == capacity:
                # the evicted entry is never larger than anything kept
                after = sorted(abs(e.advantage) for e in buf)
                evicted = sorted(before + [abs(adv)])
                assert after == evicted[1:]
        else:
            drawn = buf.draw(k, step, rng)
            assert len(drawn) == min(k, len(buf))
            assert all(step - e.insert_step <= max_age for e in buf)
        assert len(buf) <= capacity
        assert all(e.advantage != 0 for e in buf)
