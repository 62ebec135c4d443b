import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybrid_rl import policy as P
from hybrid_rl.config import ClipConfig
from hybrid_rl.grpo import (PolicySample, RolloutGroup, collect_group, collect_groups, effective, group_advantages,
                            grpo_loss, grpo_objective, make_group)
from hybrid_rl.oracle import finite_diff_grad, relative_error

from conftest import tiny_params

totals_st = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=16)


def test_advantage_fixed_points():
    assert np.allclose(group_advantages([1, 0]), [1, -1], atol=1e-15)
    assert np.allclose(group_advantages([2, 1, 0]), [math.sqrt(1.5), 0, -math.sqrt(1.5)], atol=1e-15)
    assert np.array_equal(group_advantages([0.7] * 5), np.zeros(5))


@given(r=totals_st, shift=st.floats(-100, 100), scale=st.floats(0.01, 100))
def test_advantages_shift_and_scale_invariant(r, shift, scale):
    base = group_advantages(r)
    moved = group_advantages([scale * x + shift for x in r])
    if base.any() and moved.any():
        assert np.allclose(base, moved, atol=1e-6)


@given(r=totals_st)
def test_advantages_are_standardised(r):
    a = group_advantages(r)
    if a.any():
        assert abs(a.mean()) < 1e-9
        assert abs(a.std() - 1) < 1e-9
    else:
        assert np.array_equal(a, np.zeros(len(r)))


@pytest.fixture(scope="module")
def groups(world, params):
    tasks = [world.generate_task(s) for s in range(6)]
    return collect_groups(params, world, tasks, 6, 1.0, 8, np.random.default_rng(4))


def test_objective_zero_at_behaviour_policy_with_equal_lengths(world, params):
    task = world.generate_task(0)
    rng = np.random.default_rng(0)
    responses = P.sample_batch(params, [task] * 6, 1.0, 5, rng, end_token=-1)  # no early stop
    group = make_group(world, task, responses)
    assert len({len(r) for r in responses}) == 1
    obj, _, diag = grpo_loss(params, group, ClipConfig())
    assert abs(obj) < 1e-9
    assert diag.clip_fraction == 0.0 and abs(diag.mean_ratio - 1) < 1e-12


def test_objective_at_behaviour_policy_is_mean_advantage(params, groups):
    samples = [s for g in groups for s in g.samples()]
    obj, _, _ = grpo_objective(params, samples, ClipConfig())
    assert abs(obj - np.mean([s.advantage for s in samples])) < 1e-12
    for g in groups:
        assert abs(g.advantages.sum()) < 1e-9


def test_gradient_at_behaviour_policy_is_policy_gradient(params, groups):
    samples = [s for g in groups for s in g.samples()]
    _, grad, _ = grpo_objective(params, samples, ClipConfig())
    expected = params.zeros_like()
    for s in samples:
        g = P.grad_logprob(params, s.task, s.response.tokens)
        for k in expected:
            expected[k] += s.advantage * g[k] / len(s.response) / len(samples)
    for k in params.trainable:
        assert np.allclose(grad[k], expected[k], atol=1e-12)


def test_inside_clip_range_equals_unclipped_surrogate(params, groups):
    moved = params.replace({"ad_b": params["ad_b"] + 1e-4})
    samples = [s for g in groups for s in g.samples()]
    obj, _, diag = grpo_objective(moved, samples, ClipConfig(epsilon=0.5))
    assert diag.clip_fraction == 0.0
    surrogate = 0.0
    for s in samples:
        _, lp = P.logprob(moved, s.task, s.response.tokens)
        surrogate += np.mean(np.exp(lp - s.response.behavior_logprobs) * s.advantage)
    assert abs(obj - surrogate / len(samples)) < 1e-12


def test_clipping_kicks_in_far_from_behaviour(params, groups):
    far = params.replace({"w2": params["w2"] * 3})
    samples = [s for g in groups for s in g.samples()]
    _, _, diag = grpo_objective(far, samples, ClipConfig(epsilon=0.1))
    assert diag.clip_fraction > 0


@pytest.mark.parametrize("kl", [0.0, 0.3])
def test_gradient_matches_finite_differences(tiny_world, kl):
    behaviour = tiny_params(seed=1)
    reference = tiny_params(seed=2)
    rng = np.random.default_rng(5)
    tasks = [tiny_world.generate_task(s) for s in range(3)]
    samples = [s for g in collect_groups(behaviour, tiny_world, tasks, 4, 1.0, 5, rng) for s in g.samples()]
    for configuration in ("adapter_only", "head_plus_adapter", "adapter_plus_encoder_forwardonly"):
        # small step from the behaviour policy keeps every ratio off the clip boundary
        p = P.set_freeze(behaviour.replace({"ad_w": behaviour["ad_w"] + 0.01}), configuration)
        clip = ClipConfig(epsilon=0.2, kl_coeff=kl)
        ref = reference if kl else None
        _, grad, diag = grpo_objective(p, samples, clip, ref)
        assert diag.clip_fraction == 0.0
        numeric = finite_diff_grad(lambda q: grpo_objective(q, samples, clip, ref, need_grad=False)[0], p)
        assert relative_error({k: grad[k] for k in p.trainable}, {k: numeric[k] for k in p.trainable}) < 1e-4


def test_kl_term_vanishes_at_reference(params, groups):
    samples = [s for g in groups for s in g.samples()]
    _, _, diag = grpo_objective(params, samples, ClipConfig(kl_coeff=0.5), kl_reference=params)
    assert abs(diag.kl) < 1e-15
    with pytest.raises(P.InputError):
        grpo_objective(params, samples, ClipConfig(kl_coeff=0.5))


def test_empty_batch_and_missing_logprobs(world, params):
    obj, grad, diag = grpo_objective(params, [], ClipConfig())
    assert obj == 0.0 and diag.n_samples == 0
    task = world.generate_task(0)
    with pytest.raises(P.InputError):
        grpo_objective(params, [PolicySample(task, P.Response((), np.zeros(0)), 1.0)], ClipConfig())


def test_group_construction(world, params):
    g = collect_group(params, world, world.generate_task(0), 4, 1.0, 8, np.random.default_rng(0))
    assert len(g.responses) == 4
    assert effective(g) == bool(g.totals.std() > 1e-8)
    with pytest.raises(P.InputError):
        RolloutGroup(g.task, g.responses[:1], g.rewards[:1], g.advantages[:1])
    with pytest.raises(P.InputError):
        collect_groups(params, world, [g.task], 1, 1.0, 8, np.random.default_rng(0))


def test_differences_below_std_threshold_are_not_effective(world, params):
    g = collect_group(params, world, world.generate_task(0), 2, 1.0, 8, np.random.default_rng(0))
    tiny = RolloutGroup(g.task, g.responses, g.rewards, group_advantages([1.0, 1.0 + 1e-10]))
    assert not effective(tiny)
    assert effective(RolloutGroup(g.task, g.responses, g.rewards, group_advantages([1.0, 1.1])))
