"""Advantage algebra, clipping, the surrogate gradient (finite-difference
checked end to end), and the optimizer against a scalar reference."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskrl.environment import ActionKind
from deskrl.errors import NonFiniteGradientError, UsageError
from deskrl.grpo import (
    AdamMoments,
    ClipConfig,
    PHASE_ADVANTAGED,
    RolloutGroup,
    accumulate_and_step,
    attach_advantages,
    clipped_token_objective,
    compute_advantages,
    minibatch_gradient,
    optimizer_step,
    surrogate_loss,
)
from deskrl.policy import NeuralPolicy, flatten_arrays, unflatten_like, zero_grads
from deskrl.rollout import RolloutConfig, run_group

from conftest import finite_difference_grad, make_task, max_relative_error, small_params

TASK = make_task(goal=[(ActionKind.CLICK_L, 0), (ActionKind.SCROLL, 1)], n_widgets=2, max_steps=5)


def fresh_group(params, seed=0, group_size=4, temperature=1.0) -> RolloutGroup:
    config = RolloutConfig(n_envs=group_size, group_size=group_size, max_steps=TASK.max_steps,
                           rollout_temperature=temperature)
    return run_group(TASK, NeuralPolicy(params), config, seed)


# --- compute_advantages -------------------------------------------------------

def test_one_success_in_eight():
    mu, sigma, adv = compute_advantages([1, 0, 0, 0, 0, 0, 0, 0])
    assert abs(adv[0] - math.sqrt(7)) < 1e-12
    for a in adv[1:]:
        assert abs(a + 1 / math.sqrt(7)) < 1e-12
    assert abs(mu - 0.125) < 1e-15


def test_degenerate_group_zeroed():
    _, sigma, adv = compute_advantages([1, 1, 1, 1])
    assert sigma == 0.0
    assert np.array_equal(adv, np.zeros(4))


def test_two_member_group():
    mu, sigma, adv = compute_advantages([0, 1])
    assert (mu, sigma) == (0.5, 0.5)
    np.testing.assert_array_equal(adv, [-1.0, 1.0])


def test_advantages_require_two_rewards():
    with pytest.raises(UsageError):
        compute_advantages([1.0])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-5, 5, allow_nan=False, width=64), min_size=2, max_size=9),
)
def test_advantages_normalized_property(rewards):
    mu, sigma, adv = compute_advantages(rewards)
    if sigma >= 1e-8:
        assert abs(adv.mean()) < 1e-9
        assert abs(np.sqrt((adv**2).mean()) - 1.0) < 1e-9
    else:
        assert np.array_equal(adv, np.zeros(len(rewards)))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-3, 3, allow_nan=False, width=64), min_size=2, max_size=8),
    st.floats(-10, 10, allow_nan=False),
    st.floats(0.5, 4.0, allow_nan=False),
)
def test_advantages_translation_and_scale_invariant(rewards, shift, scale):
    rewards = np.asarray(rewards)
    _, sigma, base = compute_advantages(rewards)
    if sigma < 1e-3:
        return
    _, _, shifted = compute_advantages(rewards + shift)
    _, _, scaled = compute_advantages(rewards * scale)
    np.testing.assert_allclose(shifted, base, atol=1e-9)
    np.testing.assert_allclose(scaled, base, atol=1e-9)


# --- clipping -------------------------------------------------------------------

def test_clip_config_validation():
    with pytest.raises(UsageError):
        ClipConfig(eps_low=0.0)
    with pytest.raises(UsageError):
        ClipConfig(eps_low=0.4, eps_high=0.3)
    with pytest.raises(UsageError):
        ClipConfig(eps_high=1.0)


def test_clipping_grid_exhaustive():
    """Grid over rho x advantage must equal the closed-form min/clip values
    exactly (same arithmetic, no tolerance)."""
    eps_low, eps_high = 0.2, 0.3
    rhos = np.round(np.arange(0.1, 2.0001, 0.1), 10)
    for advantage in (-2.0, -1.0, 1.0, 2.0):
        contrib, grad = clipped_token_objective(rhos, advantage, eps_low, eps_high)
        for rho, c, g in zip(rhos, contrib, grad):
            if advantage > 0:
                expected = min(rho * advantage, (1 + eps_high) * advantage)
            else:
                expected = min(rho * advantage, (1 - eps_low) * advantage)
            assert c == expected
            inside = (1 - eps_low) <= rho <= (1 + eps_high)
            clipped_wins = (rho * advantage) > expected
            assert g == (0.0 if clipped_wins else rho * advantage)
            if inside:
                assert g == rho * advantage


def test_single_token_clip_examples():
    contrib, _ = clipped_token_objective(np.array([1.5]), 1.0, 0.2, 0.3)
    assert contrib[0] == pytest.approx(1.3, abs=1e-12)
    contrib, _ = clipped_token_objective(np.array([0.5]), -1.0, 0.2, 0.3)
    assert contrib[0] == pytest.approx(-0.8, abs=1e-12)


# --- surrogate loss --------------------------------------------------------------

def test_on_policy_ratios_are_exactly_one():
    params = small_params(seed=21)
    group = attach_advantages(fresh_group(params, seed=3))
    from deskrl.policy import trajectory_logprobs

    for traj in group.trajectories:
        new_lp = trajectory_logprobs(params, traj, 1.0)
        ratios = np.exp(new_lp - traj.ref_logprobs())
        assert np.all(ratios == 1.0)
    loss, weights = surrogate_loss(params, group, ClipConfig())
    # with every ratio 1 the loss reduces to -mean(advantages) = 0
    assert abs(loss) < 1e-12
    for traj, w, adv in zip(group.trajectories, weights, group.advantages):
        expected = -adv / (group.group_size * traj.token_count)
        np.testing.assert_allclose(w, np.full(traj.token_count, expected), atol=1e-15)


def test_surrogate_requires_advantaged_phase():
    params = small_params(seed=22)
    group = fresh_group(params, seed=4)
    with pytest.raises(UsageError):
        surrogate_loss(params, group, ClipConfig())


def test_double_advantage_attachment_rejected():
    params = small_params(seed=22)
    group = attach_advantages(fresh_group(params, seed=4))
    with pytest.raises(UsageError):
        attach_advantages(group)


def test_loss_is_pure_function_of_ratios():
    """No KL anywhere: recomputing the loss from (ratios, advantages, clip)
    alone reproduces surrogate_loss bit for bit."""
    params = small_params(seed=23)
    behavior = small_params(seed=24)  # off-policy: ratios != 1
    group = attach_advantages(fresh_group(behavior, seed=5))
    clip = ClipConfig()
    loss, _ = surrogate_loss(params, group, clip)
    from deskrl.policy import trajectory_logprobs

    expected = 0.0
    for traj, adv in zip(group.trajectories, group.advantages):
        ratios = np.exp(trajectory_logprobs(params, traj, 1.0) - traj.ref_logprobs())
        contrib, _ = clipped_token_objective(ratios, float(adv), clip.eps_low, clip.eps_high)
        expected += (-1.0 / (group.group_size * traj.token_count)) * contrib.sum()
    assert loss == expected


def test_equal_ratios_from_different_references_give_identical_objective():
    # dyadic values make the log-space shifts exact, so both pairs produce
    # bitwise-equal ratios from different "reference" log-probs
    new1 = np.array([-0.25, -0.5, -1.0])
    old1 = np.array([-0.5, -0.75, -0.5])
    shift = -2.0
    new2, old2 = new1 + shift, old1 + shift
    r1 = np.exp(new1 - old1)
    r2 = np.exp(new2 - old2)
    np.testing.assert_array_equal(r1, r2)
    c1, g1 = clipped_token_objective(r1, 1.5, 0.2, 0.3)
    c2, g2 = clipped_token_objective(r2, 1.5, 0.2, 0.3)
    np.testing.assert_array_equal(c1, c2)
    np.testing.assert_array_equal(g1, g2)


def test_surrogate_gradient_matches_finite_differences():
    """End-to-end gradient of the clipped surrogate (10 random off-policy
    instances) vs central differences, 1e-4 relative error."""
    rng = np.random.default_rng(99)
    clip = ClipConfig()
    worst = 0.0
    for trial in range(10):
        behavior = small_params(seed=int(rng.integers(10_000)), embed_dim=5, hidden_dim=6)
        group = attach_advantages(fresh_group(behavior, seed=int(rng.integers(10_000)), group_size=3))
        # evaluate at perturbed parameters so ratios are away from the kinks
        params = behavior.copy()
        for arr in params.arrays().values():
            arr += 0.05 * rng.standard_normal(arr.shape)

        loss, weights = surrogate_loss(params, group, clip)
        grads = zero_grads(params)
        from deskrl.policy import backward

        for traj, w in zip(group.trajectories, weights):
            for name, g in backward(params, traj, w).items():
                grads[name] += g
        analytic = flatten_arrays(grads)

        base = flatten_arrays(params.arrays())

        def f(vec):
            candidate = dataclasses.replace(params, **unflatten_like(vec, params))
            return surrogate_loss(candidate, group, clip)[0]

        numeric = finite_difference_grad(f, base, h=1e-5)
        worst = max(worst, max_relative_error(analytic, numeric))
    assert worst < 1e-4, f"max relative error {worst}"


# --- optimizer --------------------------------------------------------------------

def scalar_adamw_reference(x0, grads, lr, beta1, beta2, eps, wd):
    """Straight-line scalar re-implementation used as the oracle."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps) - lr * wd * x
    return x


def test_optimizer_matches_scalar_reference():
    params = small_params(seed=31)
    moments = AdamMoments.zeros(params)
    rng = np.random.default_rng(0)
    grad_seq = [
        {name: rng.standard_normal(arr.shape) for name, arr in params.arrays().items()}
        for _ in range(7)
    ]
    rolled = params
    for grads in grad_seq:
        rolled, moments = optimizer_step(rolled, grads, moments, lr=0.01, weight_decay=0.02)
    # compare a handful of coordinates against the scalar oracle
    for name in ("w1", "b_verb", "init_emb"):
        flat_idx = 0
        x0 = params.arrays()[name].ravel()[flat_idx]
        gs = [g[name].ravel()[flat_idx] for g in grad_seq]
        expected = scalar_adamw_reference(x0, gs, 0.01, 0.9, 0.999, 1e-8, 0.02)
        assert rolled.arrays()[name].ravel()[flat_idx] == pytest.approx(expected, abs=1e-12)
    assert rolled.parameter_version == params.parameter_version + 7
    assert moments.step_count == 7


def test_zero_gradient_zero_decay_is_identity():
    params = small_params(seed=32)
    moments = AdamMoments.zeros(params)
    new_params, new_moments = optimizer_step(params, zero_grads(params), moments, lr=0.1)
    for name in params.arrays():
        np.testing.assert_array_equal(new_params.arrays()[name], params.arrays()[name])
    assert new_params.parameter_version == params.parameter_version + 1
    assert new_moments.step_count == 1


def test_weight_decay_shrinks_by_closed_form():
    params = small_params(seed=33)
    moments = AdamMoments.zeros(params)
    lr, wd = 0.05, 0.1
    rolled = params
    for _ in range(3):
        rolled, moments = optimizer_step(rolled, zero_grads(params), moments, lr=lr, weight_decay=wd)
    factor = (1 - lr * wd) ** 3
    for name, arr in params.arrays().items():
        np.testing.assert_allclose(rolled.arrays()[name], arr * factor, rtol=1e-12)


def test_constant_gradient_approaches_sign_update():
    params = small_params(seed=34)
    moments = AdamMoments.zeros(params)
    rng = np.random.default_rng(1)
    grads = {name: 0.3 * rng.standard_normal(arr.shape) for name, arr in params.arrays().items()}
    lr = 1e-3
    rolled = params
    prev = None
    for t in range(300):
        prev = rolled
        rolled, moments = optimizer_step(rolled, grads, moments, lr=lr)
    for name, g in grads.items():
        delta = prev.arrays()[name] - rolled.arrays()[name]
        np.testing.assert_allclose(delta, lr * np.sign(g), atol=1e-3 * lr + 1e-12)


def test_non_finite_gradient_aborts():
    params = small_params(seed=35)
    grads = zero_grads(params)
    grads["w1"][0, 0] = np.nan
    with pytest.raises(NonFiniteGradientError, match="w1"):
        optimizer_step(params, grads, AdamMoments.zeros(params), lr=0.1)


# --- accumulation -------------------------------------------------------------------

def test_identical_minibatches_equal_single_minibatch():
    params = small_params(seed=36)
    group = attach_advantages(fresh_group(params, seed=6))
    one, _, stats_one = accumulate_and_step(params, AdamMoments.zeros(params), [[group]], ClipConfig(), lr=0.01)
    four, _, stats_four = accumulate_and_step(
        params, AdamMoments.zeros(params), [[group]] * 4, ClipConfig(), lr=0.01
    )
    assert stats_one.loss == pytest.approx(stats_four.loss, abs=1e-12)
    for name in one.arrays():
        np.testing.assert_allclose(one.arrays()[name], four.arrays()[name], atol=1e-12)


def test_opposite_gradients_cancel():
    params = small_params(seed=37)
    behavior = small_params(seed=38)
    group = attach_advantages(fresh_group(behavior, seed=7))
    mirrored = RolloutGroup(
        task_id=group.task_id,
        trajectories=list(group.trajectories),
        rewards=group.rewards.copy(),
        phase=PHASE_ADVANTAGED,
        mean_mu=group.mean_mu,
        std_sigma=group.std_sigma,
        advantages=-group.advantages,
    )
    # at the behavior parameters every ratio is 1 (inside the clip window),
    # so negating advantages negates the gradient exactly
    _, grads = minibatch_gradient(behavior, [group], ClipConfig())
    _, mirrored_grads = minibatch_gradient(behavior, [mirrored], ClipConfig())
    stepped, _, _ = accumulate_and_step(
        behavior, AdamMoments.zeros(behavior), [[group], [mirrored]], ClipConfig(), lr=0.05
    )
    for name in grads:
        np.testing.assert_array_equal(mirrored_grads[name], -grads[name])
        np.testing.assert_array_equal(stepped.arrays()[name], behavior.arrays()[name])


def test_training_on_fixed_batch_reduces_held_out_loss():
    params = small_params(seed=39)
    clip = ClipConfig()
    train_groups = [attach_advantages(fresh_group(params, seed=s, group_size=8)) for s in range(8)]
    held_out = [attach_advantages(fresh_group(params, seed=s, group_size=8)) for s in range(100, 104)]

    def held_out_loss(p):
        return sum(surrogate_loss(p, g, clip)[0] for g in held_out)

    initial = held_out_loss(params)
    rolled, moments = params, AdamMoments.zeros(params)
    for _ in range(50):
        rolled, moments, _ = accumulate_and_step(rolled, moments, [train_groups], clip, lr=1e-3)
    assert held_out_loss(rolled) < initial
