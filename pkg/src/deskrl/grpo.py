"""Group-relative advantages, the clipped token-level surrogate, and AdamW.

Advantages normalize each trajectory's total reward against its own rollout
group (population statistics); a degenerate group (sigma below the floor)
contributes zero advantage and therefore zero gradient. The surrogate is the
asymmetric-clip objective with dual length normalization (1/G over
trajectories, 1/|o_i| over tokens) and no KL term: the loss is a function of
importance ratios, advantages and the clip bounds only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradientError, UsageError
from .policy import PolicyParams, Trajectory, backward, trajectory_logprobs, zero_grads


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.3
    sigma_floor: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.eps_low <= self.eps_high < 1.0:
            raise UsageError(f"require 0 < eps_low <= eps_high < 1, got {self.eps_low}, {self.eps_high}")
        if self.sigma_floor < 0.0:
            raise UsageError("sigma_floor must be >= 0")


# RolloutGroup phases: collected -> (injected) -> advantaged. Injection must
# precede advantage computation; the surrogate refuses anything earlier.
PHASE_COLLECTED = "collected"
PHASE_INJECTED = "injected"
PHASE_ADVANTAGED = "advantaged"


@dataclass
class RolloutGroup:
    task_id: int
    trajectories: list[Trajectory]
    rewards: np.ndarray
    phase: str = PHASE_COLLECTED
    mean_mu: float | None = None
    std_sigma: float | None = None
    advantages: np.ndarray | None = None
    injected_slot: int | None = None

    @property
    def group_size(self) -> int:
        return len(self.trajectories)

    def task_success_flags(self) -> list[float]:
        return [t.reward.trajectory_reward for t in self.trajectories]


def compute_advantages(
    rewards: np.ndarray | list[float], sigma_floor: float = 1e-8
) -> tuple[float, float, np.ndarray]:
    """(mu, sigma, advantages) for a group's total rewards.

    sigma is the population standard deviation. Below the floor the group is
    informationless and every advantage is zero.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.shape[0] < 2:
        raise UsageError("advantage computation needs at least 2 rewards")
    mu = float(rewards.mean())
    sigma = float(np.sqrt(((rewards - mu) ** 2).mean()))
    if sigma < sigma_floor:
        return mu, sigma, np.zeros_like(rewards)
    return mu, sigma, (rewards - mu) / sigma


def attach_advantages(group: RolloutGroup, sigma_floor: float = 1e-8) -> RolloutGroup:
    """Populate group statistics in place and advance the phase flag."""
    if group.phase not in (PHASE_COLLECTED, PHASE_INJECTED):
        raise UsageError(f"advantages already attached (phase={group.phase})")
    group.mean_mu, group.std_sigma, group.advantages = compute_advantages(group.rewards, sigma_floor)
    group.phase = PHASE_ADVANTAGED
    return group


def clipped_token_objective(
    ratios: np.ndarray, advantage: float, eps_low: float, eps_high: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token contribution min(rho*A, clip(rho, 1-eps_low, 1+eps_high)*A)
    and the matching gradient factor d(contribution)/d(log pi).

    When the unclipped branch is active the derivative is rho*A; once the
    clipped branch wins, rho sits outside the bounds and the derivative is 0.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    clipped = np.clip(ratios, 1.0 - eps_low, 1.0 + eps_high)
    raw = ratios * advantage
    capped = clipped * advantage
    contribution = np.minimum(raw, capped)
    grad_factor = np.where(raw <= capped, raw, 0.0)
    return contribution, grad_factor


def surrogate_loss(
    params: PolicyParams, group: RolloutGroup, clip: ClipConfig
) -> tuple[float, list[np.ndarray]]:
    """Clipped surrogate loss for one group plus per-token backward weights.

    pi_old is each trajectory's stored temperature-1.0 behavior log-probs
    (for replayed trajectories these date from generation time; staleness is
    handled by clipping, not re-weighting). Returns
    (loss, weights) where feeding weights[i] to `policy.backward` for
    trajectory i and summing yields the exact gradient of the loss.
    """
    if group.phase != PHASE_ADVANTAGED:
        raise UsageError(f"surrogate_loss requires advantaged group, got phase={group.phase}")
    g = group.group_size
    loss = 0.0
    weights: list[np.ndarray] = []
    for i, traj in enumerate(group.trajectories):
        new_lp = trajectory_logprobs(params, traj, 1.0)
        old_lp = traj.ref_logprobs()
        if new_lp.shape != old_lp.shape:
            raise UsageError("token count mismatch between trajectory and stored behavior log-probs")
        ratios = np.exp(new_lp - old_lp)
        contribution, grad_factor = clipped_token_objective(
            ratios, float(group.advantages[i]), clip.eps_low, clip.eps_high
        )
        scale = -1.0 / (g * traj.token_count)
        loss += scale * contribution.sum()
        weights.append(scale * grad_factor)
    return loss, weights


def minibatch_gradient(
    params: PolicyParams, groups: list[RolloutGroup], clip: ClipConfig
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean surrogate loss over groups and its exact parameter gradient."""
    if not groups:
        raise UsageError("minibatch_gradient needs at least one group")
    inv_b = 1.0 / len(groups)
    total_loss = 0.0
    grads = zero_grads(params)
    for group in groups:
        loss, weights = surrogate_loss(params, group, clip)
        total_loss += inv_b * loss
        for traj, w in zip(group.trajectories, weights):
            traj_grads = backward(params, traj, inv_b * w)
            for name in grads:
                grads[name] += traj_grads[name]
    return total_loss, grads


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros(cls, params: PolicyParams) -> "AdamMoments":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays().items()},
            v={k: np.zeros_like(a) for k, a in params.arrays().items()},
            step_count=0,
        )


def optimizer_step(
    params: PolicyParams,
    grads: dict[str, np.ndarray],
    moments: AdamMoments,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[PolicyParams, AdamMoments]:
    """Bias-corrected adaptive update with decoupled weight decay.

    Non-finite gradients abort the step before any state is touched.
    """
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in: {', '.join(sorted(bad))}")
    beta1, beta2 = betas
    t = moments.step_count + 1
    new_m, new_v, new_arrays = {}, {}, {}
    for name, arr in params.arrays().items():
        g = grads[name]
        m = beta1 * moments.m[name] + (1.0 - beta1) * g
        v = beta2 * moments.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_arrays[name] = arr - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * weight_decay * arr
        new_m[name] = m
        new_v[name] = v
    new_params = PolicyParams(**new_arrays, parameter_version=params.parameter_version + 1)
    return new_params, AdamMoments(m=new_m, v=new_v, step_count=t)


@dataclass(frozen=True)
class StepStats:
    loss: float
    grad_norm: float


def accumulate_and_step(
    params: PolicyParams,
    moments: AdamMoments,
    minibatches: list[list[RolloutGroup]],
    clip: ClipConfig,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[PolicyParams, AdamMoments, StepStats]:
    """Average gradients across accumulation minibatches, then take one
    optimizer step."""
    if not minibatches:
        raise UsageError("need at least one minibatch")
    inv_n = 1.0 / len(minibatches)
    avg_loss = 0.0
    avg_grads = zero_grads(params)
    for groups in minibatches:
        loss, grads = minibatch_gradient(params, groups, clip)
        avg_loss += inv_n * loss
        for name in avg_grads:
            avg_grads[name] += inv_n * grads[name]
    grad_norm = float(np.sqrt(sum(float((g**2).sum()) for g in avg_grads.values())))
    new_params, new_moments = optimizer_step(
        params, avg_grads, moments, lr, betas=betas, eps=eps, weight_decay=weight_decay
    )
    return new_params, new_moments, StepStats(loss=float(avg_loss), grad_norm=grad_norm)
