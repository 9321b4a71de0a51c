from __future__ import annotations

import numpy as np
import pytest

from deskrl.environment import ActionKind, Task
from deskrl.policy import NeuralPolicy, init_params
from deskrl.rollout import run_episode


def make_task(
    goal=((ActionKind.CLICK_L, 0), (ActionKind.SCROLL, 1)),
    *,
    task_id=0,
    n_widgets=2,
    max_steps=6,
    feasible=True,
    domain_tag="in_domain",
):
    return Task(
        task_id=task_id,
        goal_spec=tuple(goal) if feasible else (),
        max_steps=max_steps,
        feasible=feasible,
        domain_tag=domain_tag,
        n_widgets=n_widgets,
    )


def small_params(seed=0, n_widgets=2, max_steps=6, embed_dim=6, hidden_dim=7):
    return init_params(seed, n_widgets, max_steps=max_steps, embed_dim=embed_dim, hidden_dim=hidden_dim)


def sample_trajectory(params, task, seed=0, temperature=1.0):
    rng = np.random.default_rng(seed)
    return run_episode(task, NeuralPolicy(params), temperature, rng, env_seed=seed)


def finite_difference_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function over a flat vector."""
    grad = np.zeros_like(x)
    for i in range(x.size):
        bump = np.zeros_like(x)
        bump[i] = h
        grad[i] = (f(x + bump) - f(x - bump)) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
