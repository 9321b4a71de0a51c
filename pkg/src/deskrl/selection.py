"""Valuable-task filtering.

Each candidate task is probed with a fixed number of rollouts from the
baseline policy; tasks the baseline solves at least `keep_threshold` times
are kept for training. Filtering out never-solved tasks keeps within-group
reward variance alive during early optimization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .environment import Task
from .errors import UsageError
from .rollout import episode_seed_sequence, run_episode

_PROBE_SEED_TAG = 0x9206


@dataclass(frozen=True)
class TaskProbeReport:
    task_id: int
    n_rollouts: int
    n_successes: int
    kept: bool
    rewards: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "n_rollouts": self.n_rollouts,
            "n_successes": self.n_successes,
            "kept": self.kept,
            "rewards": list(self.rewards),
        }


def probe_task(
    task: Task,
    policy,
    n_rollouts: int = 16,
    temperature: float = 1.0,
    seed: int = 0,
    keep_threshold: int = 1,
) -> TaskProbeReport:
    """Run independent probe episodes and count task successes."""
    if n_rollouts < 1:
        raise UsageError("n_rollouts must be >= 1")
    probe_seed = int(
        np.random.SeedSequence((_PROBE_SEED_TAG, seed, task.task_id)).generate_state(1, np.uint64)[0]
    )
    totals = []
    successes = 0
    for i in range(n_rollouts):
        rng = np.random.default_rng(episode_seed_sequence(probe_seed, i))
        traj = run_episode(task, policy, temperature, rng, env_seed=probe_seed)
        totals.append(traj.reward.total)
        if traj.reward.trajectory_reward == 1.0:
            successes += 1
    return TaskProbeReport(
        task_id=task.task_id,
        n_rollouts=n_rollouts,
        n_successes=successes,
        kept=successes >= keep_threshold,
        rewards=tuple(totals),
    )


def select_tasks(
    tasks: list[Task],
    policy,
    n_rollouts: int = 16,
    keep_threshold: int = 1,
    temperature: float = 1.0,
    seed: int = 0,
) -> tuple[list[Task], list[TaskProbeReport]]:
    """Probe every task once; return (kept tasks, one report per input task).

    An empty selection is returned as-is (the trainer refuses to start on an
    empty set), so callers can inspect the reports.
    """
    if not tasks:
        raise UsageError("select_tasks needs a non-empty task set")
    reports = [
        probe_task(task, policy, n_rollouts, temperature, seed=seed, keep_threshold=keep_threshold)
        for task in tasks
    ]
    kept_ids = {r.task_id for r in reports if r.kept}
    selected = [t for t in tasks if t.task_id in kept_ids]
    return selected, reports


def save_probe_reports(reports: list[TaskProbeReport], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
