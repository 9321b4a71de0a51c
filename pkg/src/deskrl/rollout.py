"""Parallel rollout execution over a deterministic virtual clock.

Many logical environment workers feed one centralized batched inference
service. The service greedily grabs every pending request whenever it goes
idle and charges an affine virtual cost (base + per-item) per batch, while
environment delays on distinct workers overlap (max, not sum). Batching is a
pure throughput optimization: each request is evaluated exactly as a
standalone call and every episode owns a private rng stream keyed by
(seed, slot, member), so trajectory content is bit-identical for any worker
count or batching schedule. Only the time accounting changes.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .environment import SyntheticDesktop, Task, parse_action, terminal_reward
from .errors import ConfigError, UsageError
from .grpo import RolloutGroup
from .policy import TokenStep, Trajectory, TrajectoryStep

_EPISODE_SEED_TAG = 0x51DE


@dataclass(frozen=True)
class LatencyModel:
    """Virtual-millisecond cost model: one OS-level delay per environment
    step and an affine batched-inference cost."""

    os_delay_per_step: float = 1500.0
    infer_base_cost: float = 900.0
    infer_per_item_cost: float = 55.0

    def __post_init__(self):
        if min(self.os_delay_per_step, self.infer_base_cost, self.infer_per_item_cost) < 0:
            raise ConfigError("latency costs must be >= 0")

    def batch_cost(self, batch_size: int) -> float:
        return self.infer_base_cost + self.infer_per_item_cost * batch_size


@dataclass(frozen=True)
class RolloutConfig:
    n_envs: int = 256
    group_size: int = 8
    max_steps: int = 15
    rollout_temperature: float = 1.0
    latency: LatencyModel = field(default_factory=LatencyModel)

    def __post_init__(self):
        if self.n_envs < 1:
            raise ConfigError("n_envs must be >= 1")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.rollout_temperature <= 0:
            raise ConfigError("rollout_temperature must be > 0")


@dataclass(frozen=True)
class ThroughputReport:
    per_batch_vtime: float
    per_epoch_vtime: float
    n_inference_batches: int
    n_requests: int
    mean_batch_occupancy: float
    n_episodes: int

    def to_dict(self) -> dict:
        return {
            "per_batch_vtime": self.per_batch_vtime,
            "per_epoch_vtime": self.per_epoch_vtime,
            "n_inference_batches": self.n_inference_batches,
            "n_requests": self.n_requests,
            "mean_batch_occupancy": self.mean_batch_occupancy,
            "n_episodes": self.n_episodes,
        }


@dataclass
class HistoryView:
    """Episode-local view passed to policies: the observation/token history
    plus a scratch cache policies may use for incremental state."""

    observations: list = field(default_factory=list)
    token_pairs: list = field(default_factory=list)
    cache: dict = field(default_factory=dict)


class ScriptedPolicy:
    """Deterministic token program, mainly for tests and protocol probes.

    Emits program[i] at step i; past the end it repeats the last entry when
    `cycle` is False, otherwise wraps around. Log-probs are recorded as 0
    (probability one).
    """

    def __init__(self, program: list[tuple[int, int]], cycle: bool = False, version: int = 0):
        if not program:
            raise UsageError("scripted policy needs a non-empty program")
        self.program = list(program)
        self.cycle = cycle
        self.version = version

    def token_step(self, view: HistoryView, temperature: float, rng) -> TokenStep:
        i = len(view.token_pairs)
        if self.cycle:
            verb, arg = self.program[i % len(self.program)]
        else:
            verb, arg = self.program[min(i, len(self.program) - 1)]
        return TokenStep(verb, arg, 0.0, 0.0, 0.0, 0.0)


def episode_seed_sequence(group_seed: int, member: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((_EPISODE_SEED_TAG, group_seed, member))


def group_seed_for(epoch_seed: int, slot: int) -> int:
    return int(np.random.SeedSequence((epoch_seed, slot)).generate_state(1, np.uint64)[0])


def run_episode(
    task: Task,
    policy,
    temperature: float,
    rng: np.random.Generator,
    env_seed: int = 0,
) -> Trajectory:
    """Roll one episode to termination (serial reference path)."""
    env = SyntheticDesktop(task, seed=env_seed)
    view = HistoryView()
    obs = env.reset()
    view.observations.append(obs)
    steps = []
    while True:
        token = policy.token_step(view, temperature, rng)
        view.token_pairs.append((token.verb_token, token.arg_token))
        action = parse_action(token.verb_token, token.arg_token, task.n_widgets)
        next_obs, done = env.step(action)
        steps.append(TrajectoryStep(observation=obs, token=token, action=action))
        if done:
            break
        view.observations.append(next_obs)
        obs = next_obs
    return Trajectory(
        task_id=task.task_id,
        steps=tuple(steps),
        reward=terminal_reward(task, env),
        termination_cause=env.termination_cause,
        behavior_version=policy.version,
    )


def run_group(task: Task, policy, config: RolloutConfig, seed: int) -> RolloutGroup:
    """G independent episodes for one task at the rollout temperature."""
    if task.max_steps > config.max_steps:
        raise ConfigError(
            f"task {task.task_id} max_steps {task.max_steps} exceeds rollout config cap {config.max_steps}"
        )
    trajectories = []
    for member in range(config.group_size):
        rng = np.random.default_rng(episode_seed_sequence(seed, member))
        trajectories.append(run_episode(task, policy, config.rollout_temperature, rng, env_seed=seed))
    rewards = np.array([t.reward.total for t in trajectories], dtype=np.float64)
    return RolloutGroup(task_id=task.task_id, trajectories=trajectories, rewards=rewards)


@dataclass
class InferenceRequest:
    worker_id: int
    view: HistoryView
    temperature: float
    rng: np.random.Generator


def batched_infer(policy, requests: list[InferenceRequest]) -> list[TokenStep]:
    """Evaluate a batch of pending requests.

    Results are element-wise identical to issuing each request alone; the
    batch exists so the engine can charge one amortized cost for it.
    """
    if not requests:
        raise UsageError("batched_infer needs at least one request")
    return [policy.token_step(r.view, r.temperature, r.rng) for r in requests]


class _EpisodeRun:
    __slots__ = ("task", "slot", "member", "env", "view", "rng", "steps", "obs")

    def __init__(self, task: Task, slot: int, member: int, group_seed: int):
        self.task = task
        self.slot = slot
        self.member = member
        self.env = SyntheticDesktop(task, seed=group_seed)
        self.view = HistoryView()
        self.rng = np.random.default_rng(episode_seed_sequence(group_seed, member))
        self.steps: list[TrajectoryStep] = []
        self.obs = self.env.reset()
        self.view.observations.append(self.obs)


_EV_READY = 0
_EV_SERVICE_DONE = 1


def run_epoch(
    tasks: list[Task],
    policy,
    config: RolloutConfig,
    seed: int,
) -> tuple[list[RolloutGroup], ThroughputReport]:
    """Execute every task x group_size episode through the virtual-clock
    scheduler and return groups in task order plus the timing report.

    per_batch_vtime is the epoch time divided by the number of worker-pool
    fills (ceil(episodes / n_envs)): the virtual time one wave of concurrent
    trajectories takes.
    """
    if not tasks:
        raise UsageError("run_epoch needs a non-empty task list")
    for task in tasks:
        if task.max_steps > config.max_steps:
            raise ConfigError(
                f"task {task.task_id} max_steps {task.max_steps} exceeds rollout config cap {config.max_steps}"
            )

    jobs = [
        (slot, member, task, group_seed_for(seed, slot))
        for slot, task in enumerate(tasks)
        for member in range(config.group_size)
    ]
    n_episodes = len(jobs)
    results: dict[tuple[int, int], Trajectory] = {}
    latency = config.latency

    heap: list[tuple[float, int, int, object]] = []
    seq = 0

    def schedule(time: float, kind: int, payload) -> None:
        nonlocal seq
        heapq.heappush(heap, (time, seq, kind, payload))
        seq += 1

    runs: dict[int, _EpisodeRun] = {}
    job_cursor = 0

    def start_next_job(worker_id: int, now: float) -> None:
        nonlocal job_cursor
        if job_cursor >= len(jobs):
            runs.pop(worker_id, None)
            return
        slot, member, task, group_seed = jobs[job_cursor]
        job_cursor += 1
        runs[worker_id] = _EpisodeRun(task, slot, member, group_seed)
        schedule(now + latency.os_delay_per_step, _EV_READY, worker_id)

    n_workers = min(config.n_envs, n_episodes)
    for wid in range(n_workers):
        start_next_job(wid, 0.0)

    pending: list[int] = []
    service_busy = False
    vnow = 0.0
    n_batches = 0
    n_requests = 0

    def deliver(worker_id: int, token: TokenStep, now: float) -> None:
        run = runs[worker_id]
        run.view.token_pairs.append((token.verb_token, token.arg_token))
        action = parse_action(token.verb_token, token.arg_token, run.task.n_widgets)
        next_obs, done = run.env.step(action)
        run.steps.append(TrajectoryStep(observation=run.obs, token=token, action=action))
        if done:
            results[(run.slot, run.member)] = Trajectory(
                task_id=run.task.task_id,
                steps=tuple(run.steps),
                reward=terminal_reward(run.task, run.env),
                termination_cause=run.env.termination_cause,
                behavior_version=policy.version,
            )
            start_next_job(worker_id, now)
        else:
            run.view.observations.append(next_obs)
            run.obs = next_obs
            schedule(now + latency.os_delay_per_step, _EV_READY, worker_id)

    while heap:
        now = heap[0][0]
        vnow = now
        while heap and heap[0][0] == now:
            _, _, kind, payload = heapq.heappop(heap)
            if kind == _EV_READY:
                pending.append(payload)
            else:
                for worker_id, token in payload:
                    deliver(worker_id, token, now)
                service_busy = False
        if not service_busy and pending:
            batch = pending
            pending = []
            requests = [
                InferenceRequest(wid, runs[wid].view, config.rollout_temperature, runs[wid].rng)
                for wid in batch
            ]
            tokens = batched_infer(policy, requests)
            n_batches += 1
            n_requests += len(batch)
            schedule(now + latency.batch_cost(len(batch)), _EV_SERVICE_DONE, list(zip(batch, tokens)))
            service_busy = True

    groups = []
    for slot, task in enumerate(tasks):
        trajectories = [results[(slot, member)] for member in range(config.group_size)]
        rewards = np.array([t.reward.total for t in trajectories], dtype=np.float64)
        groups.append(RolloutGroup(task_id=task.task_id, trajectories=trajectories, rewards=rewards))

    n_waves = -(-n_episodes // config.n_envs)  # ceil
    report = ThroughputReport(
        per_batch_vtime=vnow / n_waves,
        per_epoch_vtime=vnow,
        n_inference_batches=n_batches,
        n_requests=n_requests,
        mean_batch_occupancy=n_requests / n_batches if n_batches else 0.0,
        n_episodes=n_episodes,
    )
    return groups, report
