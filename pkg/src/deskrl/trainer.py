"""Training orchestration: the full optimization loop, evaluation protocols,
the reject-sampling baseline, checkpointing and metrics.

One epoch is: snapshot the policy, roll every task through the rollout
engine, (with replay enabled) insert fresh successes and inject into all-fail
groups, attach advantages, then consume the groups in minibatches with
gradient accumulation. All randomness is derived statelessly from
(seed, purpose tag, epoch), which makes checkpoint resume bit-exact: the same
seeds regenerate the same streams.

Evaluation supports two protocols. `standard` rewrites the final action of a
step-capped episode to FAIL before scoring, which silently awards infeasible
tasks; `hard` scores the transcript as-is. Per-episode, hard success never
exceeds standard success.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .environment import Task
from .errors import ConfigError, DataError, NonFiniteGradientError, UsageError
from .grpo import (
    AdamMoments,
    ClipConfig,
    RolloutGroup,
    accumulate_and_step,
    attach_advantages,
    minibatch_gradient,
    optimizer_step,
)
from .metrics import MetricsRow, MetricsWriter
from .policy import (
    NeuralPolicy,
    PolicyParams,
    Trajectory,
    backward,
    init_params,
    trajectory_logprobs,
    zero_grads,
)
from .replay import ReplayBuffer
from .rollout import LatencyModel, RolloutConfig, run_epoch, run_episode

ALGORITHMS = ("grpo", "arpo", "reject_sft")
EVAL_PROTOCOLS = ("standard", "hard")

_ROLLOUT_TAG = 101
_INJECT_TAG = 102
_EVAL_TAG = 103
_SFT_TAG = 104


@dataclass
class TrainConfig:
    algorithm: str = "grpo"
    epochs: int = 15
    rollout_batch_tasks: int = 32
    group_size: int = 8
    minibatch_size: int = 8
    grad_accumulation: int = 4
    # Toy-scale default; at reference scale (7B-parameter policies) the
    # documented value is 1e-6.
    learning_rate: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    eps_low: float = 0.2
    eps_high: float = 0.3
    sigma_floor: float = 1e-8
    rollout_temperature: float = 1.0
    eval_temperature: float = 0.6
    eval_episodes_per_task: int = 8
    eval_every_epochs: int = 1
    eval_protocol: str = "hard"
    replay_capacity_per_task: int = 4
    seed: int = 0
    n_envs: int = 256
    max_steps: int = 15
    os_delay_per_step: float = 1500.0
    infer_base_cost: float = 900.0
    infer_per_item_cost: float = 55.0
    embed_dim: int = 24
    hidden_dim: int = 32
    transcript_log: bool = False

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.eval_protocol not in EVAL_PROTOCOLS:
            raise ConfigError(f"unknown eval_protocol {self.eval_protocol!r}")
        for name in (
            "epochs",
            "rollout_batch_tasks",
            "minibatch_size",
            "grad_accumulation",
            "eval_episodes_per_task",
            "n_envs",
            "max_steps",
            "embed_dim",
            "hidden_dim",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.rollout_temperature <= 0 or self.eval_temperature <= 0:
            raise ConfigError("temperatures must be > 0")
        if self.replay_capacity_per_task < 0:
            raise ConfigError("replay_capacity_per_task must be >= 0")
        if self.eval_every_epochs < 0:
            raise ConfigError("eval_every_epochs must be >= 0")
        chunk = self.minibatch_size * self.grad_accumulation
        if self.rollout_batch_tasks % chunk != 0:
            raise ConfigError(
                f"rollout_batch_tasks ({self.rollout_batch_tasks}) must be a multiple of "
                f"minibatch_size * grad_accumulation ({chunk})"
            )
        ClipConfig(self.eps_low, self.eps_high, self.sigma_floor)
        LatencyModel(self.os_delay_per_step, self.infer_base_cost, self.infer_per_item_cost)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(obj) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def clip_config(self) -> ClipConfig:
        return ClipConfig(self.eps_low, self.eps_high, self.sigma_floor)

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(
            n_envs=self.n_envs,
            group_size=self.group_size,
            max_steps=self.max_steps,
            rollout_temperature=self.rollout_temperature,
            latency=LatencyModel(self.os_delay_per_step, self.infer_base_cost, self.infer_per_item_cost),
        )


def derive_seed(seed: int, tag: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, tag, index)).generate_state(1, np.uint64)[0])


def _check_tasks(tasks: list[Task], config: TrainConfig) -> int:
    if not tasks:
        raise UsageError("refusing to train on an empty task set")
    n_widgets = tasks[0].n_widgets
    for task in tasks:
        if task.n_widgets != n_widgets:
            raise ConfigError("all tasks in a suite must share n_widgets")
        if task.max_steps > config.max_steps:
            raise ConfigError(f"task {task.task_id} max_steps exceeds config max_steps")
    return n_widgets


def _epoch_task_list(tasks: list[Task], config: TrainConfig) -> list[Task]:
    """Cycle-extend the task set to a whole number of rollout batches."""
    n = len(tasks)
    batches = max(1, math.ceil(n / config.rollout_batch_tasks))
    target = batches * config.rollout_batch_tasks
    return [tasks[i % n] for i in range(target)]


def protocol_success(task: Task, trajectory: Trajectory, protocol: str) -> float:
    """Score one episode under an evaluation protocol.

    standard: a step-capped episode is re-scored as if its final action had
    been FAIL (this is the replacement rule that lets infeasible tasks score
    spuriously). hard: the transcript is scored as-is.
    """
    if protocol not in EVAL_PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    if protocol == "standard" and trajectory.termination_cause == "step_cap":
        return 0.0 if task.feasible else 1.0
    return trajectory.reward.trajectory_reward


@dataclass(frozen=True)
class EvalTaskRow:
    task_id: int
    domain_tag: str
    n_successes: float
    n_episodes: int


@dataclass(frozen=True)
class EvalReport:
    protocol: str
    n_episodes_per_task: int
    success_rate: float
    by_tag: dict
    per_task: tuple[EvalTaskRow, ...]

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "n_episodes_per_task": self.n_episodes_per_task,
            "success_rate": self.success_rate,
            "by_tag": self.by_tag,
            "per_task": [asdict(r) for r in self.per_task],
        }


def _eval_episode_sets(
    policy, tasks: list[Task], n_episodes_per_task: int, temperature: float, seed: int
) -> dict[int, list[Trajectory]]:
    episodes: dict[int, list[Trajectory]] = {}
    for task in tasks:
        task_seed = derive_seed(seed, _EVAL_TAG, task.task_id)
        runs = []
        for i in range(n_episodes_per_task):
            rng = np.random.default_rng(np.random.SeedSequence((task_seed, i)))
            runs.append(run_episode(task, policy, temperature, rng, env_seed=task_seed))
        episodes[task.task_id] = runs
    return episodes


def _score_report(
    tasks: list[Task],
    episodes: dict[int, list[Trajectory]],
    protocol: str,
    n_episodes_per_task: int,
) -> EvalReport:
    per_task = []
    tag_totals: dict[str, list[float]] = {}
    all_scores: list[float] = []
    for task in tasks:
        scores = [protocol_success(task, t, protocol) for t in episodes[task.task_id]]
        per_task.append(
            EvalTaskRow(
                task_id=task.task_id,
                domain_tag=task.domain_tag,
                n_successes=float(sum(scores)),
                n_episodes=len(scores),
            )
        )
        tag_totals.setdefault(task.domain_tag, []).extend(scores)
        all_scores.extend(scores)
    by_tag = {tag: float(np.mean(vals)) for tag, vals in sorted(tag_totals.items())}
    return EvalReport(
        protocol=protocol,
        n_episodes_per_task=n_episodes_per_task,
        success_rate=float(np.mean(all_scores)),
        by_tag=by_tag,
        per_task=tuple(per_task),
    )


def evaluate(
    policy,
    tasks: list[Task],
    protocol: str = "hard",
    n_episodes_per_task: int = 8,
    eval_temperature: float = 0.6,
    seed: int = 0,
) -> EvalReport:
    if protocol not in EVAL_PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    if not tasks:
        raise UsageError("evaluate needs a non-empty task set")
    episodes = _eval_episode_sets(policy, tasks, n_episodes_per_task, eval_temperature, seed)
    return _score_report(tasks, episodes, protocol, n_episodes_per_task)


def evaluate_protocols(
    policy,
    tasks: list[Task],
    protocols: tuple[str, ...] = EVAL_PROTOCOLS,
    n_episodes_per_task: int = 8,
    eval_temperature: float = 0.6,
    seed: int = 0,
) -> dict[str, EvalReport]:
    """Score one shared episode set under several protocols."""
    if not tasks:
        raise UsageError("evaluate needs a non-empty task set")
    episodes = _eval_episode_sets(policy, tasks, n_episodes_per_task, eval_temperature, seed)
    return {p: _score_report(tasks, episodes, p, n_episodes_per_task) for p in protocols}


def _eval_summary(policy, tasks: list[Task], config: TrainConfig, epoch_tag: int) -> dict:
    report = evaluate(
        policy,
        tasks,
        protocol=config.eval_protocol,
        n_episodes_per_task=config.eval_episodes_per_task,
        eval_temperature=config.eval_temperature,
        seed=derive_seed(config.seed, _EVAL_TAG, epoch_tag),
    )
    return {
        "epoch": epoch_tag,
        "protocol": report.protocol,
        "overall": report.success_rate,
        "in_domain": report.by_tag.get("in_domain"),
        "out_of_domain": report.by_tag.get("out_of_domain"),
    }


def append_trajectory_records(path: Path, trajectories: list[Trajectory]) -> None:
    with path.open("a", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_dict(), sort_keys=True) + "\n")


@dataclass
class TrainResult:
    params: PolicyParams
    moments: AdamMoments
    replay: ReplayBuffer | None
    metrics_path: Path
    checkpoint_paths: list[Path]
    latest_eval: dict | None
    total_steps: int


def train(
    config: TrainConfig,
    tasks: list[Task],
    run_dir: str | Path,
    eval_tasks: list[Task] | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the grpo/arpo loop; returns final state and writes metrics plus a
    checkpoint per epoch under run_dir."""
    config.validate()
    if config.algorithm == "reject_sft":
        raise ConfigError("reject_sft runs through reject_sampling_sft, not train()")
    n_widgets = _check_tasks(tasks, config)
    if eval_tasks:
        _check_tasks(eval_tasks, config)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    use_replay = config.algorithm == "arpo"

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        # epochs is a stop condition, not state: resuming to train longer is fine
        def _state_keys(cfg: dict) -> dict:
            return {k: v for k, v in cfg.items() if k != "epochs"}

        if _state_keys(state.config) != _state_keys(config.to_dict()):
            raise ConfigError("checkpoint was produced under a different config; refusing to resume")
        params, moments = state.params, state.moments
        replay = state.replay if use_replay else None
        if use_replay and replay is None:
            raise DataError("checkpoint lacks a replay buffer but algorithm is arpo")
        start_epoch = state.epoch
        latest_eval = state.latest_eval
    else:
        params = init_params(
            config.seed,
            n_widgets,
            max_steps=config.max_steps,
            embed_dim=config.embed_dim,
            hidden_dim=config.hidden_dim,
        )
        moments = AdamMoments.zeros(params)
        replay = ReplayBuffer(config.replay_capacity_per_task) if use_replay else None
        start_epoch = 0
        latest_eval = None

    eval_suite = eval_tasks if eval_tasks is not None else tasks
    writer = MetricsWriter(run_dir / "metrics.csv")
    rollout_cfg = config.rollout_config()
    clip = config.clip_config()
    epoch_list = _epoch_task_list(tasks, config)
    chunk = config.minibatch_size * config.grad_accumulation
    steps_per_epoch = len(epoch_list) // chunk
    global_step = start_epoch * steps_per_epoch
    checkpoint_paths: list[Path] = []

    if config.eval_every_epochs > 0 and latest_eval is None:
        latest_eval = _eval_summary(NeuralPolicy(params), eval_suite, config, epoch_tag=0)

    for epoch in range(start_epoch, config.epochs):
        policy = NeuralPolicy(params)
        groups, throughput = run_epoch(
            epoch_list, policy, rollout_cfg, derive_seed(config.seed, _ROLLOUT_TAG, epoch)
        )
        if config.transcript_log:
            records = [t for g in groups for t in g.trajectories]
            append_trajectory_records(run_dir / "transcripts.jsonl", records)

        # Fresh-rollout statistics, captured before any injection touches the
        # groups: the reward curve must reflect what the policy sampled.
        fresh_success = [float(np.mean(g.task_success_flags())) for g in groups]
        fresh_penalty = [
            float(np.mean([t.reward.format_penalty_total for t in g.trajectories])) for g in groups
        ]
        fresh_all_fail = [1.0 if all(f == 0.0 for f in g.task_success_flags()) else 0.0 for g in groups]

        if use_replay:
            inject_rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, _INJECT_TAG, epoch))
            )
            for group in groups:
                for traj in group.trajectories:
                    replay.insert(group.task_id, traj)
                replay.maybe_inject(group, inject_rng)
        for group in groups:
            attach_advantages(group, config.sigma_floor)

        for s in range(steps_per_epoch):
            chunk_groups = groups[s * chunk : (s + 1) * chunk]
            minibatches = [
                chunk_groups[i * config.minibatch_size : (i + 1) * config.minibatch_size]
                for i in range(config.grad_accumulation)
            ]
            params, moments, stats = accumulate_and_step(
                params,
                moments,
                minibatches,
                clip,
                config.learning_rate,
                betas=(config.adam_beta1, config.adam_beta2),
                eps=config.adam_eps,
                weight_decay=config.weight_decay,
            )
            if not math.isfinite(stats.loss):
                raise NonFiniteGradientError(f"non-finite loss {stats.loss} at step {global_step + 1}")
            global_step += 1
            lo, hi = s * chunk, (s + 1) * chunk
            writer.append(
                MetricsRow(
                    step=global_step,
                    epoch=epoch + 1,
                    mean_group_reward=float(np.mean(fresh_success[lo:hi])),
                    mean_format_penalty=float(np.mean(fresh_penalty[lo:hi])),
                    mean_group_sigma=float(np.mean([g.std_sigma for g in chunk_groups])),
                    all_fail_fraction=float(np.mean(fresh_all_fail[lo:hi])),
                    injection_count=replay.injection_count if replay else 0,
                    replay_insertions=replay.insertion_count if replay else 0,
                    replay_evictions=replay.eviction_count if replay else 0,
                    loss=stats.loss,
                    eval_success_in_domain=latest_eval.get("in_domain") if latest_eval else None,
                    eval_success_out_of_domain=latest_eval.get("out_of_domain") if latest_eval else None,
                    virtual_time_ms=throughput.per_epoch_vtime,
                )
            )

        if config.eval_every_epochs > 0 and (epoch + 1) % config.eval_every_epochs == 0:
            latest_eval = _eval_summary(NeuralPolicy(params), eval_suite, config, epoch_tag=epoch + 1)

        checkpoint_paths.append(
            save_checkpoint(
                run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.npz",
                params=params,
                moments=moments,
                replay=replay,
                epoch=epoch + 1,
                config=config.to_dict(),
                latest_eval=latest_eval,
            )
        )

    return TrainResult(
        params=params,
        moments=moments,
        replay=replay,
        metrics_path=run_dir / "metrics.csv",
        checkpoint_paths=checkpoint_paths,
        latest_eval=latest_eval,
        total_steps=global_step,
    )


def sft_loss_and_grads(
    params: PolicyParams, trajectories: list[Trajectory]
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative per-token log-likelihood over a trajectory minibatch.

    Every token carries weight 1 (length-normalized); no ratios, no
    advantages.
    """
    if not trajectories:
        raise UsageError("sft minibatch is empty")
    inv_b = 1.0 / len(trajectories)
    loss = 0.0
    grads = zero_grads(params)
    for traj in trajectories:
        logps = trajectory_logprobs(params, traj, 1.0)
        loss += inv_b * float(-logps.mean())
        weights = np.full(traj.token_count, -inv_b / traj.token_count)
        traj_grads = backward(params, traj, weights)
        for name in grads:
            grads[name] += traj_grads[name]
    return loss, grads


def reject_sampling_sft(
    config: TrainConfig,
    tasks: list[Task],
    run_dir: str | Path,
) -> TrainResult:
    """Collect rollouts with the frozen baseline under the same budget and
    seed schedule as RL training, keep only task successes, and fit them by
    maximum likelihood with the same optimizer."""
    config.validate()
    n_widgets = _check_tasks(tasks, config)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    params = init_params(
        config.seed,
        n_widgets,
        max_steps=config.max_steps,
        embed_dim=config.embed_dim,
        hidden_dim=config.hidden_dim,
    )
    baseline = NeuralPolicy(params)
    rollout_cfg = config.rollout_config()
    epoch_list = _epoch_task_list(tasks, config)

    positives: list[Trajectory] = []
    for epoch in range(config.epochs):
        groups, _ = run_epoch(
            epoch_list, baseline, rollout_cfg, derive_seed(config.seed, _ROLLOUT_TAG, epoch)
        )
        for group in groups:
            positives.extend(t for t in group.trajectories if t.reward.trajectory_reward == 1.0)
    if not positives:
        raise UsageError(
            "reject sampling collected zero positive trajectories; nothing to fit"
        )

    writer = MetricsWriter(run_dir / "metrics.csv")
    moments = AdamMoments.zeros(params)
    chunk = config.minibatch_size * config.grad_accumulation
    order = list(range(len(positives)))
    global_step = 0
    checkpoint_paths: list[Path] = []
    for epoch in range(config.epochs):
        shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, _SFT_TAG, epoch)))
        perm = shuffle_rng.permutation(order)
        n_chunks = max(1, math.ceil(len(perm) / chunk))
        for c in range(n_chunks):
            picked = [positives[int(perm[i % len(perm)])] for i in range(c * chunk, (c + 1) * chunk)]
            minibatches = [
                picked[i * config.minibatch_size : (i + 1) * config.minibatch_size]
                for i in range(config.grad_accumulation)
            ]
            minibatches = [mb for mb in minibatches if mb]
            inv_n = 1.0 / len(minibatches)
            avg_loss = 0.0
            avg_grads = zero_grads(params)
            for mb in minibatches:
                loss, grads = sft_loss_and_grads(params, mb)
                avg_loss += inv_n * loss
                for name in avg_grads:
                    avg_grads[name] += inv_n * grads[name]
            params, moments = optimizer_step(
                params,
                avg_grads,
                moments,
                config.learning_rate,
                betas=(config.adam_beta1, config.adam_beta2),
                eps=config.adam_eps,
                weight_decay=config.weight_decay,
            )
            global_step += 1
            writer.append(
                MetricsRow(
                    step=global_step,
                    epoch=epoch + 1,
                    mean_group_reward=None,
                    mean_format_penalty=None,
                    mean_group_sigma=None,
                    all_fail_fraction=None,
                    injection_count=0,
                    replay_insertions=0,
                    replay_evictions=0,
                    loss=avg_loss,
                    eval_success_in_domain=None,
                    eval_success_out_of_domain=None,
                    virtual_time_ms=None,
                )
            )
        checkpoint_paths.append(
            save_checkpoint(
                run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.npz",
                params=params,
                moments=moments,
                replay=None,
                epoch=epoch + 1,
                config=config.to_dict(),
                latest_eval=None,
            )
        )
    return TrainResult(
        params=params,
        moments=moments,
        replay=None,
        metrics_path=run_dir / "metrics.csv",
        checkpoint_paths=checkpoint_paths,
        latest_eval=None,
        total_steps=global_step,
    )
