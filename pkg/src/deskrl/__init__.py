"""deskrl: group-relative policy optimization with per-task success replay,
probe-based task selection and a virtual-clock rollout engine, all against a
synthetic multi-turn desktop environment."""

__version__ = "0.1.0"

from .environment import (
    Action,
    ActionKind,
    Observation,
    ParseFailure,
    RewardBreakdown,
    SyntheticDesktop,
    Task,
    generate_task_suite,
    load_task_suite,
    parse_action,
    save_task_suite,
    terminal_reward,
)
from .grpo import (
    AdamMoments,
    ClipConfig,
    RolloutGroup,
    accumulate_and_step,
    compute_advantages,
    optimizer_step,
    surrogate_loss,
)
from .policy import (
    NeuralPolicy,
    PolicyParams,
    TokenStep,
    Trajectory,
    action_distribution,
    backward,
    encode_history,
    init_params,
    sample_step,
    trajectory_logprobs,
)
from .replay import ReplayBuffer
from .rollout import (
    LatencyModel,
    RolloutConfig,
    ScriptedPolicy,
    ThroughputReport,
    batched_infer,
    run_epoch,
    run_group,
)
from .selection import TaskProbeReport, probe_task, select_tasks
from .trainer import (
    EvalReport,
    TrainConfig,
    TrainResult,
    evaluate,
    evaluate_protocols,
    reject_sampling_sft,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
