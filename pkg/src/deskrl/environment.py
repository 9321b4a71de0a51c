"""Synthetic multi-turn desktop MDP with sparse terminal rewards.

A task hides an ordered list of required widget interactions. The agent emits
(verb, argument) token pairs each step; pairs that violate the action schema
cost a -1 format penalty and execute as no-ops. Episodes terminate on FINISH,
FAIL or CALL_USER, or when the step cap is reached. A feasible task pays a
terminal reward of 1 only when every required interaction was performed in
order and the episode ended with FINISH; an infeasible task pays 1 only for
an explicit FAIL.

All dynamics are integer arithmetic, so transcripts are bit-identical across
platforms. The environment instance doubles as the episode record: it
accumulates progress, parse failures and the termination cause needed for
scoring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, UsageError


class ActionKind(Enum):
    CLICK_L = "click_l"
    CLICK_R = "click_r"
    SCROLL = "scroll"
    TYPE_TEXT = "type_text"
    HOTKEY = "hotkey"
    WAIT = "wait"
    FINISH = "finish"
    FAIL = "fail"
    CALL_USER = "call_user"


_KIND_ORDER = tuple(ActionKind)
VERB_TOKEN = {kind: i for i, kind in enumerate(_KIND_ORDER)}
VERB_VOCAB_SIZE = len(_KIND_ORDER)

PRIMITIVE_KINDS = frozenset(
    {ActionKind.CLICK_L, ActionKind.CLICK_R, ActionKind.SCROLL, ActionKind.TYPE_TEXT, ActionKind.HOTKEY}
)
META_KINDS = frozenset({ActionKind.WAIT, ActionKind.FINISH, ActionKind.FAIL, ActionKind.CALL_USER})
TERMINAL_KINDS = frozenset({ActionKind.FINISH, ActionKind.FAIL, ActionKind.CALL_USER})

# Widget values live in Z_8; each primitive op applies a distinct increment,
# so distinct executed interactions yield distinct state transcripts.
WIDGET_VALUE_MOD = 8
_OP_DELTA = {
    ActionKind.CLICK_L: 1,
    ActionKind.CLICK_R: 2,
    ActionKind.SCROLL: 3,
    ActionKind.TYPE_TEXT: 4,
    ActionKind.HOTKEY: 5,
}

DOMAIN_TAGS = ("in_domain", "out_of_domain")

_SUITE_SEED_TAG = 0x7A5C5E17


def no_arg_token(n_widgets: int) -> int:
    """Argument-vocabulary index reserved for 'no argument'."""
    return n_widgets


def arg_vocab_size(n_widgets: int) -> int:
    return n_widgets + 1


@dataclass(frozen=True)
class Task:
    task_id: int
    goal_spec: tuple[tuple[ActionKind, int], ...]
    max_steps: int = 15
    feasible: bool = True
    domain_tag: str = "in_domain"
    n_widgets: int = 4

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "goal_spec": [[kind.value, widget] for kind, widget in self.goal_spec],
            "max_steps": self.max_steps,
            "feasible": self.feasible,
            "domain_tag": self.domain_tag,
            "n_widgets": self.n_widgets,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Task":
        try:
            goal = tuple((ActionKind(kind), int(widget)) for kind, widget in obj["goal_spec"])
            return cls(
                task_id=int(obj["task_id"]),
                goal_spec=goal,
                max_steps=int(obj["max_steps"]),
                feasible=bool(obj["feasible"]),
                domain_tag=str(obj["domain_tag"]),
                n_widgets=int(obj["n_widgets"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed task record: {exc}") from exc


def validate_task(task: Task) -> None:
    """Raise ConfigError unless the task satisfies its structural invariants."""
    if task.n_widgets < 1:
        raise ConfigError(f"task {task.task_id}: n_widgets must be >= 1")
    if task.max_steps < 1:
        raise ConfigError(f"task {task.task_id}: max_steps must be >= 1")
    if task.domain_tag not in DOMAIN_TAGS:
        raise ConfigError(f"task {task.task_id}: unknown domain_tag {task.domain_tag!r}")
    if task.feasible:
        if len(task.goal_spec) == 0:
            raise ConfigError(f"task {task.task_id}: feasible task needs a non-empty goal_spec")
        if len(task.goal_spec) > task.max_steps:
            raise ConfigError(f"task {task.task_id}: goal_spec longer than max_steps")
    elif task.goal_spec:
        raise ConfigError(f"task {task.task_id}: infeasible task must have empty goal_spec")
    for kind, widget in task.goal_spec:
        if kind not in PRIMITIVE_KINDS:
            raise ConfigError(f"task {task.task_id}: goal contains non-primitive {kind}")
        if not 0 <= widget < task.n_widgets:
            raise ConfigError(f"task {task.task_id}: goal widget {widget} out of range")


@dataclass(frozen=True)
class Observation:
    step_index: int
    widget_states: tuple[int, ...]
    last_action_echo: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "widget_states": list(self.widget_states),
            "last_action_echo": list(self.last_action_echo) if self.last_action_echo else None,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Observation":
        echo = obj.get("last_action_echo")
        return cls(
            step_index=int(obj["step_index"]),
            widget_states=tuple(int(v) for v in obj["widget_states"]),
            last_action_echo=tuple(echo) if echo is not None else None,
        )


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    argument: int | None = None

    def tokens(self, n_widgets: int) -> tuple[int, int]:
        arg = self.argument if self.argument is not None else no_arg_token(n_widgets)
        return VERB_TOKEN[self.kind], arg

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "argument": self.argument}


@dataclass(frozen=True)
class ParseFailure:
    """Schema-violating token pair. A value, not an exception: it marks the
    step as malformed (-1 format penalty) and executes as a no-op."""

    verb_token: int
    arg_token: int
    reason: str

    def to_dict(self) -> dict:
        return {
            "parse_failure": True,
            "verb_token": self.verb_token,
            "arg_token": self.arg_token,
            "reason": self.reason,
        }


def action_from_dict(obj: dict) -> Action | ParseFailure:
    if obj.get("parse_failure"):
        return ParseFailure(int(obj["verb_token"]), int(obj["arg_token"]), str(obj["reason"]))
    arg = obj.get("argument")
    return Action(ActionKind(obj["kind"]), int(arg) if arg is not None else None)


@dataclass(frozen=True)
class RewardBreakdown:
    trajectory_reward: float
    format_penalty_total: float
    total: float

    @classmethod
    def build(cls, trajectory_reward: float, format_penalty_total: float) -> "RewardBreakdown":
        return cls(trajectory_reward, format_penalty_total, trajectory_reward + format_penalty_total)

    def to_dict(self) -> dict:
        return {
            "trajectory_reward": self.trajectory_reward,
            "format_penalty_total": self.format_penalty_total,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RewardBreakdown":
        rb = cls(
            float(obj["trajectory_reward"]),
            float(obj["format_penalty_total"]),
            float(obj["total"]),
        )
        if rb.total != rb.trajectory_reward + rb.format_penalty_total:
            raise DataError("reward breakdown does not sum")
        return rb


def parse_action(verb_token: int, arg_token: int, n_widgets: int) -> Action | ParseFailure:
    """Map a (verb, argument) token pair to an Action, or to a ParseFailure
    when the pair violates the schema (meta verb with an argument, primitive
    verb without one).

    Tokens outside the vocabulary are a caller bug, not a parse failure.
    """
    if not 0 <= verb_token < VERB_VOCAB_SIZE:
        raise UsageError(f"verb token {verb_token} outside vocabulary")
    if not 0 <= arg_token <= no_arg_token(n_widgets):
        raise UsageError(f"arg token {arg_token} outside vocabulary")
    kind = _KIND_ORDER[verb_token]
    has_arg = arg_token != no_arg_token(n_widgets)
    if kind in META_KINDS:
        if has_arg:
            return ParseFailure(verb_token, arg_token, "meta action takes no argument")
        return Action(kind, None)
    if not has_arg:
        return ParseFailure(verb_token, arg_token, "primitive action requires an argument")
    return Action(kind, arg_token)


class SyntheticDesktop:
    """Single-owner episode state machine.

    Construct one per episode; `reset` returns the initial observation and
    `step` consumes parsed actions. The instance accumulates everything needed
    to score the episode (goal progress, parse failures, termination cause).
    The `seed` is recorded for audit; transitions themselves are seed-free
    deterministic functions of the action sequence.
    """

    def __init__(self, task: Task, seed: int = 0):
        validate_task(task)
        self.task = task
        self.seed = seed
        self.reset()

    def reset(self) -> Observation:
        self._states = [0] * self.task.n_widgets
        self.step_index = 0
        self.goal_progress = 0
        self.parse_failure_count = 0
        self.terminated = False
        self.termination_cause: str | None = None
        self._echo: tuple[int, int] | None = None
        return self.observation()

    def observation(self) -> Observation:
        return Observation(
            step_index=self.step_index,
            widget_states=tuple(self._states),
            last_action_echo=self._echo,
        )

    @property
    def goal_complete(self) -> bool:
        return self.goal_progress == len(self.task.goal_spec)

    def step(self, action: Action | ParseFailure) -> tuple[Observation, bool]:
        if self.terminated:
            raise UsageError("step() called on a terminated episode")
        if isinstance(action, ParseFailure):
            self.parse_failure_count += 1
            self._echo = (action.verb_token, action.arg_token)
        else:
            self._echo = action.tokens(self.task.n_widgets)
            if action.kind in TERMINAL_KINDS:
                self.termination_cause = action.kind.value
            elif action.kind in PRIMITIVE_KINDS:
                w = action.argument
                self._states[w] = (self._states[w] + _OP_DELTA[action.kind]) % WIDGET_VALUE_MOD
                goal = self.task.goal_spec
                if self.goal_progress < len(goal) and goal[self.goal_progress] == (action.kind, w):
                    self.goal_progress += 1
            # WAIT: state unchanged, step consumed.
        self.step_index += 1
        if self.termination_cause is None and self.step_index >= self.task.max_steps:
            self.termination_cause = "step_cap"
        self.terminated = self.termination_cause is not None
        return self.observation(), self.terminated

    def reward(self) -> RewardBreakdown:
        return terminal_reward(self.task, self)


def score_episode(
    task: Task, termination_cause: str, goal_complete: bool, n_parse_failures: int
) -> RewardBreakdown:
    """Terminal scoring rule, factored out so evaluation protocols can re-score
    a transcript under a rewritten termination cause."""
    if task.feasible:
        success = termination_cause == ActionKind.FINISH.value and goal_complete
    else:
        success = termination_cause == ActionKind.FAIL.value
    return RewardBreakdown.build(1.0 if success else 0.0, -float(n_parse_failures))


def terminal_reward(task: Task, episode: SyntheticDesktop) -> RewardBreakdown:
    if not episode.terminated:
        raise UsageError("terminal_reward requires a terminated episode")
    return score_episode(task, episode.termination_cause, episode.goal_complete, episode.parse_failure_count)


def optimal_token_program(task: Task) -> list[tuple[int, int]]:
    """Token pairs a perfect agent would emit: the goal interactions in order
    followed by FINISH, or a bare FAIL for infeasible tasks."""
    if not task.feasible:
        return [(VERB_TOKEN[ActionKind.FAIL], no_arg_token(task.n_widgets))]
    program = [(VERB_TOKEN[kind], widget) for kind, widget in task.goal_spec]
    program.append((VERB_TOKEN[ActionKind.FINISH], no_arg_token(task.n_widgets)))
    return program


_PRIMITIVE_ORDER = tuple(k for k in _KIND_ORDER if k in PRIMITIVE_KINDS)

# GUI interaction frequencies: clicks dominate, scroll/type/hotkey are rare.
# Goals built from rare ops are intrinsically harder for a click-heavy agent,
# giving every suite a natural difficulty tail.
_PRIMITIVE_WEIGHTS = (0.44, 0.44, 0.04, 0.04, 0.04)


def generate_task_suite(
    seed: int,
    n_feasible: int,
    n_infeasible: int,
    difficulty_range: tuple[int, int] = (2, 6),
    *,
    n_widgets: int = 4,
    max_steps: int = 15,
    in_domain_fraction: float = 0.25,
    clean_fraction: float = 0.5,
) -> list[Task]:
    """Deterministically generate a task suite.

    Goal specs are noisy prefixes of one suite-level canonical interaction
    chain: a `clean_fraction` share of feasible tasks use the exact prefix,
    the rest corrupt one or two positions. Sharing the chain gives the suite
    learnable population structure while the corrupted tasks stay sparse.
    Interaction kinds are drawn click-heavy (see _PRIMITIVE_WEIGHTS).
    Difficulty (goal length) is drawn uniformly from `difficulty_range`.
    Tasks are ordered feasible-first and the leading `in_domain_fraction`
    share is tagged in_domain.
    """
    if n_feasible < 0 or n_infeasible < 0:
        raise ConfigError("task counts must be >= 0")
    total = n_feasible + n_infeasible
    if total == 0:
        raise ConfigError("refusing to generate an empty task suite")
    lo, hi = difficulty_range
    if not 1 <= lo <= hi <= max_steps:
        raise ConfigError(f"difficulty_range {difficulty_range} incompatible with max_steps {max_steps}")
    if n_widgets < 1:
        raise ConfigError("n_widgets must be >= 1")
    if not 0.0 <= in_domain_fraction <= 1.0:
        raise ConfigError("in_domain_fraction must be in [0, 1]")
    if not 0.0 <= clean_fraction <= 1.0:
        raise ConfigError("clean_fraction must be in [0, 1]")

    rng = np.random.default_rng(np.random.SeedSequence((_SUITE_SEED_TAG, seed)))
    weights = np.array(_PRIMITIVE_WEIGHTS)

    def random_interaction() -> tuple[ActionKind, int]:
        kind = _PRIMITIVE_ORDER[int(rng.choice(len(_PRIMITIVE_ORDER), p=weights))]
        return kind, int(rng.integers(n_widgets))

    chain = [random_interaction() for _ in range(hi)]

    tasks: list[Task] = []
    n_in_domain = round(in_domain_fraction * total)
    for i in range(n_feasible):
        length = int(rng.integers(lo, hi + 1))
        goal = list(chain[:length])
        if rng.random() >= clean_fraction:
            n_corrupt = min(length, 1 + int(rng.integers(2)))
            positions = rng.choice(length, size=n_corrupt, replace=False)
            for pos in positions:
                goal[int(pos)] = random_interaction()
        tasks.append(
            Task(
                task_id=i,
                goal_spec=tuple(goal),
                max_steps=max_steps,
                feasible=True,
                domain_tag=DOMAIN_TAGS[0] if i < n_in_domain else DOMAIN_TAGS[1],
                n_widgets=n_widgets,
            )
        )
    for j in range(n_infeasible):
        task_id = n_feasible + j
        tasks.append(
            Task(
                task_id=task_id,
                goal_spec=(),
                max_steps=max_steps,
                feasible=False,
                domain_tag=DOMAIN_TAGS[0] if task_id < n_in_domain else DOMAIN_TAGS[1],
                n_widgets=n_widgets,
            )
        )
    for task in tasks:
        validate_task(task)
    return tasks


def save_task_suite(tasks: list[Task], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(json.dumps(task.to_dict(), sort_keys=True) + "\n")


def load_task_suite(path: str | Path) -> list[Task]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"task suite file not found: {path}")
    tasks = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            task = Task.from_dict(obj)
            try:
                validate_task(task)
            except ConfigError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            tasks.append(task)
    if not tasks:
        raise DataError(f"{path}: empty task suite")
    return tasks


def retag_tasks(tasks: list[Task], domain_tag: str) -> list[Task]:
    """Copy a task list with every task assigned the given domain tag."""
    if domain_tag not in DOMAIN_TAGS:
        raise ConfigError(f"unknown domain_tag {domain_tag!r}")
    return [replace(t, domain_tag=domain_tag) for t in tasks]
