"""Environment contract tests: schema parsing, transition rules, terminal
scoring (checked against brute-force enumeration), and suite generation."""

from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskrl.environment import (
    Action,
    ActionKind,
    ParseFailure,
    SyntheticDesktop,
    Task,
    VERB_TOKEN,
    VERB_VOCAB_SIZE,
    generate_task_suite,
    load_task_suite,
    no_arg_token,
    optimal_token_program,
    parse_action,
    save_task_suite,
    terminal_reward,
    validate_task,
)
from deskrl.errors import ConfigError, DataError, UsageError

from conftest import make_task

CLICK_L = VERB_TOKEN[ActionKind.CLICK_L]
TYPE_TEXT = VERB_TOKEN[ActionKind.TYPE_TEXT]
FINISH = VERB_TOKEN[ActionKind.FINISH]
FAIL = VERB_TOKEN[ActionKind.FAIL]
WAIT = VERB_TOKEN[ActionKind.WAIT]
CALL_USER = VERB_TOKEN[ActionKind.CALL_USER]


# --- reset -----------------------------------------------------------------

def test_reset_initial_observation_is_zero_state():
    task = make_task(goal=[(ActionKind.CLICK_L, 0)] * 3, n_widgets=3, max_steps=5)
    obs = SyntheticDesktop(task, seed=0).reset()
    assert obs.step_index == 0
    assert obs.widget_states == (0, 0, 0)
    assert obs.last_action_echo is None


def test_reset_infeasible_same_initial_state():
    task = make_task(feasible=False, n_widgets=3)
    obs = SyntheticDesktop(task, seed=0).reset()
    assert obs.step_index == 0
    assert obs.widget_states == (0, 0, 0)


def test_reset_is_deterministic():
    task = make_task()
    a = SyntheticDesktop(task, seed=11).reset()
    b = SyntheticDesktop(task, seed=11).reset()
    assert a == b


def test_malformed_task_rejected():
    bad = Task(task_id=0, goal_spec=((ActionKind.CLICK_L, 0),) * 7, max_steps=5, n_widgets=2)
    with pytest.raises(ConfigError):
        SyntheticDesktop(bad)
    with pytest.raises(ConfigError):
        validate_task(Task(task_id=1, goal_spec=((ActionKind.CLICK_L, 0),), feasible=False))
    with pytest.raises(ConfigError):
        validate_task(Task(task_id=2, goal_spec=((ActionKind.CLICK_L, 5),), n_widgets=2))


# --- parse_action ----------------------------------------------------------

def test_parse_primitive_with_argument():
    action = parse_action(CLICK_L, 3, n_widgets=4)
    assert action == Action(ActionKind.CLICK_L, 3)


def test_parse_meta_with_argument_fails():
    result = parse_action(FINISH, 3, n_widgets=4)
    assert isinstance(result, ParseFailure)


def test_parse_primitive_without_argument_fails():
    result = parse_action(TYPE_TEXT, no_arg_token(4), n_widgets=4)
    assert isinstance(result, ParseFailure)


def test_parse_out_of_vocab_is_usage_error():
    with pytest.raises(UsageError):
        parse_action(VERB_VOCAB_SIZE, 0, n_widgets=4)
    with pytest.raises(UsageError):
        parse_action(CLICK_L, 9, n_widgets=4)


# --- step ------------------------------------------------------------------

def test_step_executes_goal_action():
    task = make_task(goal=[(ActionKind.CLICK_L, 0), (ActionKind.SCROLL, 1)])
    env = SyntheticDesktop(task)
    obs, done = env.step(Action(ActionKind.CLICK_L, 0))
    assert not done
    assert obs.widget_states == (1, 0)
    assert env.goal_progress == 1


def test_finish_after_goal_terminates():
    task = make_task(goal=[(ActionKind.CLICK_L, 0)])
    env = SyntheticDesktop(task)
    env.step(Action(ActionKind.CLICK_L, 0))
    _, done = env.step(Action(ActionKind.FINISH))
    assert done and env.termination_cause == "finish"
    assert env.reward().total == 1.0


def test_step_cap_terminates():
    task = make_task(goal=[(ActionKind.CLICK_L, 0)], max_steps=15)
    env = SyntheticDesktop(task)
    for i in range(15):
        obs, done = env.step(Action(ActionKind.WAIT))
        assert done == (i == 14)
    assert env.termination_cause == "step_cap"


def test_step_after_terminal_is_usage_error():
    task = make_task(goal=[(ActionKind.CLICK_L, 0)], max_steps=2)
    env = SyntheticDesktop(task)
    env.step(Action(ActionKind.FAIL))
    with pytest.raises(UsageError):
        env.step(Action(ActionKind.WAIT))


def test_parse_failure_is_penalized_noop():
    task = make_task(goal=[(ActionKind.CLICK_L, 0)])
    env = SyntheticDesktop(task)
    before = env.observation().widget_states
    obs, done = env.step(ParseFailure(FINISH, 1, "meta action takes no argument"))
    assert obs.widget_states == before
    assert obs.step_index == 1
    assert env.parse_failure_count == 1
    assert not done


def test_call_user_terminates_with_zero_reward():
    task = make_task(goal=[(ActionKind.CLICK_L, 0)])
    env = SyntheticDesktop(task)
    _, done = env.step(Action(ActionKind.CALL_USER))
    assert done
    assert env.reward().trajectory_reward == 0.0


# --- terminal_reward -------------------------------------------------------

def test_reward_clean_success():
    task = make_task(goal=[(ActionKind.CLICK_L, 0), (ActionKind.SCROLL, 1)])
    env = SyntheticDesktop(task)
    env.step(Action(ActionKind.CLICK_L, 0))
    env.step(Action(ActionKind.SCROLL, 1))
    env.step(Action(ActionKind.FINISH))
    rb = terminal_reward(task, env)
    assert (rb.trajectory_reward, rb.format_penalty_total, rb.total) == (1.0, 0.0, 1.0)


def test_reward_infeasible_fail_is_success():
    task = make_task(feasible=False)
    env = SyntheticDesktop(task)
    env.step(Action(ActionKind.WAIT))
    env.step(Action(ActionKind.FAIL))
    rb = env.reward()
    assert (rb.trajectory_reward, rb.format_penalty_total, rb.total) == (1.0, 0.0, 1.0)


def test_reward_success_with_two_malformed_steps():
    task = make_task(goal=[(ActionKind.CLICK_L, 0), (ActionKind.SCROLL, 1)])
    env = SyntheticDesktop(task)
    # independent oracle: count the ParseFailure steps we deliberately play
    malformed = [
        parse_action(FINISH, 0, task.n_widgets),
        parse_action(TYPE_TEXT, no_arg_token(task.n_widgets), task.n_widgets),
    ]
    assert all(isinstance(m, ParseFailure) for m in malformed)
    env.step(malformed[0])
    env.step(Action(ActionKind.CLICK_L, 0))
    env.step(malformed[1])
    env.step(Action(ActionKind.SCROLL, 1))
    env.step(Action(ActionKind.FINISH))
    rb = env.reward()
    assert (rb.trajectory_reward, rb.format_penalty_total, rb.total) == (1.0, -2.0, -1.0)


def test_reward_on_live_episode_is_usage_error():
    task = make_task(goal=[(ActionKind.CLICK_L, 0)])
    env = SyntheticDesktop(task)
    with pytest.raises(UsageError):
        env.reward()


# --- brute-force soundness oracles ----------------------------------------

def _oracle_score(task: Task, pairs) -> tuple[float, int, bool]:
    """Independent reference: replay the token pairs with fresh logic and
    return (trajectory_reward, parse_failures, episode_used_all_pairs)."""
    kinds = list(ActionKind)
    meta = {ActionKind.WAIT, ActionKind.FINISH, ActionKind.FAIL, ActionKind.CALL_USER}
    progress = 0
    failures = 0
    cause = None
    steps = 0
    for verb, arg in pairs:
        kind = kinds[verb]
        has_arg = arg != task.n_widgets
        steps += 1
        if (kind in meta) == has_arg:
            failures += 1
        elif kind in meta:
            if kind is not ActionKind.WAIT:
                cause = kind
        else:
            if progress < len(task.goal_spec) and task.goal_spec[progress] == (kind, arg):
                progress += 1
        if cause is not None:
            break
        if steps >= task.max_steps:
            cause = "cap"
            break
    if task.feasible:
        reward = 1.0 if cause is ActionKind.FINISH and progress == len(task.goal_spec) else 0.0
    else:
        reward = 1.0 if cause is ActionKind.FAIL else 0.0
    return reward, failures, cause is not None


def _run_pairs(task: Task, pairs):
    env = SyntheticDesktop(task)
    for verb, arg in pairs:
        _, done = env.step(parse_action(verb, arg, task.n_widgets))
        if done:
            break
    return env


def test_reward_soundness_brute_force():
    """Enumerate every token-pair sequence on a tiny task: reward 1 occurs
    exactly when the independent oracle says the completion predicate held."""
    task = make_task(goal=[(ActionKind.CLICK_L, 0), (ActionKind.SCROLL, 0)], n_widgets=1, max_steps=3)
    vocab = list(itertools.product(range(VERB_VOCAB_SIZE), range(2)))
    n_success = 0
    for pairs in itertools.product(vocab, repeat=task.max_steps):
        env = _run_pairs(task, pairs)
        expected_reward, expected_failures, _ = _oracle_score(task, pairs)
        assert env.terminated
        rb = env.reward()
        assert rb.trajectory_reward == expected_reward
        assert rb.format_penalty_total == -float(expected_failures)
        n_success += int(rb.trajectory_reward == 1.0)
    assert n_success > 0  # the goal is reachable within the cap


def test_penalty_accounting_brute_force():
    task = make_task(goal=[(ActionKind.CLICK_L, 0)], n_widgets=1, max_steps=2)
    vocab = list(itertools.product(range(VERB_VOCAB_SIZE), range(2)))
    for pairs in itertools.product(vocab, repeat=task.max_steps):
        env = _run_pairs(task, pairs)
        played = pairs[: env.step_index]
        _, expected_failures, _ = _oracle_score(task, played)
        assert env.reward().format_penalty_total == -float(expected_failures)


def test_infeasible_only_fail_scores_brute_force():
    task = make_task(feasible=False, n_widgets=1, max_steps=3)
    vocab = list(itertools.product(range(VERB_VOCAB_SIZE), range(2)))
    for pairs in itertools.product(vocab, repeat=task.max_steps):
        env = _run_pairs(task, pairs)
        if env.reward().trajectory_reward == 1.0:
            assert env.termination_cause == "fail"
        if env.termination_cause == "fail":
            assert env.reward().trajectory_reward == 1.0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, VERB_VOCAB_SIZE - 1), st.integers(0, 2)),
        min_size=1,
        max_size=12,
    )
)
def test_penalty_accounting_property(pairs):
    task = make_task(goal=[(ActionKind.CLICK_R, 1), (ActionKind.HOTKEY, 0)], n_widgets=2, max_steps=12)
    env = _run_pairs(task, pairs)
    played = pairs[: env.step_index]
    oracle_failures = sum(
        1 for verb, arg in played if isinstance(parse_action(verb, arg, 2), ParseFailure)
    )
    assert env.parse_failure_count == oracle_failures
    if env.terminated:
        assert env.reward().format_penalty_total == -float(oracle_failures)


def test_full_transcript_determinism():
    task = make_task(goal=[(ActionKind.CLICK_L, 0), (ActionKind.TYPE_TEXT, 1)], max_steps=10)
    rng = np.random.default_rng(5)
    pairs = [(int(rng.integers(VERB_VOCAB_SIZE)), int(rng.integers(3))) for _ in range(10)]

    def transcript():
        env = SyntheticDesktop(task, seed=3)
        obs_list = [env.reset()]
        for verb, arg in pairs:
            obs, done = env.step(parse_action(verb, arg, task.n_widgets))
            obs_list.append(obs)
            if done:
                break
        return obs_list, env.reward()

    assert transcript() == transcript()


def test_optimal_program_solves_task():
    task = make_task(goal=[(ActionKind.CLICK_L, 0), (ActionKind.SCROLL, 1), (ActionKind.HOTKEY, 0)], max_steps=8)
    env = _run_pairs(task, optimal_token_program(task))
    assert env.reward().total == 1.0
    infeasible = make_task(feasible=False)
    env = _run_pairs(infeasible, optimal_token_program(infeasible))
    assert env.reward().total == 1.0


# --- suite generation and serialization ------------------------------------

def test_generate_suite_counts_and_reproducibility():
    suite = generate_task_suite(7, 32, 4, (2, 6))
    assert len(suite) == 36
    assert sum(t.feasible for t in suite) == 32
    again = generate_task_suite(7, 32, 4, (2, 6))
    assert [t.to_dict() for t in suite] == [t.to_dict() for t in again]
    for task in suite:
        if task.feasible:
            assert 2 <= len(task.goal_spec) <= 6


def test_generate_suite_seed_changes_goals():
    a = generate_task_suite(7, 32, 4, (2, 6))
    b = generate_task_suite(8, 32, 4, (2, 6))
    assert [t.to_dict() for t in a] != [t.to_dict() for t in b]


def test_generate_suite_domain_split():
    suite = generate_task_suite(3, 128, 0, (2, 6), in_domain_fraction=0.25)
    tags = [t.domain_tag for t in suite]
    assert tags.count("in_domain") == 32
    assert all(tag == "in_domain" for tag in tags[:32])


def test_generate_empty_suite_rejected():
    with pytest.raises(ConfigError):
        generate_task_suite(0, 0, 0, (2, 6))
    with pytest.raises(ConfigError):
        generate_task_suite(0, -1, 2, (2, 6))


def test_suite_roundtrip(tmp_path):
    suite = generate_task_suite(1, 6, 2, (1, 4))
    path = tmp_path / "tasks.jsonl"
    save_task_suite(suite, path)
    loaded = load_task_suite(path)
    assert [t.to_dict() for t in loaded] == [t.to_dict() for t in suite]


def test_suite_load_rejects_corrupt_line(tmp_path):
    path = tmp_path / "tasks.jsonl"
    path.write_text('{"task_id": 0, "nope": 1}\n', encoding="utf-8")
    with pytest.raises(DataError):
        load_task_suite(path)
    path.write_text("not json\n", encoding="utf-8")
    with pytest.raises(DataError, match=":1:"):
        load_task_suite(path)
    with pytest.raises(DataError):
        load_task_suite(tmp_path / "missing.jsonl")
