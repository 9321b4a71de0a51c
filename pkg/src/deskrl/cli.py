"""Command-line entry point.

Subcommands: gen-tasks, select-tasks, train, eval, bench-rollout,
export-metrics. Training configuration comes from a JSON file whose keys are
the TrainConfig fields; any field can also be overridden with a
--<field-name> flag. DESKRL_RUN_DIR overrides the run directory (and only
that).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .environment import generate_task_suite, load_task_suite, save_task_suite
from .errors import ConfigError, DeskRLError
from .metrics import export_metrics
from .policy import NeuralPolicy, init_params
from .rollout import run_epoch
from .selection import save_probe_reports, select_tasks
from .trainer import (
    EVAL_PROTOCOLS,
    TrainConfig,
    evaluate_protocols,
    reject_sampling_sft,
    train,
)

RUN_DIR_ENV = "DESKRL_RUN_DIR"


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    types = {int: int, float: float, str: str, bool: _parse_bool}
    for f in fields(TrainConfig):
        py_type = {"int": int, "float": float, "str": str, "bool": bool}[f.type] if isinstance(f.type, str) else f.type
        parser.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f"cfg_{f.name}",
            type=types[py_type],
            default=None,
            help=f"override config key {f.name} (default {f.default})",
        )


def _build_config(args: argparse.Namespace) -> TrainConfig:
    values: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        values.update(loaded)
    for f in fields(TrainConfig):
        override = getattr(args, f"cfg_{f.name}", None)
        if override is not None:
            values[f.name] = override
    return TrainConfig.from_dict(values)


def _resolve_run_dir(args: argparse.Namespace) -> Path:
    env_dir = os.environ.get(RUN_DIR_ENV)
    if env_dir:
        return Path(env_dir)
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    raise ConfigError(f"no run directory: pass --run-dir or set {RUN_DIR_ENV}")


def _policy_from_args(args: argparse.Namespace, tasks) -> NeuralPolicy:
    if getattr(args, "checkpoint", None):
        return NeuralPolicy(load_checkpoint(args.checkpoint).params)
    cfg = _build_config(args)
    params = init_params(
        cfg.seed,
        tasks[0].n_widgets,
        max_steps=cfg.max_steps,
        embed_dim=cfg.embed_dim,
        hidden_dim=cfg.hidden_dim,
    )
    return NeuralPolicy(params)


def _cmd_gen_tasks(args: argparse.Namespace) -> int:
    tasks = generate_task_suite(
        seed=args.seed,
        n_feasible=args.n_feasible,
        n_infeasible=args.n_infeasible,
        difficulty_range=(args.min_goal_len, args.max_goal_len),
        n_widgets=args.n_widgets,
        max_steps=args.max_steps,
        in_domain_fraction=args.in_domain_fraction,
        clean_fraction=args.clean_fraction,
    )
    save_task_suite(tasks, args.out)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def _cmd_select_tasks(args: argparse.Namespace) -> int:
    tasks = load_task_suite(args.tasks)
    policy = _policy_from_args(args, tasks)
    cfg = _build_config(args)
    selected, reports = select_tasks(
        tasks,
        policy,
        n_rollouts=args.n_rollouts,
        keep_threshold=args.keep_threshold,
        temperature=cfg.rollout_temperature,
        seed=cfg.seed,
    )
    save_task_suite(selected, args.out) if selected else Path(args.out).write_text("", encoding="utf-8")
    if args.reports:
        save_probe_reports(reports, args.reports)
    print(f"kept {len(selected)}/{len(tasks)} tasks -> {args.out}")
    if not selected:
        print("warning: selection is empty; the trainer will refuse this set", file=sys.stderr)
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _build_config(args)
    tasks = load_task_suite(args.tasks)
    eval_tasks = load_task_suite(args.eval_tasks) if args.eval_tasks else None
    run_dir = _resolve_run_dir(args)
    if config.algorithm == "reject_sft":
        result = reject_sampling_sft(config, tasks, run_dir)
    else:
        result = train(config, tasks, run_dir, eval_tasks=eval_tasks, resume_from=args.resume)
    print(f"finished {result.total_steps} optimizer steps; metrics at {result.metrics_path}")
    if result.latest_eval:
        print(f"latest eval: {json.dumps(result.latest_eval, sort_keys=True)}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    tasks = load_task_suite(args.tasks)
    policy = _policy_from_args(args, tasks)
    protocols = EVAL_PROTOCOLS if args.protocol == "both" else (args.protocol,)
    reports = evaluate_protocols(
        policy,
        tasks,
        protocols=protocols,
        n_episodes_per_task=args.episodes,
        eval_temperature=args.temperature,
        seed=args.eval_seed,
    )
    payload = {name: report.to_dict() for name, report in reports.items()}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, report in reports.items():
        print(f"{name}: success_rate={report.success_rate:.4f} by_tag={report.by_tag}")
    return 0


def _cmd_bench_rollout(args: argparse.Namespace) -> int:
    tasks = load_task_suite(args.tasks)
    config = _build_config(args)
    policy = _policy_from_args(args, tasks)
    env_counts = [int(x) for x in args.env_counts.split(",") if x.strip()]
    if not env_counts:
        raise ConfigError("--env-counts needs at least one value")
    rows = []
    for n_envs in env_counts:
        rollout_cfg = config.rollout_config()
        rollout_cfg = type(rollout_cfg)(
            n_envs=n_envs,
            group_size=rollout_cfg.group_size,
            max_steps=rollout_cfg.max_steps,
            rollout_temperature=rollout_cfg.rollout_temperature,
            latency=rollout_cfg.latency,
        )
        _, report = run_epoch(tasks, policy, rollout_cfg, config.seed)
        rows.append(
            [
                n_envs,
                repr(report.per_batch_vtime),
                repr(report.per_epoch_vtime),
                report.n_inference_batches,
                repr(report.mean_batch_occupancy),
            ]
        )
        print(
            f"n_envs={n_envs}: per_batch={report.per_batch_vtime:.1f}ms "
            f"per_epoch={report.per_epoch_vtime:.1f}ms occupancy={report.mean_batch_occupancy:.1f}"
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_envs", "per_batch_vtime", "per_epoch_vtime", "n_inference_batches", "mean_batch_occupancy"])
        writer.writerows(rows)
    print(f"wrote {out}")
    return 0


def _cmd_export_metrics(args: argparse.Namespace) -> int:
    run_dir = _resolve_run_dir(args)
    written = export_metrics(run_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskrl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"deskrl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="generate a deterministic task suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-feasible", type=int, default=32)
    p.add_argument("--n-infeasible", type=int, default=0)
    p.add_argument("--min-goal-len", type=int, default=2)
    p.add_argument("--max-goal-len", type=int, default=6)
    p.add_argument("--n-widgets", type=int, default=4)
    p.add_argument("--max-steps", type=int, default=15)
    p.add_argument("--in-domain-fraction", type=float, default=0.25)
    p.add_argument("--clean-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_tasks)

    p = sub.add_parser("select-tasks", help="probe tasks with the baseline and keep solvable ones")
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reports", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--n-rollouts", type=int, default=16)
    p.add_argument("--keep-threshold", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_select_tasks)

    p = sub.add_parser("train", help="run grpo/arpo training or the reject-sampling baseline")
    p.add_argument("--tasks", required=True)
    p.add_argument("--eval-tasks", default=None)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--config", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy on a task suite")
    p.add_argument("--tasks", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--protocol", choices=list(EVAL_PROTOCOLS) + ["both"], default="both")
    p.add_argument("--episodes", type=int, default=8)
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench-rollout", help="measure virtual-clock throughput across env counts")
    p.add_argument("--tasks", required=True)
    p.add_argument("--env-counts", default="8,64,256", help="comma-separated n_envs values to sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_bench_rollout)

    p = sub.add_parser("export-metrics", help="derive figure-analog CSVs from a run directory")
    p.add_argument("--run-dir", default=None)
    p.set_defaults(func=_cmd_export_metrics)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DeskRLError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
