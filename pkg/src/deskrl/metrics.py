"""Append-only per-step metrics CSV plus figure-analog exports.

Every value written here is deterministic given (config, seeds); wall-clock
timings go to the run log instead so re-running a seed reproduces the CSV
byte for byte.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError, UsageError

METRICS_COLUMNS = (
    "step",
    "epoch",
    "mean_group_reward",
    "mean_format_penalty",
    "mean_group_sigma",
    "all_fail_fraction",
    "injection_count",
    "replay_insertions",
    "replay_evictions",
    "loss",
    "eval_success_in_domain",
    "eval_success_out_of_domain",
    "virtual_time_ms",
)


@dataclass(frozen=True)
class MetricsRow:
    step: int
    epoch: int
    mean_group_reward: float | None
    mean_format_penalty: float | None
    mean_group_sigma: float | None
    all_fail_fraction: float | None
    injection_count: int
    replay_insertions: int
    replay_evictions: int
    loss: float
    eval_success_in_domain: float | None
    eval_success_out_of_domain: float | None
    virtual_time_ms: float | None

    def as_csv_values(self) -> list[str]:
        def fmt(value) -> str:
            if value is None:
                return ""
            if isinstance(value, float):
                return repr(float(value))
            return str(value)

        return [fmt(getattr(self, col)) for col in METRICS_COLUMNS]


class MetricsWriter:
    """Writes the header on creation and one flushed row per append."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerow(METRICS_COLUMNS)

    def append(self, row: MetricsRow) -> None:
        with self.path.open("a", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerow(row.as_csv_values())


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"metrics file not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_COLUMNS:
            raise DataError(f"{path}: unexpected metrics header {header}")
        return [dict(zip(header, row)) for row in reader]


def export_metrics(run_dir: str | Path) -> list[Path]:
    """Derive one CSV per figure analog from a run directory.

    Always writes the reward-curve, reward-sigma and generalization files
    (header-only for a fresh run); the throughput file is produced only when
    the run contains bench output.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    rows = read_metrics(run_dir / "metrics.csv")
    written = []

    def write(name: str, header: list[str], data: list[list[str]]) -> None:
        path = run_dir / name
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(data)
        written.append(path)

    write(
        "fig_reward_curve.csv",
        ["step", "mean_group_reward"],
        [[r["step"], r["mean_group_reward"]] for r in rows if r["mean_group_reward"] != ""],
    )
    write(
        "fig_reward_sigma.csv",
        ["step", "mean_group_sigma"],
        [[r["step"], r["mean_group_sigma"]] for r in rows if r["mean_group_sigma"] != ""],
    )
    seen = []
    for r in rows:
        pair = (r["epoch"], r["eval_success_in_domain"], r["eval_success_out_of_domain"])
        if r["eval_success_in_domain"] == "" and r["eval_success_out_of_domain"] == "":
            continue
        if not seen or seen[-1][1:] != pair[1:]:
            seen.append(pair)
    write(
        "fig_generalization.csv",
        ["epoch", "eval_success_in_domain", "eval_success_out_of_domain"],
        [list(p) for p in seen],
    )

    bench = run_dir / "bench.csv"
    if bench.exists():
        with bench.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            data = [row for row in reader]
        if header:
            write("fig_throughput.csv", header, data)
    return written
