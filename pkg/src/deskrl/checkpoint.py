"""Single-file training checkpoints.

One .npz per epoch holds the parameter arrays, both Adam moment sets and a
JSON metadata blob (epoch, versions, config echo, serialized replay buffer,
last evaluation results). Randomness in the trainer is derived statelessly
from (config seed, epoch), so the seed plus the epoch index recorded here is
the complete rng state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .grpo import AdamMoments
from .policy import ARRAY_FIELDS, PolicyParams
from .replay import ReplayBuffer

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class CheckpointState:
    params: PolicyParams
    moments: AdamMoments
    replay: ReplayBuffer | None
    epoch: int
    config: dict
    latest_eval: dict | None


def save_checkpoint(
    path: str | Path,
    *,
    params: PolicyParams,
    moments: AdamMoments,
    replay: ReplayBuffer | None,
    epoch: int,
    config: dict,
    latest_eval: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": epoch,
        "parameter_version": params.parameter_version,
        "adam_step_count": moments.step_count,
        "config": config,
        "replay": replay.to_jsonable() if replay is not None else None,
        "latest_eval": latest_eval,
    }
    arrays = {}
    for name, arr in params.arrays().items():
        arrays[f"param_{name}"] = arr
        arrays[f"adam_m_{name}"] = moments.m[name]
        arrays[f"adam_v_{name}"] = moments.v[name]
    np.savez(path, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path: str | Path) -> CheckpointState:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as payload:
            meta = json.loads(bytes(payload["meta"]).decode("utf-8"))
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise DataError(f"unsupported checkpoint format version {meta.get('format_version')}")
            param_arrays = {name: payload[f"param_{name}"].copy() for name in ARRAY_FIELDS}
            m = {name: payload[f"adam_m_{name}"].copy() for name in ARRAY_FIELDS}
            v = {name: payload[f"adam_v_{name}"].copy() for name in ARRAY_FIELDS}
    except DataError:
        raise
    except (KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    params = PolicyParams(**param_arrays, parameter_version=int(meta["parameter_version"]))
    moments = AdamMoments(m=m, v=v, step_count=int(meta["adam_step_count"]))
    replay = ReplayBuffer.from_jsonable(meta["replay"]) if meta.get("replay") is not None else None
    return CheckpointState(
        params=params,
        moments=moments,
        replay=replay,
        epoch=int(meta["epoch"]),
        config=meta.get("config", {}),
        latest_eval=meta.get("latest_eval"),
    )
