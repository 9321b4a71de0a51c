"""Per-task replay of successful trajectories.

Only task successes (trajectory_reward == 1) are stored, in bounded FIFO
queues per task. When a freshly collected group contains no success at all,
one uniformly chosen slot is replaced by a uniformly chosen buffered
trajectory for that task, restoring reward variance so the group's
advantages do not vanish. Injected copies keep their original behavior
log-probs and version and are never re-inserted.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import replace

import numpy as np

from .errors import ConfigError, DataError, UsageError
from .grpo import PHASE_COLLECTED, PHASE_INJECTED, RolloutGroup
from .policy import ORIGIN_REPLAYED, Trajectory

_FORMAT_VERSION = 1


class ReplayBuffer:
    def __init__(self, capacity_per_task: int = 4):
        if capacity_per_task < 0:
            raise ConfigError("capacity_per_task must be >= 0")
        self.capacity_per_task = capacity_per_task
        self._queues: dict[int, deque] = {}
        self._next_seq = 0
        self.insertion_count = 0
        self.eviction_count = 0
        self.injection_count = 0

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def size_for(self, task_id: int) -> int:
        return len(self._queues.get(task_id, ()))

    def entries(self, task_id: int) -> list[Trajectory]:
        """FIFO-ordered stored trajectories for one task (oldest first)."""
        return [traj for _, traj in self._queues.get(task_id, ())]

    def insert(self, task_id: int, trajectory: Trajectory) -> bool:
        """Store a terminal trajectory iff it is a fresh task success.

        Failures and replayed copies are silently ignored. At capacity the
        oldest entry is evicted first. Returns True iff stored.
        """
        if trajectory.reward.trajectory_reward != 1.0:
            return False
        if trajectory.origin == ORIGIN_REPLAYED:
            return False
        if self.capacity_per_task == 0:
            return False
        queue = self._queues.setdefault(task_id, deque())
        if len(queue) >= self.capacity_per_task:
            queue.popleft()
            self.eviction_count += 1
        queue.append((self._next_seq, trajectory))
        self._next_seq += 1
        self.insertion_count += 1
        return True

    def maybe_inject(self, group: RolloutGroup, rng: np.random.Generator) -> RolloutGroup:
        """Replace one slot of an all-fail group with a buffered success.

        Triggers only when every trajectory in the group has
        trajectory_reward == 0 (format penalties are ignored by the trigger)
        and the buffer holds an entry for this task. The rng is consumed only
        when an injection actually happens, so a no-op call leaves rng state
        untouched. Must run before advantages are computed.
        """
        if group.phase != PHASE_COLLECTED or group.advantages is not None:
            raise UsageError("maybe_inject must run before advantage computation and at most once")
        if any(t.reward.trajectory_reward != 0.0 for t in group.trajectories):
            return group
        queue = self._queues.get(group.task_id)
        if not queue:
            return group
        slot = int(rng.integers(len(group.trajectories)))
        pick = int(rng.integers(len(queue)))
        injected = replace(queue[pick][1], origin=ORIGIN_REPLAYED)
        group.trajectories[slot] = injected
        group.rewards[slot] = injected.reward.total
        group.injected_slot = slot
        group.phase = PHASE_INJECTED
        self.injection_count += 1
        return group

    def counters(self) -> dict[str, int]:
        return {
            "insertion_count": self.insertion_count,
            "eviction_count": self.eviction_count,
            "injection_count": self.injection_count,
        }

    def to_jsonable(self) -> dict:
        return {
            "format_version": _FORMAT_VERSION,
            "capacity_per_task": self.capacity_per_task,
            "next_seq": self._next_seq,
            "counters": self.counters(),
            "queues": {
                str(task_id): [{"seq": seq, "trajectory": traj.to_dict()} for seq, traj in queue]
                for task_id, queue in self._queues.items()
            },
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "ReplayBuffer":
        try:
            version = obj["format_version"]
            if version != _FORMAT_VERSION:
                raise DataError(f"unsupported replay buffer format version {version}")
            buf = cls(capacity_per_task=int(obj["capacity_per_task"]))
            buf._next_seq = int(obj["next_seq"])
            counters = obj["counters"]
            buf.insertion_count = int(counters["insertion_count"])
            buf.eviction_count = int(counters["eviction_count"])
            buf.injection_count = int(counters["injection_count"])
            for task_key, entries in obj["queues"].items():
                queue = deque()
                for entry in entries:
                    traj = Trajectory.from_dict(entry["trajectory"])
                    if traj.reward.trajectory_reward != 1.0:
                        raise DataError(f"task {task_key}: stored trajectory is not a success")
                    queue.append((int(entry["seq"]), traj))
                if len(queue) > buf.capacity_per_task:
                    raise DataError(f"task {task_key}: queue exceeds capacity")
                buf._queues[int(task_key)] = queue
            return buf
        except DataError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed replay buffer payload: {exc}") from exc

    def serialize(self) -> bytes:
        return json.dumps(self.to_jsonable(), sort_keys=True).encode("utf-8")

    @classmethod
    def restore(cls, data: bytes) -> "ReplayBuffer":
        """Inverse of serialize; raises DataError with position diagnostics
        on corrupt input and never returns a partially built buffer."""
        try:
            obj = json.loads(data.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise DataError(f"replay buffer bytes are not UTF-8 at offset {exc.start}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(
                f"replay buffer JSON invalid at position {exc.pos} (line {exc.lineno}, column {exc.colno}): {exc.msg}"
            ) from exc
        if not isinstance(obj, dict):
            raise DataError("replay buffer payload must be a JSON object")
        return cls.from_jsonable(obj)
