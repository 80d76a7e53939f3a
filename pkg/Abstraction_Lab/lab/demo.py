"""Scripted demonstrators and the (s, a, r, s', task) datasets they produce."""
import json
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from django.db import models

from . import envs
from .exceptions import DatasetFormatError, DimensionMismatch, EmptyDatasetError

logger = logging.getLogger(__name__)

# Weight on the angular velocity in the bang-bang balance rule. 0.5 keeps the
# pole up for a full 200-step episode from nearly every reset.
CART_POLE_GAIN = 0.5


class Sampler(models.TextChoices):
    UNIFORM = "UniformState", "Uniform over the state box"
    ON_POLICY = "OnPolicy", "Expert rollouts from reset"


class Quadruple(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    task_id: int


@dataclass
class Dataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    task_ids: np.ndarray
    num_tasks: int
    env_kind: str

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_tasks == other.num_tasks
            and self.env_kind == other.env_kind
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("states", "actions", "rewards", "next_states", "task_ids")
            )
        )

    @property
    def state_dim(self):
        return self.states.shape[1]

    def quadruples(self):
        for j in range(len(self)):
            yield Quadruple(
                self.states[j],
                int(self.actions[j]),
                float(self.rewards[j]),
                self.next_states[j],
                int(self.task_ids[j]),
            )

    def subset(self, n):
        """First ``n`` quadruples, keeping the task count."""
        return Dataset(
            self.states[:n],
            self.actions[:n],
            self.rewards[:n],
            self.next_states[:n],
            self.task_ids[:n],
            self.num_tasks,
            self.env_kind,
        )

    @classmethod
    def from_quadruples(cls, quadruples, num_tasks, env_kind, dim):
        quadruples = list(quadruples)
        return cls(
            states=np.array([q.state for q in quadruples], dtype=float).reshape(-1, dim),
            actions=np.array([q.action for q in quadruples], dtype=int),
            rewards=np.array([q.reward for q in quadruples], dtype=float),
            next_states=np.array([q.next_state for q in quadruples], dtype=float).reshape(-1, dim),
            task_ids=np.array([q.task_id for q in quadruples], dtype=int),
            num_tasks=num_tasks,
            env_kind=env_kind,
        )


def _toward(gap, axis):
    if axis == 0:
        return envs.RIGHT if gap[0] > 0 else envs.LEFT
    return envs.UP if gap[1] > 0 else envs.DOWN


def _perpendicular(axis):
    return (envs.UP, envs.DOWN) if axis == 0 else (envs.RIGHT, envs.LEFT)


def expert_action(task, s):
    if task.is_puddle:
        s = np.asarray(s, dtype=float)
        gap = task.goal - s
        primary = 0 if abs(gap[0]) >= abs(gap[1]) else 1
        candidates = [_toward(gap, primary)]
        if gap[1 - primary] != 0:
            candidates.append(_toward(gap, 1 - primary))
        candidates += [a for a in _perpendicular(primary) if a not in candidates]
        for a in candidates:
            nxt = envs.puddle_move(s, a)
            # A move blocked by the wall is no sidestep.
            if not envs.in_puddle(task, nxt) and not np.array_equal(nxt, s):
                return a
        # Every move is wet: keep heading for the goal.
        return candidates[0]

    _, _, theta, theta_dot = s
    return envs.PUSH_RIGHT if theta + CART_POLE_GAIN * theta_dot > 0 else envs.PUSH_LEFT


def expert_distribution(task):
    """pi*(.|s) of the scripted expert, a point mass on its action."""
    n_actions = envs.num_actions(task)

    def policy(s):
        dist = np.zeros(n_actions)
        dist[expert_action(task, s)] = 1.0
        return dist

    return policy


def _uniform_quadruples(task, task_id, n, rng):
    low, high = envs.state_box(task)
    for s in rng.uniform(low, high, size=(n, len(low))):
        a = expert_action(task, s)
        tr = envs.step(task, s, a, rng)
        yield Quadruple(s, a, tr.reward, tr.next_state, task_id)


def _on_policy_quadruples(task, task_id, n, rng):
    s, t = envs.reset(task, rng), 0
    for _ in range(n):
        a = expert_action(task, s)
        tr = envs.step(task, s, a, rng, t)
        yield Quadruple(s, a, tr.reward, tr.next_state, task_id)
        if tr.terminal or t + 1 >= task.horizon:
            s, t = envs.reset(task, rng), 0
        else:
            s, t = tr.next_state, t + 1


def collect_dataset(tasks, n_per_task, sampler=Sampler.UNIFORM, rng=None):
    if not tasks:
        raise ValueError("At least one task is needed to collect a dataset.")
    if n_per_task < 1:
        raise ValueError("n_per_task must be at least 1.")
    kinds = {task.env_kind for task in tasks}
    if len(kinds) != 1:
        raise ValueError(f"All tasks must share one environment kind, got {sorted(kinds)}.")
    rng = rng if rng is not None else np.random.default_rng()

    generate = _uniform_quadruples if sampler == Sampler.UNIFORM else _on_policy_quadruples
    quadruples = []
    for task_id, task in enumerate(tasks):
        quadruples.extend(generate(task, task_id, n_per_task, rng))
    logger.info(
        "Collected %d quadruples from %d %s task(s) with %s sampling",
        len(quadruples), len(tasks), tasks[0].env_kind, sampler,
    )
    return Dataset.from_quadruples(quadruples, len(tasks), tasks[0].env_kind, envs.state_dim(tasks[0]))


def save_dataset(dataset, path):
    with open(path, "w") as fh:
        header = {"env": dataset.env_kind, "k": dataset.num_tasks, "dim": dataset.state_dim}
        fh.write(json.dumps(header) + "\n")
        for q in dataset.quadruples():
            record = {
                "s": q.state.tolist(),
                "a": q.action,
                "r": q.reward,
                "sp": q.next_state.tolist(),
                "task": q.task_id,
            }
            fh.write(json.dumps(record) + "\n")


def _parse_line(line, line_number):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(line_number, f"not valid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise DatasetFormatError(line_number, "expected a JSON object")
    return obj


def load_dataset(path, expected_dim=None):
    with open(path) as fh:
        lines = [(i, line) for i, line in enumerate(fh, start=1) if line.strip()]
    if not lines:
        raise EmptyDatasetError(f"{path} is empty.")

    number, first = lines[0]
    header = _parse_line(first, number)
    try:
        env_kind, num_tasks, dim = header["env"], int(header["k"]), int(header["dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(number, f"header needs env, k and dim ({exc})") from exc
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatch(f"{path} holds {dim}-dimensional states, expected {expected_dim}.")

    quadruples = []
    for number, line in lines[1:]:
        obj = _parse_line(line, number)
        try:
            s, sp = obj["s"], obj["sp"]
            q = Quadruple(
                np.array(s, dtype=float), int(obj["a"]), float(obj["r"]),
                np.array(sp, dtype=float), int(obj["task"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(number, f"bad quadruple ({exc})") from exc
        if q.state.shape != (dim,) or q.next_state.shape != (dim,):
            raise DimensionMismatch(f"line {number}: state dimension differs from header dim {dim}.")
        if not 0 <= q.task_id < num_tasks:
            raise DatasetFormatError(number, f"task id {q.task_id} outside [0, {num_tasks})")
        quadruples.append(q)

    if not quadruples:
        raise EmptyDatasetError(f"{path} has a header but no quadruples.")
    return Dataset.from_quadruples(quadruples, num_tasks, env_kind, dim)
