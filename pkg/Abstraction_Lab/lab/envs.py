"""Continuous-state environments: Puddle World and Cart Pole.

Environments are plain values. Every function takes the task description and
the caller's seeded ``numpy.random.Generator``; nothing here keeps state
between calls, so any number of runs can share the module.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError
from django.db import models

from .exceptions import DimensionMismatch

logger = logging.getLogger(__name__)


class EnvKind(models.TextChoices):
    PUDDLE = "PuddleWorld", "Puddle World"
    CART_POLE = "CartPole", "Cart Pole"


class GoalCorner(models.TextChoices):
    BL = "BL", "Bottom left"
    BR = "BR", "Bottom right"
    TL = "TL", "Top left"
    TR = "TR", "Top right"


GOAL_LOCATIONS = {
    GoalCorner.BL: (0.0, 0.0),
    GoalCorner.BR: (1.0, 0.0),
    GoalCorner.TL: (0.0, 1.0),
    GoalCorner.TR: (1.0, 1.0),
}

# Puddle World
PUDDLE_START = (0.25, 0.6)
PUDDLE_STEP = 0.05
GOAL_RADIUS_SQ = 0.0025
DEFAULT_PUDDLES = ((0.10, 0.60, 0.45, 0.80), (0.40, 0.10, 0.60, 0.50))
UP, DOWN, LEFT, RIGHT = range(4)
PUDDLE_ACTIONS = {
    UP: (0.0, PUDDLE_STEP),
    DOWN: (0.0, -PUDDLE_STEP),
    LEFT: (-PUDDLE_STEP, 0.0),
    RIGHT: (PUDDLE_STEP, 0.0),
}

# Cart Pole
PUSH_LEFT, PUSH_RIGHT = range(2)
CART_MASS = 1.0
POLE_MASS = 0.1
HALF_POLE_LENGTH = 0.5
FORCE_MAG = 10.0
TAU = 0.02
X_LIMIT = 2.4
ANGLE_LIMIT = math.pi / 9
CART_POLE_RESET = 0.05
BASE_GRAVITY = 9.8
TRANSFER_GRAVITIES = (5.0, 6.0, 8.0, 12.0)

GAMMA = 0.99


@dataclass(frozen=True)
class EnvBounds:
    rmax: float
    gamma: float = GAMMA


@dataclass(frozen=True)
class Transition:
    next_state: np.ndarray
    reward: float
    terminal: bool
    success: bool = False


@dataclass(frozen=True)
class TaskConfig:
    env_kind: str = EnvKind.PUDDLE
    goal_corner: str = GoalCorner.TR
    gravity: float = BASE_GRAVITY
    noise_std: float = 0.01
    puddle_rects: tuple = field(default=DEFAULT_PUDDLES)
    horizon: int = 500

    def __post_init__(self):
        # Normalise list input so configs hash and compare by value.
        rects = tuple(tuple(float(v) for v in rect) for rect in self.puddle_rects)
        object.__setattr__(self, "puddle_rects", rects)

    def validate(self):
        errors = {}
        if self.env_kind not in EnvKind.values:
            errors["env_kind"] = f"Unknown environment kind: {self.env_kind!r}"
        if self.goal_corner not in GoalCorner.values:
            errors["goal_corner"] = f"Unknown goal corner: {self.goal_corner!r}"
        if not self.gravity > 0:
            errors["gravity"] = "Gravity must be positive."
        if not self.noise_std >= 0:
            errors["noise_std"] = "Noise standard deviation must be non-negative."
        if self.horizon < 1:
            errors["horizon"] = "Horizon must be at least one step."
        for rect in self.puddle_rects:
            if len(rect) != 4:
                errors["puddle_rects"] = "Each puddle needs exactly x0,y0,x1,y1."
                break
            x0, y0, x1, y1 = rect
            if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
                errors["puddle_rects"] = f"Puddle {rect} must lie within the unit square."
                break
        if errors:
            raise ValidationError(errors)
        return self

    @property
    def is_puddle(self):
        return self.env_kind == EnvKind.PUDDLE

    @property
    def goal(self):
        return np.array(GOAL_LOCATIONS[GoalCorner(self.goal_corner)])


def puddle_task(goal_corner=GoalCorner.TR, **overrides):
    return TaskConfig(env_kind=EnvKind.PUDDLE, goal_corner=goal_corner, **overrides)


def cart_pole_task(gravity=BASE_GRAVITY, **overrides):
    overrides.setdefault("horizon", 200)
    overrides.setdefault("noise_std", 0.0)
    return TaskConfig(env_kind=EnvKind.CART_POLE, gravity=gravity, **overrides)


def state_dim(task):
    return 2 if task.is_puddle else 4


def num_actions(task):
    return 4 if task.is_puddle else 2


def env_bounds(task, gamma=GAMMA):
    return EnvBounds(rmax=1.0 if task.is_puddle else 10.0, gamma=gamma)


def state_box(task):
    """Axis-aligned box states are drawn from when sampling uniformly."""
    if task.is_puddle:
        return np.zeros(2), np.ones(2)
    high = np.array([X_LIMIT, 3.0, ANGLE_LIMIT, 3.5])
    return -high, high


def check_state(task, s):
    s = np.asarray(s, dtype=float)
    if s.shape != (state_dim(task),):
        raise DimensionMismatch(
            f"{task.env_kind} states have dimension {state_dim(task)}, got shape {s.shape}"
        )
    return s


def reset(task, rng):
    if task.is_puddle:
        return np.array(PUDDLE_START)
    return rng.uniform(-CART_POLE_RESET, CART_POLE_RESET, size=4)


def in_puddle(task, s):
    x, y = s
    return any(x0 <= x <= x1 and y0 <= y <= y1 for x0, y0, x1, y1 in task.puddle_rects)


def is_goal(task, s):
    if not task.is_puddle:
        raise ValueError("Only Puddle World tasks have a goal region.")
    # The tolerance absorbs rounding in coordinates built from repeated 0.05 moves.
    return float(np.sum((np.asarray(s) - task.goal) ** 2)) <= GOAL_RADIUS_SQ + 1e-12


def puddle_move(s, a):
    dx, dy = PUDDLE_ACTIONS[a]
    return np.clip(np.asarray(s, dtype=float) + (dx, dy), 0.0, 1.0)


def cartpole_accelerations(gravity, s, force):
    """Closed-form cart and pole accelerations of the classic cart-pole."""
    _, _, theta, theta_dot = s
    total_mass = CART_MASS + POLE_MASS
    polemass_length = POLE_MASS * HALF_POLE_LENGTH
    sin_theta = math.sin(theta)
    cos_theta = math.cos(theta)

    temp = (force + polemass_length * theta_dot**2 * sin_theta) / total_mass
    theta_acc = (gravity * sin_theta - cos_theta * temp) / (
        HALF_POLE_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_theta**2 / total_mass)
    )
    x_acc = temp - polemass_length * theta_acc * cos_theta / total_mass
    return x_acc, theta_acc


def step(task, s, a, rng=None, t=None):
    """Advance one step from state ``s`` with action ``a``.

    ``t`` is the number of steps already taken in the episode; when given,
    Cart Pole marks the transition terminal once the horizon is reached.
    """
    if not 0 <= a < num_actions(task):
        raise ValueError(f"Action {a} is out of range for {task.env_kind}.")
    s = check_state(task, s)

    if task.is_puddle:
        nxt = s + PUDDLE_ACTIONS[a]
        if task.noise_std > 0:
            nxt = nxt + rng.normal(0.0, task.noise_std, size=2)
        nxt = np.clip(nxt, 0.0, 1.0)
        if is_goal(task, nxt):
            return Transition(nxt, 1.0, True, success=True)
        reward = -1.0 if in_puddle(task, nxt) else 0.0
        return Transition(nxt, reward, False)

    x, x_dot, theta, theta_dot = s
    force = FORCE_MAG if a == PUSH_RIGHT else -FORCE_MAG
    x_acc, theta_acc = cartpole_accelerations(task.gravity, s, force)

    # Explicit Euler: positions advance with the old velocities.
    nxt = np.array([
        x + TAU * x_dot,
        x_dot + TAU * x_acc,
        theta + TAU * theta_dot,
        theta_dot + TAU * theta_acc,
    ])
    if not -ANGLE_LIMIT < nxt[2] < ANGLE_LIMIT:
        return Transition(nxt, -10.0, True)
    at_horizon = t is not None and t + 1 >= task.horizon
    out_of_track = abs(nxt[0]) > X_LIMIT
    return Transition(
        nxt, 1.0, out_of_track or at_horizon, success=at_horizon and not out_of_track
    )


def task_family(kind, variants=None, include_base=False):
    """Tasks used for training and transfer.

    Puddle World yields one task per goal corner. Cart Pole yields the
    transfer gravities (``variants`` overrides them), optionally preceded by
    the base gravity.
    """
    if kind == EnvKind.PUDDLE:
        corners = variants or GoalCorner.values
        return [puddle_task(goal_corner=corner) for corner in corners]
    if kind == EnvKind.CART_POLE:
        gravities = list(variants or TRANSFER_GRAVITIES)
        if include_base and BASE_GRAVITY not in gravities:
            gravities.insert(0, BASE_GRAVITY)
        return [cart_pole_task(gravity=g) for g in gravities]
    raise ValueError(f"Unknown environment kind: {kind!r}")


def hold_out(tasks, index):
    """Split a family into (training tasks, held-out task)."""
    return [t for i, t in enumerate(tasks) if i != index], tasks[index]


class Environment:
    """Bound view of a task, the interface agents and oracles run against."""

    def __init__(self, task):
        self.task = task.validate()
        self.state_dim = state_dim(task)
        self.num_actions = num_actions(task)
        self.horizon = task.horizon
        self.bounds = env_bounds(task)

    def reset(self, rng):
        return reset(self.task, rng)

    def step(self, s, a, rng=None, t=None):
        return step(self.task, s, a, rng, t)

    def __repr__(self):
        return f"Environment({self.task.env_kind}, goal={self.task.goal_corner}, g={self.task.gravity})"
