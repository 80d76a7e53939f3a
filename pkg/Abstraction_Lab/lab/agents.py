"""Tabular Q-learning over abstract states, and the Linear-Q baseline."""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from django.db import models

from . import envs
from .abstraction import MapMode
from .exceptions import DimensionMismatch

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["episode", "ep_return", "cum_reward", "steps", "success"]


class TieBreak(models.TextChoices):
    LOWEST = "Lowest", "Lowest action index"
    RANDOM = "Random", "Uniform among the tied actions"


@dataclass
class AgentConfig:
    alpha: float = 0.005
    epsilon: float = 0.1
    gamma: float = envs.GAMMA
    normalize_features: bool = False
    tie_break: str = TieBreak.LOWEST


@dataclass
class QTable:
    values: np.ndarray
    alpha: float = 0.005
    gamma: float = envs.GAMMA
    epsilon: float = 0.1
    tie_break: str = TieBreak.LOWEST

    @classmethod
    def zeros(cls, num_states, num_actions, hyper=None):
        hyper = hyper or AgentConfig()
        return cls(
            np.zeros((num_states, num_actions)), hyper.alpha, hyper.gamma, hyper.epsilon, hyper.tie_break
        )

    @property
    def num_actions(self):
        return self.values.shape[1]

    def greedy(self, c, rng=None):
        row = self.values[c]
        if self.tie_break == TieBreak.RANDOM and rng is not None:
            best = np.flatnonzero(row == row.max())
            # A second draw only on an actual tie.
            return int(best[rng.integers(len(best))]) if len(best) > 1 else int(best[0])
        return int(np.argmax(row))


@dataclass
class LearningCurve:
    returns: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    successes: list = field(default_factory=list)

    def append(self, ep_return, steps, success):
        self.returns.append(float(ep_return))
        self.steps.append(int(steps))
        self.successes.append(bool(success))

    def __len__(self):
        return len(self.returns)

    def to_frame(self):
        returns = np.array(self.returns, dtype=float)
        return pd.DataFrame({
            "episode": np.arange(len(returns)),
            "ep_return": returns,
            "cum_reward": np.cumsum(returns),
            "steps": np.array(self.steps, dtype=int),
            "success": np.array(self.successes, dtype=int),
        }, columns=CURVE_COLUMNS)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def q_update(q, c, a, r, c_next, terminal):
    target = r if terminal else r + q.gamma * np.max(q.values[c_next])
    q.values[c, a] += q.alpha * (target - q.values[c, a])
    return q


def epsilon_greedy(q, c, rng):
    # One uniform draw per decision, a second only when exploring.
    if rng.random() < q.epsilon:
        return int(rng.integers(q.num_actions))
    return q.greedy(c, rng)


def run_q_learning(env, abstraction, num_states, episodes, hyper=None, rng=None, q=None):
    """Episodic Q-learning on the discrete states produced by ``abstraction``.

    ``env`` exposes reset/step/horizon/num_actions; ``abstraction`` maps a
    ground state to an integer in [0, num_states). The table carries over
    between episodes and across calls when ``q`` is passed back in.
    """
    rng = rng if rng is not None else np.random.default_rng()
    q = q if q is not None else QTable.zeros(num_states, env.num_actions, hyper)
    curve = LearningCurve()

    for _ in range(episodes):
        s = env.reset(rng)
        c = abstraction(s)
        total, success, t = 0.0, False, 0
        while t < env.horizon:
            a = epsilon_greedy(q, c, rng)
            tr = env.step(s, a, rng, t)
            c_next = abstraction(tr.next_state)
            q_update(q, c, a, tr.reward, c_next, tr.terminal)
            total += tr.reward
            success = success or tr.success
            s, c, t = tr.next_state, c_next, t + 1
            if tr.terminal:
                break
        curve.append(total, t, success)
    return q, curve


def _as_env(task_or_env):
    return task_or_env if hasattr(task_or_env, "step") else envs.Environment(task_or_env)


def run_q_phi(model, task, episodes, hyper=None, rng=None, q=None):
    env = _as_env(task)
    if model.state_dim != env.state_dim or model.num_actions != env.num_actions:
        raise DimensionMismatch(
            f"Model maps {model.state_dim}-D states to {model.num_actions} actions; "
            f"{env!r} has {env.state_dim}-D states and {env.num_actions} actions."
        )
    q, curve = run_q_learning(
        env, lambda s: model.phi_map(s, MapMode.ARGMAX), model.num_clusters, episodes, hyper, rng, q
    )
    logger.debug("Q-learning-phi: %d episodes on %r, final return %s", episodes, env, curve.returns[-1:] or None)
    return q, curve


@dataclass
class LinearQ:
    weights: np.ndarray
    alpha: float = 0.005
    gamma: float = envs.GAMMA
    epsilon: float = 0.1
    low: np.ndarray = None
    high: np.ndarray = None

    @classmethod
    def zeros(cls, env, hyper=None):
        hyper = hyper or AgentConfig()
        low = high = None
        if hyper.normalize_features:
            low, high = envs.state_box(env.task)
        return cls(np.zeros((env.num_actions, env.state_dim + 1)), hyper.alpha, hyper.gamma, hyper.epsilon, low, high)

    @property
    def num_actions(self):
        return self.weights.shape[0]

    def features(self, s):
        s = np.asarray(s, dtype=float)
        if self.low is not None:
            s = (s - self.low) / (self.high - self.low)
        return np.append(s, 1.0)

    def action_values(self, s):
        return self.weights @ self.features(s)

    def greedy(self, s):
        return int(np.argmax(self.action_values(s)))

    def update(self, s, a, r, s_next, terminal):
        """Semi-gradient Q-learning step on action ``a``'s weight vector."""
        f = self.features(s)
        target = r if terminal else r + self.gamma * np.max(self.action_values(s_next))
        self.weights[a] += self.alpha * (target - self.weights[a] @ f) * f
        return self


def linear_epsilon_greedy(lq, s, rng):
    if rng.random() < lq.epsilon:
        return int(rng.integers(lq.num_actions))
    return lq.greedy(s)


def run_linear_q(task, episodes, hyper=None, rng=None, lq=None):
    env = _as_env(task)
    rng = rng if rng is not None else np.random.default_rng()
    lq = lq if lq is not None else LinearQ.zeros(env, hyper)
    curve = LearningCurve()

    for _ in range(episodes):
        s = env.reset(rng)
        total, success, t = 0.0, False, 0
        while t < env.horizon:
            a = linear_epsilon_greedy(lq, s, rng)
            tr = env.step(s, a, rng, t)
            lq.update(s, a, tr.reward, tr.next_state, tr.terminal)
            total += tr.reward
            success = success or tr.success
            s, t = tr.next_state, t + 1
            if tr.terminal:
                break
        curve.append(total, t, success)
    if not np.all(np.isfinite(lq.weights)):
        logger.warning("Linear-Q weights diverged on %r", env)
    return lq, curve


def greedy_success_rate(env, abstraction, q, episodes, rng):
    """Success rate of the greedy policy read off ``q``, without learning."""
    hits = 0
    for _ in range(episodes):
        s = env.reset(rng)
        for t in range(env.horizon):
            tr = env.step(s, q.greedy(abstraction(s)), rng, t)
            s = tr.next_state
            if tr.success:
                hits += 1
            if tr.terminal:
                break
    return hits / episodes
