"""Runtime certification of the value-loss and generalization bounds.

Measures the KL and L1 gaps between the demonstrator and the abstraction's
marginal policy, checks Pinsker's inequality state by state, evaluates both
policies exactly on a noise-free grid version of Puddle World, and estimates
the Rademacher complexity of the network class by fitting random signs.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import stats

from . import envs, net
from .abstraction import marginal_action_dist
from .exceptions import CertificationError

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12
PINSKER_TOL = 1e-9
LEMMA_TOL = 1e-6


def kl_point(p, q, floor=KL_FLOOR, counter=None):
    """KL(p || q) over a finite action set; q is floored where p has mass."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0
    q_support = q[support]
    low = q_support < floor
    if low.any() and counter is not None:
        counter["floored"] = counter.get("floored", 0) + int(low.sum())
    value = np.sum(p[support] * np.log(p[support] / np.maximum(q_support, floor)))
    return max(float(value), 0.0)


class DeltaMeasurement(NamedTuple):
    delta: float
    mean_l1: float
    records: pd.DataFrame


def certify_pinsker(records, tol=PINSKER_TOL):
    worst = float(records["pinsker_slack"].min()) if len(records) else 0.0
    if worst < -tol:
        raise CertificationError(f"Pinsker's inequality fails by {-worst:.3g} on a measured state.")
    return worst


def measure_delta(model, expert, states, task_id=0):
    """Delta = mean sqrt(2 KL(pi*||phi_A)), plus the mean L1 gap, per state.

    ``expert`` maps a state to pi*(.|s).
    """
    states = np.atleast_2d(states)
    if len(states) < 1:
        raise ValueError("Need at least one state to measure the policy gap.")
    floor_stats = {}
    rows = []
    for s in states:
        target = expert(s)
        marginal = marginal_action_dist(model, s, task_id)
        kl = kl_point(target, marginal, counter=floor_stats)
        l1 = float(np.sum(np.abs(target - marginal)))
        rows.append((kl, l1, math.sqrt(2 * kl) - l1))
    if floor_stats.get("floored"):
        logger.warning("KL floor applied on %d state(s)", floor_stats["floored"])

    records = pd.DataFrame(rows, columns=["kl", "l1", "pinsker_slack"])
    certify_pinsker(records)
    delta = float(np.mean(np.sqrt(2 * records["kl"])))
    return DeltaMeasurement(delta, float(records["l1"].mean()), records)


class GridMDP:
    """Noise-free Puddle World on an R x R grid of cell centres.

    Transitions, rewards and terminals come from ``envs.step`` applied to the
    cell centre, with the landing point snapped back to its cell. Cells whose
    centre lies in the goal region are absorbing with value 0.
    """

    def __init__(self, task, resolution, gamma=envs.GAMMA):
        if not task.is_puddle:
            raise ValueError("The grid oracle only models Puddle World tasks.")
        if round(resolution * envs.PUDDLE_STEP, 9) % 1:
            # Otherwise a move lands on a cell edge and snapping picks a side by rounding.
            raise ValueError(f"Resolution {resolution} does not make one step a whole number of cells.")
        self.task = replace(task, noise_std=0.0)
        self.resolution = resolution
        self.gamma = gamma
        self.num_actions = envs.num_actions(task)

        ticks = (np.arange(resolution) + 0.5) / resolution
        xs, ys = np.meshgrid(ticks, ticks, indexing="ij")
        self.centers = np.column_stack([xs.ravel(), ys.ravel()])
        n = len(self.centers)
        self.absorbing = np.array([envs.is_goal(self.task, c) for c in self.centers])
        self.next_cell = np.zeros((n, self.num_actions), dtype=int)
        self.rewards = np.zeros((n, self.num_actions))
        self.terminal = np.zeros((n, self.num_actions), dtype=bool)
        for i, center in enumerate(self.centers):
            if self.absorbing[i]:
                self.next_cell[i] = i
                continue
            for a in range(self.num_actions):
                tr = envs.step(self.task, center, a)
                self.next_cell[i, a] = self.cell_of(tr.next_state)
                self.rewards[i, a] = tr.reward
                self.terminal[i, a] = tr.terminal
        self.values = np.zeros(n)
        self.residuals = []

    @property
    def num_cells(self):
        return len(self.centers)

    def cell_of(self, s):
        i, j = np.clip(np.floor(np.asarray(s) * self.resolution).astype(int), 0, self.resolution - 1)
        return int(i * self.resolution + j)

    def q_values(self, values):
        cont = np.where(self.terminal, 0.0, self.gamma * values[self.next_cell])
        q = self.rewards + cont
        q[self.absorbing] = 0.0
        return q

    def solve(self, tol=1e-10, max_iter=100_000):
        values = np.zeros(self.num_cells)
        self.residuals = []
        for _ in range(max_iter):
            updated = self.q_values(values).max(axis=1)
            residual = float(np.max(np.abs(updated - values)))
            self.residuals.append(residual)
            values = updated
            if residual < tol:
                break
        else:
            logger.warning("Value iteration stopped at max_iter with residual %g", self.residuals[-1])
        self.values = values
        return self

    def greedy_policy(self):
        return np.eye(self.num_actions)[np.argmax(self.q_values(self.values), axis=1)]

    def worst_policy(self):
        return np.eye(self.num_actions)[np.argmin(self.q_values(self.values), axis=1)]

    def uniform_policy(self):
        return np.full((self.num_cells, self.num_actions), 1.0 / self.num_actions)

    def tabulate(self, policy_fn):
        """pi(.|cell) for every cell, read off ``policy_fn`` at the centres."""
        return np.array([policy_fn(c) for c in self.centers])

    def evaluate(self, policy):
        """Exact V^pi for a per-cell action distribution of shape (cells, actions)."""
        n = self.num_cells
        cont = np.where(self.terminal, 0.0, policy)
        transition = np.zeros((n, n))
        np.add.at(transition, (np.repeat(np.arange(n), self.num_actions), self.next_cell.ravel()), cont.ravel())
        transition[self.absorbing] = 0.0
        reward = np.sum(policy * self.rewards, axis=1)
        reward[self.absorbing] = 0.0
        return np.linalg.solve(np.eye(n) - self.gamma * transition, reward)


def solve_grid_mdp(task, resolution=20, gamma=envs.GAMMA, tol=1e-10):
    return GridMDP(task, resolution, gamma).solve(tol)


def monte_carlo_value(grid, policy, cell, episodes, rng, horizon=2000):
    """Sampled discounted return from ``cell``; returns (mean, standard error)."""
    returns = np.zeros(episodes)
    for e in range(episodes):
        s, total, discount = cell, 0.0, 1.0
        for _ in range(horizon):
            if grid.absorbing[s]:
                break
            a = int(rng.choice(grid.num_actions, p=policy[s]))
            total += discount * grid.rewards[s, a]
            if grid.terminal[s, a]:
                break
            discount *= grid.gamma
            s = grid.next_cell[s, a]
        returns[e] = total
    return float(returns.mean()), float(stats.sem(returns)) if episodes > 1 else 0.0


class Lemma1Check(NamedTuple):
    measured_value_gap: float
    lemma_bound: float
    holds: bool
    k: float


def verify_value_bound(policy1, policy2, grid, rmax, state_distribution=None, tol=LEMMA_TOL):
    """Compare E_p[V^pi1 - V^pi2] with k RMax / (1 - gamma), k = E_p ||pi1 - pi2||_1."""
    p = state_distribution
    if p is None:
        p = np.full(grid.num_cells, 1.0 / grid.num_cells)
    k = float(p @ np.sum(np.abs(policy1 - policy2), axis=1))
    gap = float(p @ (grid.evaluate(policy1) - grid.evaluate(policy2)))
    bound = k * rmax / (1 - grid.gamma)
    holds = gap <= bound + tol
    if not holds:
        logger.error("Value-loss bound violated: gap %.6g > bound %.6g", gap, bound)
    return Lemma1Check(gap, bound, holds, k)


def verify_lemma1(model, expert, task, grid, state_distribution=None, task_id=0, tol=LEMMA_TOL):
    expert_policy = grid.tabulate(expert)
    phi_policy = grid.tabulate(lambda s: marginal_action_dist(model, s, task_id))
    return verify_value_bound(
        expert_policy, phi_policy, grid, envs.env_bounds(task).rmax, state_distribution, tol
    )


@dataclass
class RademacherConfig:
    hidden: int = 64
    layers: int = 2
    lr: float = 0.01
    steps: int = 200
    restarts: int = 3
    frozen: bool = False


@dataclass
class RademacherDraw:
    sigma: np.ndarray
    fit: float


@dataclass
class RademacherEstimate:
    estimate: float
    draws: list = field(default_factory=list)


def _correlation_and_grad(params, states, sigma):
    probs, cache = net.forward_cache(params, states)
    n = len(states)
    value = float(np.sum(sigma * probs) / n)
    inner = np.sum(sigma * probs, axis=1, keepdims=True)
    # Ascend the correlation by descending its negation.
    dz = -probs * (sigma - inner) / n
    return value, net.backward(params, cache, dz)


def _fit_signs(states, sigma, config, rng):
    num_outputs = sigma.shape[1]
    if config.frozen:
        params = net.zero_params(states.shape[1], num_outputs, config.hidden, config.layers)
        return _correlation_and_grad(params, states, sigma)[0]

    best = -np.inf
    for _ in range(config.restarts):
        params = net.init_params(states.shape[1], num_outputs, config.hidden, config.layers, rng)
        adam = net.adam_init(params, lr=config.lr)
        for _ in range(config.steps):
            value, grad = _correlation_and_grad(params, states, sigma)
            best = max(best, value)
            params, adam = net.adam_step(params, adam, grad)
        best = max(best, _correlation_and_grad(params, states, sigma)[0])
    return best


def empirical_rademacher(states, num_outputs, m_draws, config=None, rng=None):
    """Mean over sign draws of the best fitted correlation (1/n) sum sigma_ji g(s_j)_i.

    The supremum is approximated by gradient ascent with restarts, so the
    estimate is a lower bound on the true empirical complexity.
    """
    config = config or RademacherConfig()
    rng = rng if rng is not None else np.random.default_rng()
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if len(states) < 1 or m_draws < 1:
        raise ValueError("Need at least one state and one sign draw.")
    draws = []
    for _ in range(m_draws):
        sigma = rng.choice([-1.0, 1.0], size=(len(states), num_outputs))
        draws.append(RademacherDraw(sigma, _fit_signs(states, sigma, config, rng)))
    estimate = float(np.mean([d.fit for d in draws]))
    logger.info("Rademacher estimate %.4f over %d draw(s), n=%d", estimate, m_draws, len(states))
    return RademacherEstimate(estimate, draws)


class TheoremBound(NamedTuple):
    bound: float
    pinsker_bound: float


def theorem_bound(delta, rad, n, delta_prob):
    """Generalization bound on E_s ||pi* - phi||_1.

    ``bound`` uses Delta/2 as stated with the theorem; ``pinsker_bound`` uses
    Delta, which is what Pinsker's inequality yields for the training term.
    """
    if not 0 < delta_prob < 1:
        raise ValueError("delta_prob must lie in (0, 1).")
    if n < 1:
        raise ValueError("n must be at least 1.")
    tail = 2 * math.sqrt(2) * rad + math.sqrt(2 * math.log(1 / delta_prob) / n)
    return TheoremBound(delta / 2 + tail, delta + tail)


@dataclass
class BoundReport:
    delta: float
    mean_l1: float
    rademacher_estimate: float
    n: int
    delta_prob: float
    theorem_bound: float
    theorem_bound_pinsker: float
    lemma_bound: float
    measured_value_gap: float
    lemma_holds: bool
    grid_l1: float

    def as_dict(self):
        return asdict(self)

    def write(self, path):
        with open(path, "w") as fh:
            for key, value in self.as_dict().items():
                fh.write(f"{key} = {format(value, '.17g') if isinstance(value, float) else value}\n")
