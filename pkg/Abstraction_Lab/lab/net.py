"""Feed-forward softmax network with hand-written backpropagation and Adam.

Layers are stored as (in, out) weight matrices so a batch of states ``X`` of
shape (n, in) flows through ``X @ W + b``. Hidden layers use rectifiers and
the last layer feeds a softmax over abstract states.
"""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import DimensionMismatch

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class NetParams:
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @property
    def input_dim(self):
        return self.weights[0].shape[0] if self.weights else None

    @property
    def output_dim(self):
        return self.weights[-1].shape[1] if self.weights else None

    def arrays(self):
        """Every parameter array, weights then bias, layer by layer."""
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def num_parameters(self):
        return sum(arr.size for arr in self.arrays())

    def copy(self):
        return NetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return NetParams(
            [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases]
        )

    def map(self, fn, *others):
        """Apply ``fn`` array-wise across this and other same-shaped params."""
        weights = [fn(w, *(o.weights[i] for o in others)) for i, w in enumerate(self.weights)]
        biases = [fn(b, *(o.biases[i] for o in others)) for i, b in enumerate(self.biases)]
        return NetParams(weights, biases)

    def all_finite(self):
        return all(np.all(np.isfinite(arr)) for arr in self.arrays())


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    task_ids: np.ndarray


def as_batch(batch):
    """Accept a Batch or a list of (s, a, task_id) triples."""
    if isinstance(batch, Batch):
        return batch
    states, actions, task_ids = zip(*batch)
    return Batch(np.array(states, dtype=float), np.array(actions, dtype=int), np.array(task_ids, dtype=int))


def layer_sizes(input_dim, output_dim, hidden=64, layers=2):
    return [input_dim] + [hidden] * layers + [output_dim]


def init_params(input_dim, output_dim, hidden=64, layers=2, rng=None):
    """Glorot-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng()
    sizes = layer_sizes(input_dim, output_dim, hidden, layers)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetParams(weights, biases)


def zero_params(input_dim, output_dim, hidden=64, layers=2):
    sizes = layer_sizes(input_dim, output_dim, hidden, layers)
    return NetParams(
        [np.zeros((i, o)) for i, o in zip(sizes[:-1], sizes[1:])],
        [np.zeros(o) for o in sizes[1:]],
    )


def softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    exps = np.exp(z)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def relu(x):
    return np.maximum(0.0, x)


def forward_cache(p, X):
    """Batch forward pass; returns probabilities and what backward needs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if p.weights and X.shape[1] != p.input_dim:
        raise DimensionMismatch(f"Network expects {p.input_dim} inputs, got {X.shape[1]}.")
    cache = []
    h = X
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        a = h @ w + b
        cache.append((h, a))
        h = a if i == last else relu(a)
    return softmax(h), cache


def forward(p, s):
    """phi(.|s) for one state (1-D input) or a batch of states (2-D input)."""
    s = np.asarray(s, dtype=float)
    probs, _ = forward_cache(p, s)
    return probs[0] if s.ndim == 1 else probs


def logits(p, X):
    h = np.atleast_2d(np.asarray(X, dtype=float))
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w + b
        if i != last:
            h = relu(h)
    return h


def backward(p, cache, dz):
    """Gradient of a scalar loss w.r.t. every parameter, given dloss/dlogits."""
    grads_w = [None] * len(p.weights)
    grads_b = [None] * len(p.biases)
    delta = dz
    for i in reversed(range(len(p.weights))):
        h_in, _ = cache[i]
        grads_w[i] = h_in.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            _, a_prev = cache[i - 1]
            delta = (delta @ p.weights[i].T) * (a_prev > 0)
    return NetParams(grads_w, grads_b)


def _table_probs(policy_table):
    return np.asarray(getattr(policy_table, "probs", policy_table), dtype=float)


def nll_and_grad(p, batch, policy_table, stats=None):
    """Mean negative log marginal action likelihood and its exact gradient.

    loss = -(1/n) sum_j log sum_c phi(c|s_j) pi(a_j|c, k_j). Marginals below
    LOG_FLOOR are clamped; clamped samples contribute no gradient.
    """
    batch = as_batch(batch)
    n = len(batch.actions)
    if n == 0:
        raise ValueError("Cannot evaluate the loss on an empty batch.")
    table = _table_probs(policy_table)

    phi, cache = forward_cache(p, batch.states)
    # w[j, c] = pi(a_j | c, k_j)
    w = table[:, batch.task_ids, batch.actions].T
    marginal = np.sum(phi * w, axis=1)

    floored = marginal < LOG_FLOOR
    if floored.any():
        count = int(floored.sum())
        logger.warning("Marginal action likelihood floored at %g for %d sample(s)", LOG_FLOOR, count)
        if stats is not None:
            stats["floored"] = stats.get("floored", 0) + count
    safe = np.where(floored, 1.0, marginal)
    loss = -np.mean(np.log(np.where(floored, LOG_FLOOR, marginal)))

    dz = phi * (1.0 - w / safe[:, None]) / n
    dz[floored] = 0.0
    return float(loss), backward(p, cache, dz)


def loss_only(p, batch, policy_table):
    batch = as_batch(batch)
    phi = forward(p, np.atleast_2d(batch.states))
    table = _table_probs(policy_table)
    marginal = np.sum(phi * table[:, batch.task_ids, batch.actions].T, axis=1)
    return float(-np.mean(np.log(np.maximum(marginal, LOG_FLOOR))))


@dataclass
class AdamState:
    m: NetParams
    v: NetParams
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(p, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(p.zeros_like(), p.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(p, st, grad):
    """One bias-corrected Adam step that descends ``grad``."""
    t = st.t + 1
    m = st.m.map(lambda m, g: st.beta1 * m + (1 - st.beta1) * g, grad)
    v = st.v.map(lambda v, g: st.beta2 * v + (1 - st.beta2) * g * g, grad)
    c1 = 1 - st.beta1**t
    c2 = 1 - st.beta2**t
    new_p = p.map(lambda w, m, v: w - st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps), m, v)
    return new_p, AdamState(m, v, t, st.lr, st.beta1, st.beta2, st.eps)


def finite_diff_check(p, batch, policy_table, h=1e-5, loss_and_grad=nll_and_grad):
    """Largest |analytic - numeric| / (|analytic| + 1e-8) over every parameter.

    The numeric gradient is the central difference with step ``h``.
    """
    if h <= 0:
        raise ValueError("Finite-difference step must be positive.")
    batch = as_batch(batch)
    _, grad = loss_and_grad(p, batch, policy_table)
    shifted = p.copy()
    worst = 0.0
    for arr, g in zip(shifted.arrays(), grad.arrays()):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_and_grad(shifted, batch, policy_table)[0]
            arr[idx] = orig - h
            down = loss_and_grad(shifted, batch, policy_table)[0]
            arr[idx] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(g[idx] - numeric) / (abs(g[idx]) + 1e-8))
    return worst
