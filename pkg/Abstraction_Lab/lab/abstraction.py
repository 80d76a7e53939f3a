"""Learning phi(c|s; theta) against a fixed abstract policy pi(a|c, k).

Training maximises the likelihood of the demonstrator's actions under the
marginal sum_c phi(c|s) pi(a|c, k); the dynamics term of the trajectory
likelihood does not depend on theta and is left out.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from django.db import models

from . import net
from .exceptions import DimensionMismatch, ModelFormatError

logger = logging.getLogger(__name__)

MODEL_FORMAT = "abstraction-model"
MODEL_VERSION = 1


class ClusterMode(models.TextChoices):
    ACTION_TUPLE = "ActionTuple", "One cluster per action tuple"
    BUDGET = "Budget", "Fixed cluster budget"


class MapMode(models.TextChoices):
    ARGMAX = "Argmax", "Most likely cluster"
    SAMPLE = "Sample", "Cluster drawn from phi"


@dataclass
class AbstractPolicyTable:
    probs: np.ndarray
    mode: str = ClusterMode.ACTION_TUPLE

    @property
    def num_clusters(self):
        return self.probs.shape[0]

    @property
    def num_tasks(self):
        return self.probs.shape[1]

    @property
    def num_actions(self):
        return self.probs.shape[2]

    def action(self, c, k):
        return int(np.argmax(self.probs[c, k]))


def action_tuple(c, num_actions, num_tasks):
    """Base-|A| digits of cluster ``c``, task 0 least significant."""
    return tuple((c // num_actions**k) % num_actions for k in range(num_tasks))


def build_policy_table(num_actions, num_tasks, mode=ClusterMode.ACTION_TUPLE, budget=None, rng=None):
    if num_actions < 2 or num_tasks < 1:
        raise ValueError("Need at least two actions and one task.")
    n_tuples = num_actions**num_tasks
    if mode == ClusterMode.BUDGET:
        if budget is None or budget < num_actions:
            raise ValueError(f"Budget mode needs a budget of at least {num_actions} clusters.")
        num_clusters = budget
    else:
        num_clusters = n_tuples

    probs = np.zeros((num_clusters, num_tasks, num_actions))
    for c in range(min(num_clusters, n_tuples)):
        for k, a in enumerate(action_tuple(c, num_actions, num_tasks)):
            probs[c, k, a] = 1.0
    if num_clusters > n_tuples:
        rng = rng if rng is not None else np.random.default_rng()
        extra = rng.integers(num_actions, size=(num_clusters - n_tuples, num_tasks))
        for offset, row in enumerate(extra):
            for k, a in enumerate(row):
                probs[n_tuples + offset, k, a] = 1.0
    return AbstractPolicyTable(probs, mode)


@dataclass
class TrainingConfig:
    hidden: int = 64
    layers: int = 2
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    tol: float = 1e-5
    patience: int = 5


@dataclass
class AbstractionModel:
    params: net.NetParams
    policy: AbstractPolicyTable
    state_dim: int
    num_actions: int
    num_tasks: int
    env_kind: str = ""
    loss_trace: list = field(default_factory=list)

    @property
    def num_clusters(self):
        return self.policy.num_clusters

    def probabilities(self, s):
        return net.forward(self.params, s)

    def phi_map(self, s, mode=MapMode.ARGMAX, rng=None):
        return phi_map(self, s, mode, rng)

    def marginal_action_dist(self, s, task_id=0):
        return marginal_action_dist(self, s, task_id)


def zero_model(state_dim, policy, env_kind="", hidden=64, layers=2):
    """Model whose phi is uniform everywhere."""
    params = net.zero_params(state_dim, policy.num_clusters, hidden, layers)
    return AbstractionModel(params, policy, state_dim, policy.num_actions, policy.num_tasks, env_kind)


def evaluate_loss(params, dataset, policy):
    batch = net.Batch(dataset.states, dataset.actions, dataset.task_ids)
    return net.loss_only(params, batch, policy)


def train(dataset, policy, hyper=None, rng=None):
    """Minibatch Adam on the negated log-likelihood objective.

    Returns the parameters with the lowest full-dataset loss seen, the
    initialisation included, and records that loss after every epoch.
    """
    hyper = hyper or TrainingConfig()
    rng = rng if rng is not None else np.random.default_rng()
    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset.")
    if dataset.num_tasks != policy.num_tasks:
        raise DimensionMismatch(
            f"Dataset has {dataset.num_tasks} task(s) but the policy table has {policy.num_tasks}."
        )
    if dataset.actions.max() >= policy.num_actions:
        raise DimensionMismatch("Dataset actions exceed the policy table's action count.")

    params = net.init_params(dataset.state_dim, policy.num_clusters, hyper.hidden, hyper.layers, rng)
    adam = net.adam_init(params, lr=hyper.lr)
    best_loss = evaluate_loss(params, dataset, policy)
    best = params.copy()
    trace = [best_loss]
    stats = {}
    stalled = 0
    n = len(dataset)

    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            batch = net.Batch(dataset.states[idx], dataset.actions[idx], dataset.task_ids[idx])
            _, grad = net.nll_and_grad(params, batch, policy, stats)
            params, adam = net.adam_step(params, adam, grad)

        loss = evaluate_loss(params, dataset, policy)
        logger.debug("epoch %d loss %.6f", epoch, loss)
        stalled = stalled + 1 if trace[-1] - loss < hyper.tol else 0
        trace.append(loss)
        if loss < best_loss:
            best_loss, best = loss, params.copy()
        if stalled >= hyper.patience:
            logger.info("Early stop after epoch %d, loss %.6f", epoch, loss)
            break

    if stats.get("floored"):
        logger.warning("%d marginal(s) hit the log floor during training", stats["floored"])
    logger.info("Trained phi with %d clusters on %d quadruples, best loss %.6f", policy.num_clusters, n, best_loss)
    return AbstractionModel(
        best, policy, dataset.state_dim, policy.num_actions, policy.num_tasks, dataset.env_kind, trace
    )


def phi_map(model, s, mode=MapMode.ARGMAX, rng=None):
    probs = model.probabilities(s)
    if mode == MapMode.SAMPLE:
        if rng is None:
            raise ValueError("Sampling an abstract state needs a random generator.")
        return int(rng.choice(len(probs), p=probs))
    return int(np.argmax(probs))


def phi_map_batch(model, states):
    return np.argmax(net.forward(model.params, np.atleast_2d(states)), axis=1)


def marginal_action_dist(model, s, task_id=0):
    if not 0 <= task_id < model.num_tasks:
        raise ValueError(f"Task id {task_id} outside [0, {model.num_tasks}).")
    return model.probabilities(s) @ model.policy.probs[:, task_id, :]


def action_accuracy(model, states, expert_actions, task_id=0):
    """How often the most likely marginal action matches the expert's."""
    probs = net.forward(model.params, np.atleast_2d(states)) @ model.policy.probs[:, task_id, :]
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(expert_actions)))


def _format_array(name, arr):
    values = " ".join(format(v, ".17g") for v in arr.ravel())
    return f"{name} {' '.join(str(d) for d in arr.shape)}\n{values}\n"


def save_model(model, path):
    with open(path, "w") as fh:
        fh.write(f"{MODEL_FORMAT} {MODEL_VERSION}\n")
        fh.write(f"env_kind {model.env_kind or '-'}\n")
        fh.write(f"state_dim {model.state_dim}\n")
        fh.write(f"num_actions {model.num_actions}\n")
        fh.write(f"num_tasks {model.num_tasks}\n")
        fh.write(f"mode {model.policy.mode}\n")
        fh.write(f"layers {len(model.params.weights)}\n")
        for i, (w, b) in enumerate(zip(model.params.weights, model.params.biases)):
            fh.write(_format_array(f"W{i}", w))
            fh.write(_format_array(f"b{i}", b))
        fh.write(_format_array("policy", model.policy.probs))


class _Reader:
    def __init__(self, lines, path):
        self.lines = lines
        self.pos = 0
        self.path = path

    def next(self):
        if self.pos >= len(self.lines):
            raise ModelFormatError(f"{self.path} ends early after line {self.pos}.")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def field(self, key, cast=str):
        parts = self.next().split()
        if len(parts) != 2 or parts[0] != key:
            raise ModelFormatError(f"{self.path} line {self.pos}: expected '{key} <value>'.")
        try:
            return cast(parts[1])
        except ValueError as exc:
            raise ModelFormatError(f"{self.path} line {self.pos}: bad value for {key}.") from exc

    def array(self, name):
        parts = self.next().split()
        if not parts or parts[0] != name:
            raise ModelFormatError(f"{self.path} line {self.pos}: expected array '{name}'.")
        shape = tuple(int(d) for d in parts[1:])
        values = self.next().split() if int(np.prod(shape)) else []
        if len(values) != int(np.prod(shape)):
            raise ModelFormatError(
                f"{self.path} line {self.pos}: '{name}' needs {int(np.prod(shape))} values, found {len(values)}."
            )
        return np.array([float(v) for v in values]).reshape(shape)


def load_model(path, state_dim=None, num_actions=None, env_kind=None):
    """Read a model, optionally checking it matches the caller's environment."""
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    reader = _Reader(lines, path)

    header = reader.next().split()
    if len(header) != 2 or header[0] != MODEL_FORMAT:
        raise ModelFormatError(f"{path} is not an abstraction model file.")
    if header[1] != str(MODEL_VERSION):
        raise ModelFormatError(f"{path} has format version {header[1]}, expected {MODEL_VERSION}.")

    kind = reader.field("env_kind")
    model_state_dim = reader.field("state_dim", int)
    model_actions = reader.field("num_actions", int)
    model_tasks = reader.field("num_tasks", int)
    mode = reader.field("mode")
    n_layers = reader.field("layers", int)
    weights, biases = [], []
    for i in range(n_layers):
        weights.append(reader.array(f"W{i}"))
        biases.append(reader.array(f"b{i}"))
    probs = reader.array("policy")

    params = net.NetParams(weights, biases)
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ModelFormatError(f"{path}: layer {i} has inconsistent shapes.")
        if i > 0 and w.shape[0] != weights[i - 1].shape[1]:
            raise ModelFormatError(f"{path}: layer {i} does not chain onto layer {i - 1}.")
    if probs.shape != (params.output_dim, model_tasks, model_actions):
        raise ModelFormatError(f"{path}: policy table shape {probs.shape} does not match the network.")
    if params.input_dim != model_state_dim:
        raise ModelFormatError(f"{path}: network input {params.input_dim} differs from state_dim.")

    kind = "" if kind == "-" else kind
    if state_dim is not None and state_dim != model_state_dim:
        raise DimensionMismatch(f"{path} maps {model_state_dim}-D states, expected {state_dim}-D.")
    if num_actions is not None and num_actions != model_actions:
        raise DimensionMismatch(f"{path} has {model_actions} actions, expected {num_actions}.")
    if env_kind is not None and kind and env_kind != kind:
        raise DimensionMismatch(f"{path} was trained on {kind}, not {env_kind}.")
    return AbstractionModel(
        params, AbstractPolicyTable(probs, mode), model_state_dim, model_actions, model_tasks, kind
    )


def save_loss_trace(model, path):
    pd.DataFrame({"epoch": range(len(model.loss_trace)), "loss": model.loss_trace}).to_csv(path, index=False)
