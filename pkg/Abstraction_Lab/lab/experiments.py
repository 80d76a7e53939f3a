"""Experiment protocols behind the management commands.

Each protocol fans its seeds out (optionally over a process pool), gathers
per-seed frames, reduces them to mean and 95% normal-approximation CI
columns and writes everything into one run directory together with the
config snapshot and a manifest.
"""
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from itertools import repeat
from pathlib import Path

import django
import numpy as np
import pandas as pd
from django.conf import settings
from django.db import DatabaseError
from scipy import stats

from . import abstraction, agents, analysis, demo, envs
from .exceptions import DimensionMismatch, LabError, StageFailure
from .forms import dump_key_values
from .models import BoundReportRecord, Experiment, ExperimentRun

logger = logging.getLogger(__name__)

CI_Z = 1.96
CURVE_METRICS = ["ep_return", "cum_reward", "steps", "success"]


@dataclass
class ExperimentConfig:
    experiment: str
    task: envs.TaskConfig
    env_kind: str = envs.EnvKind.PUDDLE
    seeds: int = 1
    episodes: int = 100
    samples: int = 4000
    sampler: str = demo.Sampler.UNIFORM
    lr: float = 1e-3
    alpha: float = 0.005
    epsilon: float = 0.1
    gamma: float = envs.GAMMA
    cluster_mode: str = abstraction.ClusterMode.ACTION_TUPLE
    budget: int = None
    hidden: int = 64
    layers: int = 2
    epochs: int = 100
    batch_size: int = 32
    gravities: tuple = None
    include_base_gravity: bool = False
    rounds: int = 20
    round_episodes: int = 200
    reset_between_rounds: bool = False
    sweep_start: int = 1
    sweep_stop: int = 4501
    sweep_step: int = 500
    resolution: int = 20
    analysis_states: int = 1000
    rademacher_samples: int = 200
    rademacher_draws: int = 10
    rademacher_restarts: int = 3
    rademacher_steps: int = 200
    delta_prob: float = 0.05
    model: str = ""
    seed: int = 0
    workers: int = 1
    normalize_features: bool = False
    tie_break: str = agents.TieBreak.RANDOM
    out_dir: Path = None

    def seed_list(self):
        return [self.seed + i for i in range(self.seeds)]

    def sweep_sizes(self):
        return list(range(self.sweep_start, self.sweep_stop + 1, self.sweep_step))

    def training_config(self):
        return abstraction.TrainingConfig(
            hidden=self.hidden,
            layers=self.layers,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            tol=settings.LAB["EARLY_STOP_TOL"],
            patience=settings.LAB["EARLY_STOP_PATIENCE"],
        )

    def agent_config(self):
        return agents.AgentConfig(
            self.alpha, self.epsilon, self.gamma, self.normalize_features, self.tie_break
        )

    def rademacher_config(self):
        return analysis.RademacherConfig(
            hidden=self.hidden,
            layers=self.layers,
            steps=self.rademacher_steps,
            restarts=self.rademacher_restarts,
        )

    def family(self):
        """The task family, carrying this config's noise, puddles and horizon."""
        tasks = envs.task_family(self.env_kind, self.gravities, self.include_base_gravity)
        return [
            replace(t, noise_std=self.task.noise_std, puddle_rects=self.task.puddle_rects, horizon=self.task.horizon)
            for t in tasks
        ]

    def snapshot(self):
        """Every setting as config-file text values, in a stable order."""
        values = {"experiment": self.experiment}
        for key, value in self.__dict__.items():
            if key in ("experiment", "task", "out_dir") or value is None:
                continue
            values[key] = _format_value(value)
        values["goal_corner"] = self.task.goal_corner
        values["gravity"] = _format_value(self.task.gravity)
        values["noise_std"] = _format_value(self.task.noise_std)
        values["horizon"] = str(self.task.horizon)
        values["puddle_rects"] = "; ".join(",".join(format(v, "g") for v in r) for r in self.task.puddle_rects)
        return values


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


@contextmanager
def stage(name):
    logger.info("Stage %s", name)
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(name, exc) from exc


@dataclass
class RunResult:
    out_dir: Path
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def content_hash(config_text, extra_paths=()):
    """Git-style blob hash over the config snapshot and any input files."""
    digest = hashlib.sha256()
    blobs = [config_text.encode()]
    for path in extra_paths:
        blobs.append(Path(path).read_bytes())
    for blob in blobs:
        digest.update(f"blob {len(blob)}\0".encode())
        digest.update(blob)
    return digest.hexdigest()


def _open_registry(cfg, out_dir, digest):
    if not settings.LAB["RECORD_RUNS"]:
        return None
    try:
        return ExperimentRun.objects.create(
            experiment=cfg.experiment,
            env_kind=cfg.env_kind,
            seeds=cfg.seed_list(),
            config=cfg.snapshot(),
            content_hash=digest,
            out_dir=str(out_dir),
        )
    except DatabaseError as exc:
        logger.warning("Run registry unavailable, continuing without it: %s", exc)
        return None


def _close_registry(run, failed_stage=None):
    if run is None:
        return
    try:
        if failed_stage is None:
            run.mark_completed()
        else:
            run.mark_failed(failed_stage)
    except DatabaseError as exc:
        logger.warning("Could not update run %s: %s", run.pk, exc)


def _record_report(report, run):
    try:
        return BoundReportRecord.from_report(report, run)
    except DatabaseError as exc:
        logger.warning("Could not store the bound report: %s", exc)
        return None


def run_protocol(cfg, body):
    """Prepare the run directory, run ``body(cfg, out_dir, run)`` and keep the registry in step."""
    config_text = dump_key_values(cfg.snapshot())
    digest = content_hash(config_text, [cfg.model] if cfg.model else [])
    out_dir = Path(cfg.out_dir or Path(settings.LAB["OUTPUT_ROOT"]) / f"{cfg.experiment}-{digest[:12]}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_text)
    (out_dir / "manifest.txt").write_text(dump_key_values({
        "experiment": cfg.experiment,
        "env_kind": cfg.env_kind,
        "config": "config.txt",
        "seeds": ",".join(str(s) for s in cfg.seed_list()),
        "content_hash": digest,
        "model": cfg.model or "-",
        "numpy": np.__version__,
    }))

    logger.info("%s on %s with %d seed(s) into %s", cfg.experiment, cfg.env_kind, cfg.seeds, out_dir)
    run = _open_registry(cfg, out_dir, digest)
    try:
        result = body(cfg, out_dir, run)
    except StageFailure as exc:
        logger.error("%s failed in stage %s: %s", cfg.experiment, exc.stage, exc.cause)
        _close_registry(run, exc.stage)
        raise
    _close_registry(run)
    result.files = ["config.txt", "manifest.txt"] + result.files
    return result


def map_seeds(fn, cfg, seeds):
    """``fn(cfg, seed)`` for every seed, in seed order."""
    if cfg.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers, initializer=django.setup) as pool:
            return list(pool.map(fn, repeat(cfg), seeds))
    return [fn(cfg, seed) for seed in seeds]


def aggregate(frames, metrics, index="episode"):
    """Mean and mean +/- 1.96 sd / sqrt(seeds) for each metric, by ``index``."""
    stacked = pd.concat(frames, keys=range(len(frames)), names=["seed_index", None])
    grouped = stacked.groupby(index)[metrics]
    mean = grouped.mean()
    counts = grouped.count()
    # A single seed has no spread; its interval collapses onto the mean.
    half = CI_Z * grouped.std(ddof=1).fillna(0.0) / np.sqrt(counts)
    out = pd.DataFrame(index=mean.index)
    for metric in metrics:
        out[f"{metric}_mean"] = mean[metric]
        out[f"{metric}_ci_low"] = mean[metric] - half[metric]
        out[f"{metric}_ci_high"] = mean[metric] + half[metric]
    return out.reset_index()


def write_curves(out_dir, name, frames, seeds, metrics=CURVE_METRICS, index="episode"):
    per_seed = pd.concat([f.assign(seed=s) for f, s in zip(frames, seeds)], ignore_index=True)
    per_seed.to_csv(out_dir / f"curves_{name}_seeds.csv", index=False)
    aggregate(frames, metrics, index).to_csv(out_dir / f"curves_{name}.csv", index=False)
    return [f"curves_{name}_seeds.csv", f"curves_{name}.csv"]


def _train(cfg, dataset, num_tasks, rng):
    policy = abstraction.build_policy_table(
        envs.num_actions(cfg.task), num_tasks, cfg.cluster_mode, cfg.budget, rng
    )
    return abstraction.train(dataset, policy, cfg.training_config(), rng)


# Single task

def single_task_seed(cfg, seed):
    rng = np.random.default_rng(seed)
    logger.info("single-task seed %d", seed)
    with stage("collect"):
        dataset = demo.collect_dataset([cfg.task], cfg.samples, cfg.sampler, rng)
    with stage("train"):
        model = _train(cfg, dataset, 1, rng)
    with stage("q_learning"):
        _, curve = agents.run_q_phi(model, cfg.task, cfg.episodes, cfg.agent_config(), rng)
    with stage("linear_q"):
        _, linear = agents.run_linear_q(cfg.task, cfg.episodes, cfg.agent_config(), rng)
    return {"qphi": curve.to_frame(), "linear": linear.to_frame(), "loss": model.loss_trace[-1]}


def _single_task_body(cfg, out_dir, run):
    seeds = cfg.seed_list()
    results = map_seeds(single_task_seed, cfg, seeds)
    with stage("write"):
        files = write_curves(out_dir, "qphi", [r["qphi"] for r in results], seeds)
        files += write_curves(out_dir, "linear", [r["linear"] for r in results], seeds)
    final = {
        "qphi_final_cum_reward": float(np.mean([r["qphi"]["cum_reward"].iloc[-1] for r in results])),
        "linear_final_cum_reward": float(np.mean([r["linear"]["cum_reward"].iloc[-1] for r in results])),
        "mean_training_loss": float(np.mean([r["loss"] for r in results])),
    }
    return RunResult(out_dir, files, final)


def run_single_task(cfg):
    return run_protocol(cfg, _single_task_body)


# Transfer

def audit_transfer(dataset, train_tasks, test_task):
    """The evaluation task must never have produced a training quadruple."""
    seen = {train_tasks[k] for k in np.unique(dataset.task_ids)}
    if test_task in seen:
        raise LabError(f"Held-out task {test_task.goal_corner} leaked into the training data.")
    return True


def _puddle_transfer_seed(cfg, seed):
    rng = np.random.default_rng(seed)
    family = cfg.family()
    held = int(rng.integers(len(family)))
    train_tasks, test_task = envs.hold_out(family, held)
    logger.info("transfer seed %d holds out goal %s", seed, test_task.goal_corner)
    with stage("collect"):
        dataset = demo.collect_dataset(train_tasks, cfg.samples, cfg.sampler, rng)
    with stage("audit"):
        audit_transfer(dataset, train_tasks, test_task)
    with stage("train"):
        model = _train(cfg, dataset, len(train_tasks), rng)
    with stage("q_learning"):
        _, curve = agents.run_q_phi(model, test_task, cfg.episodes, cfg.agent_config(), rng)
    with stage("linear_q"):
        _, linear = agents.run_linear_q(test_task, cfg.episodes, cfg.agent_config(), rng)
    held_out = test_task.goal_corner
    return {
        "qphi": curve.to_frame().assign(held_out=held_out),
        "linear": linear.to_frame().assign(held_out=held_out),
    }


def _extend(total, curve):
    total.returns.extend(curve.returns)
    total.steps.extend(curve.steps)
    total.successes.extend(curve.successes)


def _cart_pole_transfer_seed(cfg, seed):
    rng = np.random.default_rng(seed)
    base = replace(cfg.task, gravity=envs.BASE_GRAVITY)
    family = cfg.family()
    with stage("collect"):
        dataset = demo.collect_dataset([base], cfg.samples, cfg.sampler, rng)
    with stage("train"):
        model = _train(cfg, dataset, 1, rng)

    q = lq = None
    qphi, linear = agents.LearningCurve(), agents.LearningCurve()
    gravities = []
    hyper = cfg.agent_config()
    for r in range(cfg.rounds):
        task = family[int(rng.integers(len(family)))]
        logger.info("transfer seed %d round %d at gravity %g", seed, r, task.gravity)
        if cfg.reset_between_rounds:
            q = lq = None
        with stage("q_learning"):
            q, curve = agents.run_q_phi(model, task, cfg.round_episodes, hyper, rng, q)
        with stage("linear_q"):
            lq, lcurve = agents.run_linear_q(task, cfg.round_episodes, hyper, rng, lq)
        _extend(qphi, curve)
        _extend(linear, lcurve)
        gravities.extend([task.gravity] * cfg.round_episodes)

    rounds = np.repeat(np.arange(cfg.rounds), cfg.round_episodes)
    extra = {"round": rounds, "round_episode": np.tile(np.arange(cfg.round_episodes), cfg.rounds), "gravity": gravities}
    return {"qphi": qphi.to_frame().assign(**extra), "linear": linear.to_frame().assign(**extra)}


def _transfer_body(cfg, out_dir, run):
    seeds = cfg.seed_list()
    seed_fn = _puddle_transfer_seed if cfg.env_kind == envs.EnvKind.PUDDLE else _cart_pole_transfer_seed
    results = map_seeds(seed_fn, cfg, seeds)
    with stage("write"):
        files = write_curves(out_dir, "qphi", [r["qphi"] for r in results], seeds)
        files += write_curves(out_dir, "linear", [r["linear"] for r in results], seeds)
    summary = {
        "episodes_per_seed": len(results[0]["qphi"]),
        "qphi_final_success": float(np.mean([r["qphi"]["success"].iloc[-1] for r in results])),
    }
    return RunResult(out_dir, files, summary)


def run_transfer(cfg):
    if len(cfg.family()) < 2:
        raise ValueError("Transfer needs a family of at least two tasks.")
    return run_protocol(cfg, _transfer_body)


# Sample-size sweep

def sample_sweep_seed(cfg, seed):
    rows = []
    for n in cfg.sweep_sizes():
        rng = np.random.default_rng([seed, n])
        with stage("collect"):
            dataset = demo.collect_dataset([cfg.task], n, cfg.sampler, rng)
        with stage("train"):
            model = _train(cfg, dataset, 1, rng)
        with stage("q_learning"):
            _, curve = agents.run_q_phi(model, cfg.task, cfg.episodes, cfg.agent_config(), rng)
        rows.append({
            "n_samples": n,
            "final_return": curve.returns[-1],
            "success": float(curve.successes[-1]),
            "cum_reward": float(np.sum(curve.returns)),
        })
        logger.info("sweep seed %d N=%d final return %.3f", seed, n, curve.returns[-1])
    return pd.DataFrame(rows)


def sweep_trend(table):
    """Spearman rank correlation between N and the mean final return."""
    if len(table) < 2:
        return float("nan"), float("nan")
    result = stats.spearmanr(table["n_samples"], table["final_return_mean"])
    return float(result.statistic), float(result.pvalue)


def _sample_sweep_body(cfg, out_dir, run):
    seeds = cfg.seed_list()
    frames = map_seeds(sample_sweep_seed, cfg, seeds)
    metrics = ["final_return", "success", "cum_reward"]
    with stage("write"):
        pd.concat([f.assign(seed=s) for f, s in zip(frames, seeds)], ignore_index=True).to_csv(
            out_dir / "sweep_seeds.csv", index=False
        )
        table = aggregate(frames, metrics, index="n_samples")
        table.to_csv(out_dir / "sweep.csv", index=False)
        rho, pvalue = sweep_trend(table)
        summary = {"spearman_rho": rho, "spearman_pvalue": pvalue, "sizes": len(table)}
        (out_dir / "report.txt").write_text(dump_key_values(summary))
    return RunResult(out_dir, ["sweep_seeds.csv", "sweep.csv", "report.txt"], summary)


def run_sample_sweep(cfg):
    if cfg.env_kind != envs.EnvKind.PUDDLE:
        raise ValueError("The sample-size sweep runs on Puddle World only.")
    return run_protocol(cfg, _sample_sweep_body)


# Abstraction dump

def abstraction_grid(model, resolution):
    """Argmax cluster of every cell centre of a resolution x resolution grid over [0,1]^2."""
    if model.state_dim != 2:
        raise DimensionMismatch(f"Only 2-D abstractions can be dumped, this one is {model.state_dim}-D.")
    ticks = (np.arange(resolution) + 0.5) / resolution
    xs, ys = np.meshgrid(ticks, ticks, indexing="ij")
    points = np.column_stack([xs.ravel(), ys.ravel()])
    return pd.DataFrame({
        "x": points[:, 0],
        "y": points[:, 1],
        "cluster": abstraction.phi_map_batch(model, points),
    })


def neighborhood_agreement(grid, resolution):
    """Share of horizontally or vertically adjacent cell pairs in the same cluster."""
    clusters = grid["cluster"].to_numpy().reshape(resolution, resolution)
    same = np.sum(clusters[1:, :] == clusters[:-1, :]) + np.sum(clusters[:, 1:] == clusters[:, :-1])
    pairs = 2 * resolution * (resolution - 1)
    return float(same / pairs) if pairs else 1.0


def _abstraction_for_dump(cfg, rng):
    if cfg.model:
        return abstraction.load_model(cfg.model, state_dim=2, num_actions=4)
    family = cfg.family()
    held = envs.GoalCorner.values.index(cfg.task.goal_corner)
    train_tasks, _ = envs.hold_out(family, held)
    dataset = demo.collect_dataset(train_tasks, cfg.samples, cfg.sampler, rng)
    return _train(cfg, dataset, len(train_tasks), rng)


def _dump_body(cfg, out_dir, run):
    rng = np.random.default_rng(cfg.seed)
    files = []
    with stage("model"):
        model = _abstraction_for_dump(cfg, rng)
        if not cfg.model:
            abstraction.save_model(model, out_dir / "model.txt")
            abstraction.save_loss_trace(model, out_dir / "loss.csv")
            files += ["model.txt", "loss.csv"]
    with stage("dump"):
        grid = abstraction_grid(model, cfg.resolution)
        grid.to_csv(out_dir / "abstraction.csv", index=False)
    with stage("write"):
        summary = {
            "neighborhood_agreement": neighborhood_agreement(grid, cfg.resolution),
            "clusters_used": int(grid["cluster"].nunique()),
            "cells": len(grid),
        }
        (out_dir / "report.txt").write_text(dump_key_values(summary))
    return RunResult(out_dir, files + ["abstraction.csv", "report.txt"], summary)


def dump_abstraction(cfg):
    return run_protocol(cfg, _dump_body)


# Bound analysis

def _analysis_body(cfg, out_dir, run):
    rng = np.random.default_rng(cfg.seed)
    task = cfg.task
    with stage("collect"):
        dataset = demo.collect_dataset([task], cfg.samples, cfg.sampler, rng)
    if cfg.model:
        with stage("model"):
            model = abstraction.load_model(
                cfg.model, envs.state_dim(task), envs.num_actions(task), task.env_kind
            )
            if model.num_tasks != 1:
                # The bounds compare against a single task's expert.
                raise DimensionMismatch(f"{cfg.model} was trained on {model.num_tasks} tasks; analysis needs 1.")
    else:
        with stage("train"):
            model = _train(cfg, dataset, 1, rng)
    expert = demo.expert_distribution(task)
    states = dataset.states[:cfg.analysis_states]

    with stage("measure_delta"):
        measurement = analysis.measure_delta(model, expert, states)
    with stage("grid"):
        grid = analysis.solve_grid_mdp(task, cfg.resolution, cfg.gamma)
    with stage("lemma"):
        check = analysis.verify_lemma1(model, expert, task, grid)
    with stage("rademacher"):
        rad = analysis.empirical_rademacher(
            states[:cfg.rademacher_samples], model.num_clusters, cfg.rademacher_draws, cfg.rademacher_config(), rng
        )
    with stage("theorem"):
        bound = analysis.theorem_bound(measurement.delta, rad.estimate, len(states), cfg.delta_prob)

    report = analysis.BoundReport(
        delta=measurement.delta,
        mean_l1=measurement.mean_l1,
        rademacher_estimate=rad.estimate,
        n=len(states),
        delta_prob=cfg.delta_prob,
        theorem_bound=bound.bound,
        theorem_bound_pinsker=bound.pinsker_bound,
        lemma_bound=check.lemma_bound,
        measured_value_gap=check.measured_value_gap,
        lemma_holds=check.holds,
        grid_l1=check.k,
    )
    with stage("write"):
        report.write(out_dir / "report.txt")
        measurement.records.to_csv(out_dir / "pinsker_states.csv", index=False)
        pd.DataFrame({"draw": range(len(rad.draws)), "fit": [d.fit for d in rad.draws]}).to_csv(
            out_dir / "rademacher_draws.csv", index=False
        )
    if run is not None:
        _record_report(report, run)
    return RunResult(out_dir, ["report.txt", "pinsker_states.csv", "rademacher_draws.csv"], report.as_dict())


def run_analysis(cfg):
    if cfg.env_kind != envs.EnvKind.PUDDLE:
        raise ValueError("Bound analysis needs the Puddle World grid oracle.")
    return run_protocol(cfg, _analysis_body)


PROTOCOLS = {
    Experiment.SINGLE_TASK: run_single_task,
    Experiment.TRANSFER: run_transfer,
    Experiment.SAMPLE_SWEEP: run_sample_sweep,
    Experiment.ANALYSIS: run_analysis,
    Experiment.DUMP_ABSTRACTION: dump_abstraction,
}


def run_experiment(cfg):
    return PROTOCOLS[cfg.experiment](cfg)
