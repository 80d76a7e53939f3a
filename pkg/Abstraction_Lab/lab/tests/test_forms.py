import tempfile
from pathlib import Path

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from lab import envs
from lab.abstraction import ClusterMode
from lab.agents import TieBreak
from lab.demo import Sampler
from lab.forms import (
    ExperimentConfigForm,
    TaskConfigForm,
    dump_key_values,
    dump_task_config,
    load_experiment_config,
    load_task_config,
    parse_key_values,
)
from lab.models import Experiment


class KeyValueTests(SimpleTestCase):
    def test_comments_and_blank_lines(self):
        text = "# a run\nenv_kind = CartPole\n\ngravity = 5   # lighter\n"
        self.assertEqual(parse_key_values(text), {"env_kind": "CartPole", "gravity": "5"})

    def test_line_without_equals(self):
        with self.assertRaisesMessage(ValidationError, "line 2"):
            parse_key_values("env_kind = CartPole\ngravity 5\n")

    def test_duplicate_key(self):
        with self.assertRaises(ValidationError):
            parse_key_values("seed = 1\nseed = 2\n")

    def test_dump(self):
        self.assertEqual(dump_key_values({"a": 1, "b": "x"}), "a = 1\nb = x\n")


class TaskConfigFormTests(SimpleTestCase):
    def test_puddle_defaults(self):
        form = TaskConfigForm({})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.task(), envs.puddle_task())

    def test_cart_pole_defaults(self):
        form = TaskConfigForm({"env_kind": "CartPole", "gravity": "12"})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.task(), envs.cart_pole_task(gravity=12.0))

    def test_puddle_rects(self):
        form = TaskConfigForm({"puddle_rects": "0.1,0.1,0.2,0.2; 0.5,0.5,0.7,0.9"})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.task().puddle_rects, ((0.1, 0.1, 0.2, 0.2), (0.5, 0.5, 0.7, 0.9)))
        empty = TaskConfigForm({"puddle_rects": ""})
        self.assertTrue(empty.is_valid(), empty.errors)
        self.assertEqual(empty.task().puddle_rects, ())

    def test_invalid_values(self):
        for data in (
            {"gravity": "-1"},
            {"noise_std": "-0.5"},
            {"horizon": "0"},
            {"goal_corner": "XX"},
            {"puddle_rects": "0.1,0.1,1.5,0.2"},
            {"puddle_rects": "0.1,0.1,0.2"},
        ):
            self.assertFalse(TaskConfigForm(data).is_valid(), data)

    def test_unknown_key(self):
        form = TaskConfigForm({"gravty": "5"})
        self.assertFalse(form.is_valid())
        self.assertIn("gravty", str(form.non_field_errors()))

    def test_file_round_trip(self):
        task = envs.puddle_task("BL", noise_std=0.02, puddle_rects=[(0.2, 0.2, 0.3, 0.4)])
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "task.txt"
            path.write_text(dump_task_config(task))
            self.assertEqual(load_task_config(path), task)


class ExperimentConfigFormTests(SimpleTestCase):
    def config(self, **data):
        form = ExperimentConfigForm(data)
        self.assertTrue(form.is_valid(), form.errors)
        return form.config()

    def test_single_task_protocols(self):
        puddle = self.config(experiment=Experiment.SINGLE_TASK)
        self.assertEqual((puddle.seeds, puddle.episodes, puddle.samples), (25, 100, 4000))
        cart = self.config(experiment=Experiment.SINGLE_TASK, env_kind="CartPole")
        self.assertEqual((cart.seeds, cart.episodes, cart.samples), (20, 50, 1000))
        self.assertEqual(cart.task.horizon, 200)
        self.assertEqual(puddle.sampler, Sampler.UNIFORM)
        self.assertEqual(cart.sampler, Sampler.ON_POLICY)

    def test_transfer_protocols(self):
        puddle = self.config(experiment=Experiment.TRANSFER)
        self.assertEqual(puddle.episodes, 250)
        self.assertEqual(puddle.cluster_mode, ClusterMode.BUDGET)
        self.assertEqual(puddle.budget, 81)
        cart = self.config(experiment=Experiment.TRANSFER, env_kind="CartPole", gravities="5, 8")
        self.assertEqual((cart.rounds, cart.round_episodes), (20, 200))
        self.assertEqual([t.gravity for t in cart.family()], [5.0, 8.0])
        self.assertEqual(cart.sampler, Sampler.ON_POLICY)
        self.assertEqual(puddle.sampler, Sampler.UNIFORM)

    def test_learning_protocols_break_ties_at_random(self):
        cfg = self.config(experiment=Experiment.SINGLE_TASK)
        self.assertEqual(cfg.agent_config().tie_break, TieBreak.RANDOM)
        lowest = self.config(experiment=Experiment.SINGLE_TASK, tie_break="Lowest")
        self.assertEqual(lowest.agent_config().tie_break, TieBreak.LOWEST)
        self.assertFalse(ExperimentConfigForm({"experiment": Experiment.SINGLE_TASK, "tie_break": "First"}).is_valid())

    def test_sweep_sizes(self):
        cfg = self.config(experiment=Experiment.SAMPLE_SWEEP)
        self.assertEqual(cfg.sweep_sizes(), [1, 501, 1001, 1501, 2001, 2501, 3001, 3501, 4001, 4501])
        self.assertEqual(cfg.seeds, 10)

    @override_settings(LAB={
        "SEED": 7, "WORKERS": 1, "OUTPUT_ROOT": Path("runs"), "GAMMA": 0.95, "ALPHA": 0.01,
        "EPSILON": 0.2, "LR": 1e-2, "HIDDEN": 32, "LAYERS": 1, "BATCH_SIZE": 16, "EPOCHS": 10,
        "EARLY_STOP_TOL": 1e-4, "EARLY_STOP_PATIENCE": 3, "RECORD_RUNS": False,
    })
    def test_settings_supply_the_hyperparameters(self):
        cfg = self.config(experiment=Experiment.SINGLE_TASK)
        self.assertEqual((cfg.seed, cfg.gamma, cfg.hidden, cfg.layers), (7, 0.95, 32, 1))
        self.assertEqual(cfg.training_config().patience, 3)
        self.assertEqual(cfg.agent_config().epsilon, 0.2)

    def test_protocol_constraints(self):
        for data in (
            {"experiment": Experiment.SAMPLE_SWEEP, "env_kind": "CartPole"},
            {"experiment": Experiment.DUMP_ABSTRACTION, "env_kind": "CartPole"},
            {"experiment": Experiment.ANALYSIS, "env_kind": "CartPole"},
            {"experiment": Experiment.ANALYSIS, "delta_prob": "1.5"},
            {"experiment": Experiment.ANALYSIS, "resolution": "10"},
            {"experiment": Experiment.SINGLE_TASK, "seeds": "0"},
            {"experiment": Experiment.SINGLE_TASK, "cluster_mode": "Budget"},
            {"experiment": Experiment.TRANSFER, "env_kind": "CartPole", "gravities": "5"},
            {"experiment": Experiment.ANALYSIS, "model": "/no/such/model.txt"},
        ):
            self.assertFalse(ExperimentConfigForm(data).is_valid(), data)

    def test_snapshot_reloads_to_the_same_config(self):
        cfg = self.config(experiment=Experiment.TRANSFER, env_kind="CartPole", gravities="5,6", include_base_gravity="true")
        again = ExperimentConfigForm(parse_key_values(dump_key_values(cfg.snapshot())))
        self.assertTrue(again.is_valid(), again.errors)
        self.assertEqual(again.config(), cfg)
        self.assertTrue(cfg.include_base_gravity)


class LoadExperimentConfigTests(SimpleTestCase):
    def test_overrides_win(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.txt"
            path.write_text("episodes = 40\nseeds = 3\n")
            form = load_experiment_config(Experiment.SINGLE_TASK, path, {"seeds": 2, "episodes": None})
        cfg = form.config()
        self.assertEqual((cfg.seeds, cfg.episodes), (2, 40))

    def test_experiment_key_must_agree(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.txt"
            path.write_text("experiment = Transfer\n")
            with self.assertRaises(ValidationError):
                load_experiment_config(Experiment.SINGLE_TASK, path)

    def test_missing_file(self):
        with self.assertRaises(ValidationError):
            load_experiment_config(Experiment.SINGLE_TASK, "/no/such/config.txt")
