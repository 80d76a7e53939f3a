from dataclasses import fields
from pathlib import Path

from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from . import envs
from .abstraction import ClusterMode
from .agents import TieBreak
from .demo import Sampler
from .models import Experiment


def parse_key_values(text):
    """Flat ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValidationError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        if key in values:
            raise ValidationError(f"line {number}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def dump_key_values(values):
    return "".join(f"{key} = {value}\n" for key, value in values.items())


def parse_rects(text):
    rects = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            rect = tuple(float(v) for v in chunk.split(","))
        except ValueError as exc:
            raise ValidationError(f"Puddle {chunk!r} is not a list of numbers.") from exc
        if len(rect) != 4:
            raise ValidationError(f"Puddle {chunk!r} needs exactly x0,y0,x1,y1.")
        rects.append(rect)
    return tuple(rects)


def format_rects(rects):
    return "; ".join(",".join(format(v, "g") for v in rect) for rect in rects)


def parse_floats(text):
    try:
        return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    except ValueError as exc:
        raise ValidationError(f"{text!r} is not a comma-separated list of numbers.") from exc


TASK_KEYS = ("env_kind", "goal_corner", "gravity", "noise_std", "horizon", "puddle_rects")


class TaskConfigForm(forms.Form):
    env_kind = forms.ChoiceField(choices=envs.EnvKind.choices, required=False)
    goal_corner = forms.ChoiceField(choices=envs.GoalCorner.choices, required=False)
    gravity = forms.FloatField(required=False)
    noise_std = forms.FloatField(required=False)
    horizon = forms.IntegerField(required=False)
    puddle_rects = forms.CharField(required=False, strip=True)

    def clean_puddle_rects(self):
        # An absent key keeps the default puddles; an empty value means none.
        if "puddle_rects" not in self.data:
            return envs.DEFAULT_PUDDLES
        return parse_rects(self.cleaned_data["puddle_rects"])

    def clean(self):
        cleaned = super().clean()
        unknown = sorted(set(self.data) - set(self.fields))
        if unknown:
            raise ValidationError(f"Unknown config key(s): {', '.join(unknown)}")

        kind = cleaned.get("env_kind") or envs.EnvKind.PUDDLE
        cart_pole = kind == envs.EnvKind.CART_POLE
        defaults = {
            "goal_corner": envs.GoalCorner.TR,
            "gravity": envs.BASE_GRAVITY,
            "noise_std": 0.0 if cart_pole else 0.01,
            "horizon": 200 if cart_pole else 500,
        }
        cleaned["env_kind"] = kind
        for key, value in defaults.items():
            if cleaned.get(key) in (None, ""):
                cleaned[key] = value

        if "puddle_rects" in cleaned:
            task = envs.TaskConfig(**{key: cleaned[key] for key in TASK_KEYS})
            try:
                task.validate()
            except ValidationError as exc:
                for field, messages in exc.message_dict.items():
                    self.add_error(field, messages)
        return cleaned

    def task(self):
        return envs.TaskConfig(**{key: self.cleaned_data[key] for key in TASK_KEYS})


def load_task_config(path):
    with open(path) as fh:
        form = TaskConfigForm(parse_key_values(fh.read()))
    if not form.is_valid():
        raise ValidationError(form.errors.as_text())
    return form.task()


def dump_task_config(task):
    return dump_key_values({
        "env_kind": task.env_kind,
        "goal_corner": task.goal_corner,
        "gravity": format(task.gravity, "g"),
        "noise_std": format(task.noise_std, "g"),
        "horizon": task.horizon,
        "puddle_rects": format_rects(task.puddle_rects),
    })


# Protocol defaults per (experiment, environment). Anything not listed here
# falls back to COMMON_DEFAULTS and the LAB settings.
PROTOCOL_DEFAULTS = {
    (Experiment.SINGLE_TASK, envs.EnvKind.PUDDLE): {"seeds": 25, "episodes": 100, "samples": 4000},
    (Experiment.SINGLE_TASK, envs.EnvKind.CART_POLE): {
        "seeds": 20, "episodes": 50, "samples": 1000, "sampler": Sampler.ON_POLICY,
    },
    (Experiment.TRANSFER, envs.EnvKind.PUDDLE): {
        "seeds": 25, "episodes": 250, "samples": 4000,
        "cluster_mode": ClusterMode.BUDGET, "budget": 81,
    },
    (Experiment.TRANSFER, envs.EnvKind.CART_POLE): {
        "seeds": 20, "samples": 1000, "sampler": Sampler.ON_POLICY, "rounds": 20, "round_episodes": 200,
    },
    (Experiment.SAMPLE_SWEEP, envs.EnvKind.PUDDLE): {"seeds": 10, "episodes": 100},
    (Experiment.ANALYSIS, envs.EnvKind.PUDDLE): {"seeds": 1, "samples": 4000},
    (Experiment.DUMP_ABSTRACTION, envs.EnvKind.PUDDLE): {"seeds": 1, "samples": 4000, "resolution": 100},
}

COMMON_DEFAULTS = {
    "seeds": 1,
    "episodes": 100,
    "samples": 4000,
    "sampler": Sampler.UNIFORM,
    "cluster_mode": ClusterMode.ACTION_TUPLE,
    "include_base_gravity": False,
    "rounds": 20,
    "round_episodes": 200,
    "reset_between_rounds": False,
    "sweep_start": 1,
    "sweep_stop": 4501,
    "sweep_step": 500,
    "resolution": 20,
    "analysis_states": 1000,
    "rademacher_samples": 200,
    "rademacher_draws": 10,
    "rademacher_restarts": 3,
    "rademacher_steps": 200,
    "delta_prob": 0.05,
    "model": "",
    "normalize_features": False,
    "tie_break": TieBreak.RANDOM,
}


def _lab_defaults():
    lab = settings.LAB
    return {
        "lr": lab["LR"],
        "alpha": lab["ALPHA"],
        "epsilon": lab["EPSILON"],
        "gamma": lab["GAMMA"],
        "hidden": lab["HIDDEN"],
        "layers": lab["LAYERS"],
        "epochs": lab["EPOCHS"],
        "batch_size": lab["BATCH_SIZE"],
        "seed": lab["SEED"],
        "workers": lab["WORKERS"],
    }


class ExperimentConfigForm(TaskConfigForm):
    experiment = forms.ChoiceField(choices=Experiment.choices)
    seeds = forms.IntegerField(required=False, min_value=1)
    episodes = forms.IntegerField(required=False, min_value=1)
    samples = forms.IntegerField(required=False, min_value=1)
    sampler = forms.ChoiceField(choices=Sampler.choices, required=False)
    lr = forms.FloatField(required=False, min_value=0)
    alpha = forms.FloatField(required=False, min_value=0, max_value=1)
    epsilon = forms.FloatField(required=False, min_value=0, max_value=1)
    gamma = forms.FloatField(required=False, min_value=0, max_value=1)
    cluster_mode = forms.ChoiceField(choices=ClusterMode.choices, required=False)
    budget = forms.IntegerField(required=False, min_value=2)
    hidden = forms.IntegerField(required=False, min_value=1)
    layers = forms.IntegerField(required=False, min_value=0)
    epochs = forms.IntegerField(required=False, min_value=1)
    batch_size = forms.IntegerField(required=False, min_value=1)
    gravities = forms.CharField(required=False)
    include_base_gravity = forms.NullBooleanField(required=False)
    rounds = forms.IntegerField(required=False, min_value=1)
    round_episodes = forms.IntegerField(required=False, min_value=1)
    reset_between_rounds = forms.NullBooleanField(required=False)
    sweep_start = forms.IntegerField(required=False, min_value=1)
    sweep_stop = forms.IntegerField(required=False, min_value=1)
    sweep_step = forms.IntegerField(required=False, min_value=1)
    resolution = forms.IntegerField(required=False, min_value=1)
    analysis_states = forms.IntegerField(required=False, min_value=1)
    rademacher_samples = forms.IntegerField(required=False, min_value=1)
    rademacher_draws = forms.IntegerField(required=False, min_value=1)
    rademacher_restarts = forms.IntegerField(required=False, min_value=1)
    rademacher_steps = forms.IntegerField(required=False, min_value=0)
    delta_prob = forms.FloatField(required=False)
    model = forms.CharField(required=False)
    seed = forms.IntegerField(required=False, min_value=0)
    workers = forms.IntegerField(required=False, min_value=1)
    normalize_features = forms.NullBooleanField(required=False)
    tie_break = forms.ChoiceField(choices=TieBreak.choices, required=False)

    def clean_gravities(self):
        text = self.cleaned_data["gravities"]
        if not text:
            return None
        gravities = parse_floats(text)
        if any(g <= 0 for g in gravities):
            raise ValidationError("Gravities must be positive.")
        return gravities

    def clean(self):
        cleaned = super().clean()
        experiment = cleaned.get("experiment")
        if not experiment:
            return cleaned
        kind = cleaned["env_kind"]

        defaults = {**COMMON_DEFAULTS, **_lab_defaults()}
        defaults.update(PROTOCOL_DEFAULTS.get((experiment, kind), {}))
        for key, value in defaults.items():
            if cleaned.get(key) in (None, ""):
                cleaned[key] = value

        if experiment in (Experiment.SAMPLE_SWEEP, Experiment.DUMP_ABSTRACTION) and kind != envs.EnvKind.PUDDLE:
            self.add_error("env_kind", f"{experiment} needs the 2-D Puddle World.")
        if experiment == Experiment.ANALYSIS and kind != envs.EnvKind.PUDDLE:
            self.add_error("env_kind", "The grid oracle only models Puddle World.")
        if experiment == Experiment.ANALYSIS and round(cleaned["resolution"] * envs.PUDDLE_STEP, 9) % 1:
            self.add_error("resolution", "The grid oracle needs a resolution that is a multiple of 20.")
        if not 0 < cleaned["delta_prob"] < 1:
            self.add_error("delta_prob", "delta_prob must lie in (0, 1).")
        if not 0 < cleaned["gamma"] < 1:
            self.add_error("gamma", "gamma must lie in (0, 1).")
        if cleaned["sweep_stop"] < cleaned["sweep_start"]:
            self.add_error("sweep_stop", "sweep_stop must not be below sweep_start.")
        if cleaned["cluster_mode"] == ClusterMode.BUDGET and not cleaned.get("budget"):
            self.add_error("budget", "Budget mode needs a budget.")
        if experiment == Experiment.TRANSFER:
            family = envs.task_family(kind, cleaned.get("gravities"), cleaned["include_base_gravity"])
            if len(family) < 2:
                self.add_error("gravities", "Transfer needs a family of at least two tasks.")
        if cleaned["model"]:
            if not Path(cleaned["model"]).is_file():
                self.add_error("model", f"Model file {cleaned['model']} does not exist.")
        return cleaned

    def config(self, out_dir=None):
        from .experiments import ExperimentConfig

        data = self.cleaned_data
        values = {
            f.name: data[f.name]
            for f in fields(ExperimentConfig)
            if f.name not in ("task", "out_dir") and f.name in data
        }
        return ExperimentConfig(task=self.task(), out_dir=out_dir, **values)


def load_experiment_config(experiment, path=None, overrides=None):
    """Read an experiment config file, apply command-line overrides, validate."""
    values = {}
    if path:
        try:
            with open(path) as fh:
                values = parse_key_values(fh.read())
        except OSError as exc:
            raise ValidationError(f"Cannot read config {path}: {exc.strerror}") from exc
    if values.get("experiment") not in (None, experiment):
        raise ValidationError(f"{path} configures {values['experiment']}, not {experiment}.")
    values["experiment"] = experiment
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})
    form = ExperimentConfigForm(values)
    if not form.is_valid():
        raise ValidationError(form.errors.as_text())
    return form
