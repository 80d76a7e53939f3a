from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from lab.exceptions import StageFailure
from lab.experiments import run_experiment
from lab.forms import load_experiment_config

CONFIG_ERROR = 2
STAGE_FAILURE = 3


class ExperimentCommand(BaseCommand):
    """Shared flags and exit codes for the experiment verbs."""

    experiment = None

    def add_arguments(self, parser):
        parser.add_argument("--config", help="Flat key = value config file.")
        parser.add_argument("--seed", type=int, help="Base seed; seed i runs with seed + i.")
        parser.add_argument("--out", help="Run directory (created if missing).")
        parser.add_argument("--seeds", type=int, help="Number of seeds.")
        parser.add_argument("--episodes", type=int, help="Episodes per seed.")
        parser.add_argument("--workers", type=int, help="Worker processes for the seeds.")

    def overrides(self, options):
        return {
            "seed": options["seed"],
            "seeds": options["seeds"],
            "episodes": options["episodes"],
            "workers": options["workers"],
        }

    def handle(self, *args, **options):
        try:
            form = load_experiment_config(self.experiment, options["config"], self.overrides(options))
        except ValidationError as exc:
            raise CommandError(f"Invalid config: {'; '.join(exc.messages)}", returncode=CONFIG_ERROR)
        cfg = form.config(out_dir=options["out"])

        try:
            result = run_experiment(cfg)
        except StageFailure as exc:
            raise CommandError(f"Stage '{exc.stage}' failed: {exc.cause}", returncode=STAGE_FAILURE)

        self.stdout.write(self.style.SUCCESS(f"{cfg.experiment} finished, results in {result.out_dir}"))
        for name in result.files:
            self.stdout.write(f"  {name}")
        for key, value in result.summary.items():
            self.stdout.write(f"{key} = {value}")
