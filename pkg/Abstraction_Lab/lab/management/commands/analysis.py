from lab.management.base import ExperimentCommand
from lab.models import Experiment


class Command(ExperimentCommand):
    help = "Measure the policy gap and certify the value-loss and generalization bounds."
    experiment = Experiment.ANALYSIS

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--model", help="Analyse a saved model instead of training one.")

    def overrides(self, options):
        return {**super().overrides(options), "model": options["model"]}
