from lab.management.base import ExperimentCommand
from lab.models import Experiment


class Command(ExperimentCommand):
    help = "Write the argmax cluster of every cell of a grid over Puddle World."
    experiment = Experiment.DUMP_ABSTRACTION

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--model", help="Saved model to dump; trains one when omitted.")
        parser.add_argument("--resolution", type=int, help="Cells per side.")

    def overrides(self, options):
        return {**super().overrides(options), "model": options["model"], "resolution": options["resolution"]}
