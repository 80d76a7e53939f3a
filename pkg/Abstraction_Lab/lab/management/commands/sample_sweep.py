from lab.management.base import ExperimentCommand
from lab.models import Experiment


class Command(ExperimentCommand):
    help = "Final Q-learning-phi return as a function of the number of training samples."
    experiment = Experiment.SAMPLE_SWEEP
