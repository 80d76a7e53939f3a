from lab.management.base import ExperimentCommand
from lab.models import Experiment


class Command(ExperimentCommand):
    help = "Train phi on one task, then learn that task with Q-learning-phi and Linear-Q."
    experiment = Experiment.SINGLE_TASK
