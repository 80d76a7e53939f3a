from lab.management.base import ExperimentCommand
from lab.models import Experiment


class Command(ExperimentCommand):
    help = "Train phi on part of a task family and learn the unseen tasks with it."
    experiment = Experiment.TRANSFER
