"""Run an experiment verb: ``python main.py single-task --config run.txt``.

The verbs forward to the lab's management commands, so ``main.py transfer``
and ``manage.py transfer`` behave the same.
"""
import os
import sys
from pathlib import Path

PROJECT_DIR = Path(__file__).resolve().parent / "Abstraction_Lab"

VERBS = {
    "single-task": "single_task",
    "transfer": "transfer",
    "sample-sweep": "sample_sweep",
    "analysis": "analysis",
    "dump-abstraction": "dump_abstraction",
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in VERBS:
        print(f"usage: main.py {{{','.join(VERBS)}}} [--config PATH] [--seed N] [--out DIR] "
              "[--seeds N] [--episodes N]", file=sys.stderr)
        return 2

    sys.path.insert(0, str(PROJECT_DIR))
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "Abstraction_Lab.settings")
    from django.core.management import execute_from_command_line

    execute_from_command_line(["main.py", VERBS[argv[0]], *argv[1:]])
    return 0


if __name__ == "__main__":
    sys.exit(main())
