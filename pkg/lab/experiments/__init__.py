"""
Experiment catalog - every runnable kind mapped to its implementation
"""

from typing import Callable, Dict

from lab.experiments import commands, contrastive, geometry_runs, probe_runs, sweeps, theorem_run
from lab.models.config import EXPERIMENT_KINDS

Experiment = Callable[..., dict]

# Experiment kinds accepted in a config's "kind"
EXPERIMENTS: Dict[str, Experiment] = {}
EXPERIMENTS.update(geometry_runs.experiments)
EXPERIMENTS.update(probe_runs.experiments)
EXPERIMENTS.update(sweeps.experiments)
EXPERIMENTS.update(theorem_run.experiments)
EXPERIMENTS.update(contrastive.experiments)

# Plumbing commands that take extra parameters
COMMANDS: Dict[str, Experiment] = dict(commands.commands)

_missing = set(EXPERIMENT_KINDS) - set(EXPERIMENTS)
if _missing:
    raise ImportError(f"experiment kinds without implementation: {sorted(_missing)}")


def get_experiment(name: str) -> Experiment:
    if name in COMMANDS:
        return COMMANDS[name]
    if name in EXPERIMENTS:
        return EXPERIMENTS[name]
    raise KeyError(f"unknown experiment {name!r}; available: {', '.join(sorted(EXPERIMENTS) + sorted(COMMANDS))}")
