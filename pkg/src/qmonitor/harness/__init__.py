"""Experiment configuration, built-in recipes, ensemble runner and CLI."""

from .config import ConfigError, ExperimentConfig
from .csvio import read_csv, write_csv
from .recipes import available_recipes, built_in_recipes, recipe_runs
from .runner import EnsembleStats, RunResult, run_experiment

__all__ = [
    "ConfigError", "EnsembleStats", "ExperimentConfig", "RunResult", "available_recipes",
    "built_in_recipes", "read_csv", "recipe_runs", "run_experiment", "write_csv",
]
