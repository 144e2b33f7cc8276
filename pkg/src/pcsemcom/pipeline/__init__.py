"""Training, evaluation sweeps, configuration and the command line."""

from .config import ExperimentConfig, PRESETS, load_config, parse_config, render_config, save_config
from .model import SemComModel
from .training import train_from_scratch, train_stage1, train_stage2

__all__ = [
    "ExperimentConfig", "PRESETS", "SemComModel", "load_config", "parse_config", "render_config",
    "save_config", "train_from_scratch", "train_stage1", "train_stage2",
]
