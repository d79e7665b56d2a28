"""Experiment harness: datasets, configs, runs, sweeps."""

from .config import ConfigError, ExperimentConfig
from .data import Dataset, downsample_image, load_csv, synth_blobs
from .runner import emit_plot_data, run_compare, run_experiment, run_sweep

__all__ = [
    "ConfigError", "Dataset", "ExperimentConfig", "downsample_image", "emit_plot_data", "load_csv",
    "run_compare", "run_experiment", "run_sweep", "synth_blobs",
]
