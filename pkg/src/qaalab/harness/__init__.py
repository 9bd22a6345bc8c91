"""Experiment plumbing: datasets, model container, transfer reports, orchestration and CLI."""

from .data import Dataset, DatasetError, IDXFormatError, load_idx, synth_dataset, write_idx
from .evaluate import TransferCell, TransferReport, evaluate_transfer
from .experiment import ConfigError, ExperimentConfig, run_experiment
from .serialize import ChecksumError, ContainerError, VersionError, load_model, save_model

__all__ = ["Dataset", "DatasetError", "IDXFormatError", "load_idx", "synth_dataset", "write_idx",
           "TransferCell", "TransferReport", "evaluate_transfer", "ConfigError", "ExperimentConfig",
           "run_experiment", "ChecksumError", "ContainerError", "VersionError", "load_model", "save_model"]
