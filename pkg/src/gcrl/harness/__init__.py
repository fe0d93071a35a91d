"""Metrics, experiment configs, record files, reports and the command line."""

from .config import DEFAULT_THRESHOLDS, ExperimentConfig, load_config
from .metrics import (MetricsSummary, auc_at_n, bootstrap_ci, final_return, smooth, steps_to_threshold,
                      window_variance)
from .records import read_record, write_record

__all__ = ["DEFAULT_THRESHOLDS", "ExperimentConfig", "MetricsSummary", "auc_at_n", "bootstrap_ci",
           "final_return", "load_config", "read_record", "smooth", "steps_to_threshold", "window_variance",
           "write_record"]
