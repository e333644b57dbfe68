"""Experiment orchestration: config files, stage running, evaluation, plots.

The subpackage ties the training modules into a reproducible command-line
workflow. Everything an experiment does flows from one config seed, so a
re-run with the same config reproduces every artifact byte for byte.
"""

from .config import (
    ExperimentConfig,
    PipelineError,
    default_config,
    load_config,
    parse_config,
)
from .evaluate import EvalReport, evaluate_checkpoints
from .metrics import METRICS_HEADER, read_metrics, rows_to_csv, write_metrics
from .plotsvg import plot_csv_file, render_plot
from .stages import (
    STAGES,
    ConfigHashWarning,
    StageResult,
    checkpoint_file,
    metrics_file,
    run_pipeline,
    run_stage,
)

__all__ = [
    "ExperimentConfig",
    "PipelineError",
    "default_config",
    "load_config",
    "parse_config",
    "EvalReport",
    "evaluate_checkpoints",
    "METRICS_HEADER",
    "read_metrics",
    "rows_to_csv",
    "write_metrics",
    "plot_csv_file",
    "render_plot",
    "STAGES",
    "ConfigHashWarning",
    "StageResult",
    "checkpoint_file",
    "metrics_file",
    "run_pipeline",
    "run_stage",
]
