"""Experiment driver: configuration, the end-to-end pipeline, reports and the CLI."""
from .config import DESK, PAPER, PRESETS, ExperimentConfig, load_config, parse_config
from .experiment import (ResultRow, ResultTable, audit_split_isolation, evaluate, load_data, read_table, rmse,
                         run_experiment, train)
from .report import (REFERENCE_BASELINE_RMSE, REFERENCE_BEST_GRID_CELL_RMSE, REFERENCE_BEST_RMSE,
                     emit_report)
