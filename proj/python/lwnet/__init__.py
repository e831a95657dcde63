"""Lightweight U-Net / W-Net retinal vessel segmentation."""

from ._lwnet import (
    DataError,
    Model,
    count_params,
    dice_mcc,
    num_threads,
    optimal_threshold,
    parameter_breakdown,
    roc_auc,
    run_cli,
    set_num_threads,
    synth_sample,
)

__all__ = [
    "DataError",
    "Model",
    "count_params",
    "dice_mcc",
    "num_threads",
    "optimal_threshold",
    "parameter_breakdown",
    "roc_auc",
    "run_cli",
    "set_num_threads",
    "synth_sample",
]
