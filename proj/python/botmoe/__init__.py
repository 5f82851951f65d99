"""Community-aware mixture-of-experts social bot detection."""

from ._core import (
    Dataset,
    Model,
    TrainingDiverged,
    assignment_purity,
    balance_loss,
    check_config,
    cv_squared,
    gate,
    generate_world,
    load_checkpoint,
    load_dataset,
    manipulate,
    run,
    smooth_load,
    spearman,
    train,
)

__all__ = [
    "Dataset",
    "Model",
    "TrainingDiverged",
    "assignment_purity",
    "balance_loss",
    "check_config",
    "cv_squared",
    "gate",
    "generate_world",
    "load_checkpoint",
    "load_dataset",
    "manipulate",
    "run",
    "smooth_load",
    "spearman",
    "train",
]
