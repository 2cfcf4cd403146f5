"""Finetuning harness for one-shot pruning-quantization allocations.

Trains a toy CNN under a frozen compression operator loaded from the
allocation engine's artifacts: forward passes use Ŵ = M ∘ Q(W), gradients
reach W via the straight-through estimator, masks and steps never change.
"""

from .export import export_weights, model_tensors
from .loop import (
    EpochRow,
    FinetuneConfig,
    accuracy_log_csv,
    apply_allocation,
    evaluate,
    finetune,
    load_allocations,
    train_baseline,
)
from .model import DATASETS, WEIGHT_LAYERS, ToyConvNet, digits_dataset
from .ste import hard_quantize, masked_quantize

__version__ = "0.1.0"

__all__ = [
    "ToyConvNet",
    "WEIGHT_LAYERS",
    "DATASETS",
    "digits_dataset",
    "export_weights",
    "model_tensors",
    "hard_quantize",
    "masked_quantize",
    "FinetuneConfig",
    "EpochRow",
    "load_allocations",
    "apply_allocation",
    "evaluate",
    "train_baseline",
    "finetune",
    "accuracy_log_csv",
    "__version__",
]
