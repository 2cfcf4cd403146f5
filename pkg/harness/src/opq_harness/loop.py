"""Finetuning loop with frozen masks and quantization steps.

The allocation artifacts are loaded once, checked against the current weights'
content hash, and never modified: the loop trains W underneath a fixed Ŵ =
M ∘ Q(W) forward. Gradients reach W through the straight-through estimator
and are zeroed at pruned positions, so pruned raw weights are bit-frozen for
the whole run (weight decay is applied manually under the mask for the same
reason). Two-stage mode spends a fixed epoch budget on the prune-only
operator before switching the quantizer on; both stages land in the log.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from opq.errors import ComputationError, ValidationError
from opq.prune_alloc import PruningAllocation
from opq.quant_alloc import QuantAllocation
from opq.tensor_store import load_artifact

from .export import model_tensors
from .model import DATASETS, ToyConvNet

__all__ = [
    "FinetuneConfig",
    "EpochRow",
    "load_allocations",
    "apply_allocation",
    "evaluate",
    "train_baseline",
    "finetune",
    "accuracy_log_csv",
]


@dataclass
class FinetuneConfig:
    pruning_path: str
    quant_path: str
    batch_size: int = 64
    max_epochs: int = 12
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    two_stage: bool = False
    stage1_epochs: int = 4  # prune-only budget before the quantizer switches on
    dataset: str = "digits"
    seed: int = 0
    log_path: str | None = None
    state_dump_path: str = "diverged_state.pt"

    def validate(self) -> None:
        if self.batch_size <= 0:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if self.max_epochs <= 0:
            raise ValidationError(f"max_epochs must be positive, got {self.max_epochs}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1) and weight_decay be nonnegative")
        if self.two_stage and not 0 < self.stage1_epochs < self.max_epochs:
            raise ValidationError(
                f"stage1_epochs must lie in (0, max_epochs), got {self.stage1_epochs}"
            )
        if self.dataset not in DATASETS:
            raise ValidationError(f"unknown dataset {self.dataset!r}")


@dataclass(frozen=True)
class EpochRow:
    stage: int  # 1 = prune-only forward, 2 = prune+quantize forward
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float


def accuracy_log_csv(rows: list[EpochRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "epoch", "loss", "train_accuracy", "test_accuracy"])
    for r in rows:
        writer.writerow([r.stage, r.epoch, r.loss, r.train_accuracy, r.test_accuracy])
    return buf.getvalue()


def load_allocations(config: FinetuneConfig, net: ToyConvNet):
    """Load both artifacts and pin them to the net's current weights."""
    pruning = load_artifact(config.pruning_path)
    quant = load_artifact(config.quant_path)
    if not isinstance(pruning, PruningAllocation):
        raise ValidationError(f"{config.pruning_path} is not a pruning allocation")
    if not isinstance(quant, QuantAllocation):
        raise ValidationError(f"{config.quant_path} is not a quantization allocation")
    model_hash = model_tensors(net).content_hash()
    for label, artifact in (("pruning", pruning), ("quantization", quant)):
        if artifact.model_hash != model_hash:
            raise ValidationError(
                f"{label} allocation was computed for a different model "
                f"(hash {artifact.model_hash[:12]}… vs {model_hash[:12]}…)"
            )
    return pruning, quant


def apply_allocation(
    net: ToyConvNet,
    pruning: PruningAllocation,
    quant: QuantAllocation | None,
    quantize: bool = True,
) -> None:
    """Install masks (+ steps when quantize) as the net's forward operator."""
    names = [name for name, _ in net.weight_modules()]
    if pruning.layer_names != names:
        raise ValidationError(
            f"allocation covers layers {pruning.layer_names}, net has {names}"
        )
    compression = {}
    for i, (name, module) in enumerate(net.weight_modules()):
        mask = torch.from_numpy(np.array(pruning.masks[i], copy=True))
        mask = mask.reshape(module.weight.shape).bool()
        delta = quant.delta[i] if (quantize and quant is not None) else None
        compression[name] = (mask, delta)
    net.compression = compression


def evaluate(net: ToyConvNet, x: torch.Tensor, y: torch.Tensor, batch_size: int = 512) -> float:
    """Top-1 accuracy through the net's current forward operator (Ŵ if set)."""
    net.eval()
    hits = 0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = net(x[start : start + batch_size])
            hits += int((logits.argmax(dim=1) == y[start : start + batch_size]).sum())
    return hits / x.shape[0]


def _masked_decay(net: ToyConvNet, weight_decay: float) -> torch.Tensor:
    """L2 on surviving raw weights only; pruned positions stay bit-frozen."""
    penalty = net.fc.weight.new_zeros(())
    if weight_decay == 0.0:
        return penalty
    for name, module in net.weight_modules():
        keep = net.compression[name][0] if net.compression else None
        w = module.weight
        penalty = penalty + 0.5 * torch.sum(torch.square(w if keep is None else w * keep))
    return weight_decay * penalty


def _run_epochs(net, data, optimizer, generator, *, stage, epochs, start_epoch,
                batch_size, weight_decay, state_dump_path, rows):
    xtr, ytr, xte, yte = data
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(start_epoch, start_epoch + epochs):
        net.train()
        order = torch.randperm(xtr.shape[0], generator=generator)
        epoch_loss = 0.0
        for start in range(0, order.shape[0], batch_size):
            idx = order[start : start + batch_size]
            optimizer.zero_grad()
            loss = loss_fn(net(xtr[idx]), ytr[idx]) + _masked_decay(net, weight_decay)
            if not torch.isfinite(loss):
                torch.save(
                    {"state_dict": net.state_dict(), "stage": stage, "epoch": epoch},
                    state_dump_path,
                )
                raise ComputationError(
                    f"loss diverged (non-finite) at stage {stage} epoch {epoch}; "
                    f"state dumped to {state_dump_path}"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * idx.shape[0]
        rows.append(EpochRow(
            stage=stage,
            epoch=epoch,
            loss=epoch_loss / xtr.shape[0],
            train_accuracy=evaluate(net, xtr, ytr),
            test_accuracy=evaluate(net, xte, yte),
        ))
    return rows


def train_baseline(
    net: ToyConvNet,
    epochs: int = 12,
    learning_rate: float = 0.05,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
    dataset: str = "digits",
) -> list[EpochRow]:
    """Plain uncompressed training: produces the checkpoint the engine compresses."""
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    data = DATASETS[dataset]()
    net.compression = None
    optimizer = torch.optim.SGD(net.parameters(), lr=learning_rate,
                                momentum=momentum, weight_decay=weight_decay)
    return _run_epochs(
        net, data, optimizer, generator, stage=0, epochs=epochs, start_epoch=1,
        batch_size=batch_size, weight_decay=0.0,  # optimizer already decays
        state_dump_path="diverged_state.pt", rows=[],
    )


def finetune(net: ToyConvNet, config: FinetuneConfig) -> list[EpochRow]:
    """Recover accuracy under frozen masks and steps; returns the epoch log.

    Single-stage runs train against the full prune+quantize operator from the
    first epoch (logged as stage 2). Two-stage runs spend ``stage1_epochs``
    on the prune-only operator first.
    """
    config.validate()
    pruning, quant = load_allocations(config, net)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    data = DATASETS[config.dataset]()
    # decay is applied manually under the mask, so the optimizer itself must not
    optimizer = torch.optim.SGD(net.parameters(), lr=config.learning_rate,
                                momentum=config.momentum, weight_decay=0.0)
    rows: list[EpochRow] = []
    stage2_epochs = config.max_epochs
    if config.two_stage:
        apply_allocation(net, pruning, quant, quantize=False)
        _run_epochs(net, data, optimizer, generator, stage=1,
                    epochs=config.stage1_epochs, start_epoch=1,
                    batch_size=config.batch_size, weight_decay=config.weight_decay,
                    state_dump_path=config.state_dump_path, rows=rows)
        stage2_epochs = config.max_epochs - config.stage1_epochs
    apply_allocation(net, pruning, quant, quantize=True)
    _run_epochs(net, data, optimizer, generator, stage=2,
                epochs=stage2_epochs, start_epoch=len(rows) + 1,
                batch_size=config.batch_size, weight_decay=config.weight_decay,
                state_dump_path=config.state_dump_path, rows=rows)
    if config.log_path:
        with open(config.log_path, "w", encoding="utf-8", newline="") as f:
            f.write(accuracy_log_csv(rows))
    return rows
