"""Toy CNN target and its dataset.

Four weight layers, ~293k weights total — big enough that per-channel maxima
mean something, small enough to finetune on a CPU in seconds. The dataset is
the bundled 8×8 digits set (1797 images, 10 classes); no downloads.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split
from torch import nn

from . import ste

__all__ = ["WEIGHT_LAYERS", "ToyConvNet", "digits_dataset", "DATASETS"]

WEIGHT_LAYERS = ("conv1", "conv2", "conv3", "fc")

# train/test split is fixed independently of training seeds so every run —
# baseline or finetune — scores against the same held-out set
_SPLIT_SEED = 0


class ToyConvNet(nn.Module):
    """conv(1→32) → conv(32→112) → conv(112→256) → fc(256→10).

    ``compression`` is either None (raw weights) or a dict mapping layer name
    to (mask tensor, Δ or None); when set, every forward uses Ŵ via the
    straight-through operator. Biases are never compressed.
    """

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 112, 3, padding=1)
        self.conv3 = nn.Conv2d(112, 256, 3, padding=1)
        self.fc = nn.Linear(256, 10)
        self.compression: dict[str, tuple[torch.Tensor, float | None]] | None = None

    def weight_modules(self) -> list[tuple[str, nn.Module]]:
        return [(name, getattr(self, name)) for name in WEIGHT_LAYERS]

    def weight_count(self) -> int:
        return sum(m.weight.numel() for _, m in self.weight_modules())

    def effective_weight(self, name: str) -> torch.Tensor:
        w = getattr(self, name).weight
        if self.compression is None:
            return w
        mask, delta = self.compression[name]
        return ste.masked_quantize(w, mask, delta)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(F.conv2d(x, self.effective_weight("conv1"), self.conv1.bias, padding=1))
        x = F.max_pool2d(x, 2)
        x = F.relu(F.conv2d(x, self.effective_weight("conv2"), self.conv2.bias, padding=1))
        x = F.max_pool2d(x, 2)
        x = F.relu(F.conv2d(x, self.effective_weight("conv3"), self.conv3.bias, padding=1))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return F.linear(x, self.effective_weight("fc"), self.fc.bias)


def digits_dataset() -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(train_x, train_y, test_x, test_y); images scaled to [0, 1]."""
    data = load_digits()
    x = (data.images / 16.0).astype(np.float32)[:, None, :, :]
    y = data.target.astype(np.int64)
    xtr, xte, ytr, yte = train_test_split(
        x, y, test_size=0.2, random_state=_SPLIT_SEED, stratify=y
    )
    return (torch.from_numpy(xtr), torch.from_numpy(ytr),
            torch.from_numpy(xte), torch.from_numpy(yte))


DATASETS = {"digits": digits_dataset}
