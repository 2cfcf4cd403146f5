"""Straight-through masked quantization.

Forward computes Ŵ = M ∘ (Δ·⌊|W|/Δ⌉·sgn W) with the exact float discipline of
``opq.codec.quantize_layer`` — Δ coerced to binary32, levels taken in float64,
result cast back to float32 — so the training-time forward pass and the
decoded artifact agree bit for bit. Backward treats the rounding as identity
and zeroes gradients at pruned positions.

``delta=None`` selects the 32-bit identity path (prune-only): used for
stage-1 finetuning and for identity-compression evaluation.
"""

from __future__ import annotations

import numpy as np
import torch

__all__ = ["hard_quantize", "masked_quantize"]


def hard_quantize(w: torch.Tensor, mask: torch.Tensor, delta: float | None) -> torch.Tensor:
    """Non-differentiable Ŵ; mirrors codec.quantize_layer arithmetic exactly."""
    keep = mask != 0
    if delta is None:
        return w.masked_fill(~keep, 0.0)
    d64 = float(np.float32(delta))
    v = w.double()
    lev = torch.floor(v.abs() / d64 + 0.5)
    out = (torch.sign(v) * d64 * lev).float()
    return out.masked_fill(~keep | (lev == 0), 0.0)  # +0.0, matching the codec


class _MaskedQuantize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, w, mask, delta):
        ctx.save_for_backward(mask)
        return hard_quantize(w, mask, delta)

    @staticmethod
    def backward(ctx, grad):
        (mask,) = ctx.saved_tensors
        return grad * (mask != 0), None, None


def masked_quantize(w: torch.Tensor, mask: torch.Tensor, delta: float | None) -> torch.Tensor:
    """Ŵ with straight-through gradients: d Ŵ / d W = M."""
    return _MaskedQuantize.apply(w, mask, delta)
