"""Synthetic Laplace model generation — the shared test fixture.

Real checkpoints are large and license-encumbered; everything the allocator
does is distributional, so a model with known per-layer Laplace scales is
both a lightweight stand-in and a ground-truth oracle (the fitted τ̂_i can
be compared against the τ_i that generated the weights).
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .tensor_store import LayerSpec, ModelTensors

__all__ = ["make_model"]


def make_model(
    taus: list[float],
    counts: list[int],
    seed: int,
    channels: list[int] | None = None,
) -> ModelTensors:
    """Model with layer i holding `counts[i]` Laplace(τ_i) weights.

    Layers are named layer0, layer1, … and shaped (channels[i], count/channels)
    with channel axis 0; counts must divide evenly. channels defaults to 8
    where possible, else 1.
    """
    if len(taus) != len(counts) or not taus:
        raise ValidationError("need equal, nonzero numbers of taus and counts")
    if channels is None:
        channels = [8 if c % 8 == 0 else 1 for c in counts]
    if len(channels) != len(counts):
        raise ValidationError("channels list must match layer count")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (tau, count, ch) in enumerate(zip(taus, counts, channels)):
        if not tau > 0:
            raise ValidationError(f"layer {i}: tau must be positive, got {tau}")
        if count <= 0 or ch <= 0 or count % ch:
            raise ValidationError(f"layer {i}: {ch} channels must evenly divide {count} weights")
        spec = LayerSpec(name=f"layer{i}", shape=(ch, count // ch), channel_axis=0)
        layers.append((spec, rng.laplace(0.0, tau, size=count).astype(np.float32)))
    return ModelTensors(layers)
