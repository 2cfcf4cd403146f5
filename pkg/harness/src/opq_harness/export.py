"""Bridge between torch checkpoints and the engine's weight container."""

from __future__ import annotations

import numpy as np

from opq.tensor_store import LayerSpec, ModelTensors, save_model

from .model import ToyConvNet

__all__ = ["model_tensors", "export_weights"]


def model_tensors(net: ToyConvNet) -> ModelTensors:
    """Weights only (no biases), output channel first, C-order flattening."""
    layers = []
    for name, module in net.weight_modules():
        w = module.weight.detach().cpu().numpy().astype(np.float32)
        layers.append((LayerSpec(name, tuple(w.shape), channel_axis=0), w.ravel()))
    return ModelTensors(layers)


def export_weights(net: ToyConvNet, out_dir) -> str:
    """Write the manifest+blob container; returns its content hash."""
    model = model_tensors(net)
    save_model(model, out_dir)
    return model.content_hash()
