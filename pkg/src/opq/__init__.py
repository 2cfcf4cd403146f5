"""One-shot pruning and unified channel-wise quantization for weight tensors.

Given a trained model's weights alone, fit per-layer Laplace scales, solve a
single magnitude threshold that hits a target pruning rate, derive one
uniform quantization step per layer meeting a global average-bin budget, and
apply Ŵ = M ∘ (Δ⌊W/Δ⌉). No calibration data, no iterative search: both
allocations are closed-form (the threshold up to a scalar root find).
"""

from .errors import (
    ArtifactIOError,
    ComputationError,
    FormatError,
    OpqError,
    ValidationError,
    VerificationError,
)
from .laplace_fit import (
    FitConfig,
    LaplaceFitResult,
    empirical_folded_cdf,
    fit_all_layers,
    fit_laplace,
    laplace_tail_mass,
)
from .prune_alloc import (
    PruningAllocation,
    allocate_pruning,
    build_masks,
    model_prune_rate,
    pruning_error,
    solve_threshold,
)
from .quant_alloc import (
    QuantAllocation,
    allocate_quant,
    bin_counts,
    channel_maxima,
    quant_error_estimate,
    solve_steps,
)
from .codec import (
    CompressedLayer,
    CompressedModel,
    compression_rate,
    decode,
    encode,
    measured_rate,
    quantize_layer,
)
from .analysis import ErrorReport, error_sweep, real_quant_error
from .synth import make_model
from .tensor_store import (
    LayerSpec,
    ModelTensors,
    channel_view,
    load_artifact,
    load_model,
    save_artifact,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "ArtifactIOError", "ComputationError", "FormatError", "OpqError",
    "ValidationError", "VerificationError",
    "FitConfig", "LaplaceFitResult", "empirical_folded_cdf", "fit_all_layers",
    "fit_laplace", "laplace_tail_mass",
    "PruningAllocation", "allocate_pruning", "build_masks", "model_prune_rate",
    "pruning_error", "solve_threshold",
    "QuantAllocation", "allocate_quant", "bin_counts", "channel_maxima",
    "quant_error_estimate", "solve_steps",
    "CompressedLayer", "CompressedModel", "compression_rate", "decode",
    "encode", "measured_rate", "quantize_layer",
    "ErrorReport", "error_sweep", "real_quant_error",
    "make_model",
    "LayerSpec", "ModelTensors", "channel_view", "load_artifact", "load_model",
    "save_artifact", "save_model",
    "__version__",
]
