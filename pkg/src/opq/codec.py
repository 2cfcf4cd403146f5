"""Compression operator and sparse wire format.

The dense compressed tensor is Ŵ = M ∘ (Δ ⌊W/Δ⌉) — mask Hadamard product
with uniform symmetric quantization, ties rounding away from zero. On the
wire each layer is a stream of (gap, level) records over the flat tensor:

* a record with level ≠ 0 skips `gap` unoccupied positions past the cursor,
  then occupies one position with value sgn·Δ·|level|;
* a record with level = 0 is a placeholder that only advances the cursor by
  `gap` — it is emitted (with gap 2^g − 1) whenever a real gap does not fit
  in g bits.

Levels that quantize to zero are not stored: decoding leaves those positions
at exactly 0.0, which is bit-identical to what the operator produces. Levels
are sign-magnitude; the step Δ travels as binary32 and all reconstruction
arithmetic runs in float64 on that binary32 value, so decode output matches
a from-scratch quantize_layer pass bit for bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .errors import ComputationError, FormatError, ValidationError
from .quant_alloc import QuantAllocation
from .tensor_store import LayerSpec, ModelTensors

__all__ = [
    "CompressedLayer",
    "CompressedModel",
    "quantize_layer",
    "encode",
    "decode",
    "compression_rate",
    "measured_rate",
]

DEFAULT_GAP_BITS = 8


def quantize_layer(values: np.ndarray, mask: np.ndarray, delta: float) -> np.ndarray:
    """Dense Ŵ for one layer: 0 where masked, else sgn(v)·Δ·⌊|v|/Δ⌉.

    Δ is coerced to binary32 first (its wire precision); levels are computed
    in float64 so the tie at |v|/Δ = k + ½ breaks away from zero, exactly as
    ⌊·⌉ is defined here.
    """
    if not delta > 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    d64 = float(np.float32(delta))
    v = np.asarray(values, dtype=np.float64).ravel()
    m = np.asarray(mask).ravel()
    if v.size != m.size:
        raise ValidationError(f"values/mask length mismatch: {v.size} vs {m.size}")
    lev = np.floor(np.abs(v) / d64 + 0.5)
    out = (np.sign(v) * d64 * lev).astype(np.float32)
    out[(m == 0) | (lev == 0)] = np.float32(0.0)  # also normalizes −0.0
    return out


def _signed_levels(values: np.ndarray, mask: np.ndarray, d64: float) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    lev = np.floor(np.abs(v) / d64 + 0.5).astype(np.int64)
    lev *= np.sign(v).astype(np.int64)
    lev[np.asarray(mask).ravel() == 0] = 0
    return lev


@dataclass(frozen=True)
class CompressedLayer:
    """One layer's codebook step and packed (gap, level) stream."""

    name: str
    shape: tuple[int, ...]
    channel_axis: int
    delta: float | None            # binary32 value; None = no codebook (fully pruned)
    gap_bits: int
    level_bits: int
    entries: int
    stream: bytes = field(repr=False)

    @property
    def count(self) -> int:
        return math.prod(self.shape)

    def validate(self) -> None:
        if not 1 <= self.gap_bits <= 32:
            raise ValidationError(f"layer {self.name}: gap_bits {self.gap_bits} out of [1, 32]")
        if not 1 <= self.level_bits <= 32:
            raise ValidationError(f"layer {self.name}: level_bits {self.level_bits} out of [1, 32]")
        if self.delta is not None:
            if not self.delta > 0:
                raise ValidationError(f"layer {self.name}: step must be positive, got {self.delta}")
            if np.float32(self.delta) != np.float64(self.delta):
                raise ValidationError(f"layer {self.name}: step is not a binary32 value")
        elif self.entries:
            raise ValidationError(f"layer {self.name}: entries present without a codebook")
        if self.entries < 0:
            raise ValidationError(f"layer {self.name}: negative entry count")
        need = (self.entries * (self.gap_bits + self.level_bits) + 7) // 8
        if len(self.stream) != need:
            raise ValidationError(
                f"layer {self.name}: stream holds {len(self.stream)} bytes, expected {need}"
            )


def _encode_layer(
    spec: LayerSpec,
    flat: np.ndarray,
    mask: np.ndarray,
    delta: float | None,
    max_k: int,
    gap_bits: int,
) -> CompressedLayer:
    if delta is None:
        if int(np.asarray(mask).sum()) != 0:
            raise ComputationError(f"layer {spec.name}: unpruned weights but no codebook")
        return CompressedLayer(spec.name, spec.shape, spec.channel_axis,
                               None, gap_bits, 1, 0, b"")

    d64 = float(np.float32(delta))
    level_bits = max_k.bit_length() + 1  # ceil(log2(max K + 1)) magnitude bits + sign
    lev = _signed_levels(flat, mask, d64)
    stored = np.flatnonzero(lev)
    if stored.size == 0:
        return CompressedLayer(spec.name, spec.shape, spec.channel_axis,
                               d64, gap_bits, level_bits, 0, b"")

    mag = np.abs(lev[stored]).astype(np.uint64)
    cap = (1 << (level_bits - 1)) - 1
    if int(mag.max()) > cap:
        raise ComputationError(
            f"layer {spec.name}: level magnitude {int(mag.max())} exceeds "
            f"{cap} representable in {level_bits} bits"
        )
    codes = (np.where(lev[stored] < 0, np.uint64(1), np.uint64(0)) << np.uint64(level_bits - 1)) | mag

    # raw gap: unoccupied positions between consecutive stored entries
    raw = np.empty(stored.size, dtype=np.int64)
    raw[0] = stored[0]
    raw[1:] = np.diff(stored) - 1
    big = 1 << gap_bits
    hop = big - 1  # cursor advance per overflow placeholder
    pads = np.where(raw < big, 0, -(-(raw - hop) // hop))  # ceil((raw−(2^g−1))/(2^g−1))
    rem = raw - pads * hop
    total = int(stored.size + pads.sum())
    gaps_out = np.full(total, hop, dtype=np.uint64)
    codes_out = np.zeros(total, dtype=np.uint64)
    ends = np.cumsum(pads + 1) - 1  # index of each real record after its placeholders
    gaps_out[ends] = rem.astype(np.uint64)
    codes_out[ends] = codes
    stream = formats.interleave_bit_fields(gaps_out, gap_bits, codes_out, level_bits)
    return CompressedLayer(spec.name, spec.shape, spec.channel_axis,
                           d64, gap_bits, level_bits, total, stream)


def _decode_layer(layer: CompressedLayer) -> np.ndarray:
    out = np.zeros(layer.count, dtype=np.float32)
    if layer.entries == 0:
        return out
    gaps, codes = formats.deinterleave_bit_fields(
        layer.stream, layer.gap_bits, layer.level_bits, layer.entries
    )
    half = np.uint64(1) << np.uint64(layer.level_bits - 1)
    mag = (codes & (half - np.uint64(1))).astype(np.int64)
    neg = (codes >> np.uint64(layer.level_bits - 1)).astype(bool)
    if np.any(neg & (mag == 0)):
        raise FormatError(f"layer {layer.name}: invalid level code (negative zero)")
    real = mag > 0
    advance = gaps.astype(np.int64) + real  # real records occupy one position
    cursor = np.cumsum(advance)
    positions = cursor[real] - 1
    if positions.size and int(positions[-1]) >= layer.count:
        raise FormatError(
            f"layer {layer.name}: position {int(positions[-1])} exceeds layer size {layer.count}"
        )
    if int(cursor[-1]) > layer.count:
        raise FormatError(f"layer {layer.name}: stream cursor overruns layer size {layer.count}")
    lev = np.where(neg[real], -mag[real], mag[real])
    d64 = float(layer.delta)
    out[positions] = (np.sign(lev) * d64 * np.abs(lev).astype(np.float64)).astype(np.float32)
    return out


@dataclass
class CompressedModel:
    """All compressed layers plus provenance for verification."""

    model_hash: str
    provenance: dict
    layers: list[CompressedLayer]

    def validate(self) -> None:
        if not self.layers:
            raise ValidationError("compressed model has no layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate layer names in compressed model")
        for layer in self.layers:
            layer.validate()

    @property
    def total_count(self) -> int:
        return sum(l.count for l in self.layers)

    def stream_bytes(self) -> int:
        return sum(len(l.stream) for l in self.layers)

    # --- artifact serialization ------------------------------------------

    def write_sections(self, writer) -> None:
        writer.add_json(
            {
                "model_hash": self.model_hash,
                "provenance": self.provenance,
                "layer_count": len(self.layers),
            }
        )
        for layer in self.layers:
            header = formats.canonical_json_bytes(
                {
                    "name": layer.name,
                    "shape": list(layer.shape),
                    "channel_axis": layer.channel_axis,
                    "delta": layer.delta,
                    "gap_bits": layer.gap_bits,
                    "level_bits": layer.level_bits,
                    "entries": layer.entries,
                }
            )
            writer.add(header)
            writer.add(layer.stream)
            writer.add(struct.pack("<I", formats.crc32(header + layer.stream)))

    @classmethod
    def read_sections(cls, reader) -> "CompressedModel":
        top = reader.next_json()
        try:
            count = int(top["layer_count"])
            layers = []
            for _ in range(count):
                header_bytes = reader.next()
                stream = reader.next()
                crc_bytes = reader.next()
                if len(crc_bytes) != 4:
                    raise FormatError("checksum section must be 4 bytes")
                (crc_stored,) = struct.unpack("<I", crc_bytes)
                if crc_stored != formats.crc32(header_bytes + stream):
                    name = _best_effort_name(header_bytes)
                    raise FormatError(f"layer {name}: checksum mismatch (corrupt artifact)")
                h = formats.parse_json_bytes(header_bytes)
                layers.append(
                    CompressedLayer(
                        name=h["name"],
                        shape=tuple(int(d) for d in h["shape"]),
                        channel_axis=int(h["channel_axis"]),
                        delta=None if h["delta"] is None else float(h["delta"]),
                        gap_bits=int(h["gap_bits"]),
                        level_bits=int(h["level_bits"]),
                        entries=int(h["entries"]),
                        stream=stream,
                    )
                )
            return cls(model_hash=top["model_hash"], provenance=top["provenance"], layers=layers)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"compressed artifact header invalid: {e}") from e


def _best_effort_name(header_bytes: bytes) -> str:
    try:
        return formats.parse_json_bytes(header_bytes).get("name", "<unknown>")
    except FormatError:
        return "<unknown>"


def encode(
    model: ModelTensors,
    masks: list[np.ndarray],
    quant: QuantAllocation,
    gap_bits: int = DEFAULT_GAP_BITS,
    provenance: dict | None = None,
) -> CompressedModel:
    """Compress every layer against its mask and unified codebook step."""
    if not 1 <= gap_bits <= 32:
        raise ValidationError(f"gap_bits {gap_bits} out of [1, 32]")
    if quant.layer_names != model.layer_names:
        raise ValidationError("quantization allocation does not cover this model's layers")
    if len(masks) != model.num_layers:
        raise ValidationError(f"{len(masks)} masks for {model.num_layers} layers")
    layers = []
    zeros = 0
    for i, (spec, flat) in enumerate(model):
        if masks[i].size != spec.count:
            raise ValidationError(
                f"layer {spec.name}: mask length {masks[i].size} != count {spec.count}"
            )
        max_k = int(quant.K[i].max(initial=0))
        layers.append(_encode_layer(spec, flat, masks[i], quant.delta[i], max_k, gap_bits))
        zeros += spec.count - int(np.asarray(masks[i]).sum())
    info = {
        "p_empirical": zeros / model.total_count,
        "B_target": quant.B_target,
        "B_effective_rounded": quant.B_effective_rounded,
    }
    if provenance:
        info.update(provenance)
    compressed = CompressedModel(model_hash=model.content_hash(), provenance=info, layers=layers)
    compressed.validate()
    return compressed


def decode(compressed: CompressedModel) -> ModelTensors:
    """Reconstruct the dense masked-quantized model, bit-exactly."""
    layers = []
    for layer in compressed.layers:
        spec = LayerSpec(name=layer.name, shape=layer.shape, channel_axis=layer.channel_axis)
        layers.append((spec, _decode_layer(layer)))
    return ModelTensors(layers)


def compression_rate(
    p_empirical: float, B_effective: float, overhead_bytes: int, N: int
) -> float:
    """32·N / ((1−p)·B·N + 8·overhead): original bits over compressed bits."""
    if not 0.0 <= p_empirical < 1.0:
        raise ValidationError(f"p_empirical must lie in [0, 1), got {p_empirical}")
    if not B_effective > 0:
        raise ValidationError(f"B_effective must be positive, got {B_effective}")
    if overhead_bytes < 0 or N <= 0:
        raise ValidationError("overhead_bytes must be nonnegative and N positive")
    return 32.0 * N / ((1.0 - p_empirical) * B_effective * N + 8.0 * overhead_bytes)


def measured_rate(N: int, file_bytes: int) -> float:
    """Actual on-disk rate: 32·N original bits over the measured file bits."""
    if N <= 0 or file_bytes <= 0:
        raise ValidationError("N and file_bytes must be positive")
    return 32.0 * N / (8.0 * file_bytes)
