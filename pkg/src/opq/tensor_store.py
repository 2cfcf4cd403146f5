"""Model weight container: loading, validation, channel views, artifact persistence.

A model container is a directory holding ``manifest.json`` (an ordered array
of ``{"name", "shape", "channel_axis", "dtype": "f32"}``) plus one raw blob
``<name>.bin`` per layer with the layer's weights as little-endian binary32
in row-major order. Flat arrays are stored row-major in the declared shape;
a "channel" is the set of elements whose ``channel_axis`` coordinate equals
the channel index, read in row-major order of the remaining axes.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ArtifactIOError, FormatError, ValidationError
from . import formats

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class LayerSpec:
    """Shape and channel partitioning of one weight tensor."""

    name: str
    shape: tuple[int, ...]
    channel_axis: int = 0

    def __post_init__(self):
        if not self.name:
            raise ValidationError("layer name must be nonempty")
        if not self.shape or any(int(d) <= 0 for d in self.shape):
            raise ValidationError(f"layer {self.name}: shape must be positive integers, got {self.shape}")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not 0 <= self.channel_axis < len(self.shape):
            raise ValidationError(
                f"layer {self.name}: channel_axis {self.channel_axis} out of range for rank {len(self.shape)}"
            )

    @property
    def count(self) -> int:
        return math.prod(self.shape)

    @property
    def channels(self) -> int:
        return self.shape[self.channel_axis]

    @property
    def per_channel(self) -> int:
        return self.count // self.channels


class ModelTensors:
    """Ordered, validated, immutable collection of named FP32 weight tensors."""

    def __init__(self, layers: list[tuple[LayerSpec, np.ndarray]]):
        if not layers:
            raise ValidationError("model has no layers")
        names = [spec.name for spec, _ in layers]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise ValidationError(f"duplicate layer name {dup!r}")
        self._specs: list[LayerSpec] = []
        self._values: list[np.ndarray] = []
        for spec, values in layers:
            arr = np.asarray(values, dtype=np.float32).ravel()
            if arr.size != spec.count:
                raise ValidationError(
                    f"layer {spec.name}: expected {spec.count} values, got {arr.size}"
                )
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise ValidationError(
                    f"non-finite value at layer {spec.name} index {int(bad[0])}"
                )
            arr = arr.copy()
            arr.setflags(write=False)
            self._specs.append(spec)
            self._values.append(arr)

    @property
    def specs(self) -> list[LayerSpec]:
        return list(self._specs)

    @property
    def layer_names(self) -> list[str]:
        return [s.name for s in self._specs]

    @property
    def num_layers(self) -> int:
        return len(self._specs)

    @property
    def total_count(self) -> int:
        return sum(s.count for s in self._specs)

    def spec(self, i: int) -> LayerSpec:
        return self._specs[i]

    def values(self, i: int) -> np.ndarray:
        """Flat read-only float32 array of layer i."""
        return self._values[i]

    def __iter__(self):
        return iter(zip(self._specs, self._values))

    def select(self, names: list[str]) -> "ModelTensors":
        """Sub-model restricted to the given layer names, preserving order."""
        keep = set(names)
        missing = keep - set(self.layer_names)
        if missing:
            raise ValidationError(f"unknown layer(s) in filter: {sorted(missing)}")
        return ModelTensors([(s, v) for s, v in self if s.name in keep])

    def content_hash(self) -> str:
        """SHA-256 over the canonical manifest plus all blobs, hex encoded."""
        h = hashlib.sha256()
        h.update(json.dumps(_manifest_entries(self._specs), sort_keys=True,
                            separators=(",", ":")).encode("utf-8"))
        for arr in self._values:
            h.update(arr.tobytes())
        return h.hexdigest()


def _manifest_entries(specs: list[LayerSpec]) -> list[dict]:
    return [
        {"name": s.name, "shape": list(s.shape), "channel_axis": s.channel_axis, "dtype": "f32"}
        for s in specs
    ]


def channel_view(model: ModelTensors, layer: int, channel: int) -> np.ndarray:
    """Read-only slice of the channel's weights, in channel-major order.

    For channel_axis 0 this is a contiguous run of the flat array; for other
    axes it is the row-major traversal of the remaining axes.
    """
    if not 0 <= layer < model.num_layers:
        raise ValidationError(f"layer index {layer} out of range")
    spec = model.spec(layer)
    if not 0 <= channel < spec.channels:
        raise ValidationError(
            f"channel index {channel} out of range for layer {spec.name} with {spec.channels} channels"
        )
    cube = model.values(layer).reshape(spec.shape)
    view = np.moveaxis(cube, spec.channel_axis, 0)[channel].ravel()
    view.setflags(write=False)
    return view


def as_channel_matrix(flat: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Reshape any flat per-weight array to (channels, per_channel) order."""
    arr = np.asarray(flat)
    if arr.size != spec.count:
        raise ValidationError(f"layer {spec.name}: expected {spec.count} values, got {arr.size}")
    cube = arr.reshape(spec.shape)
    return np.ascontiguousarray(
        np.moveaxis(cube, spec.channel_axis, 0).reshape(spec.channels, spec.per_channel)
    )


def channel_matrix(model: ModelTensors, layer: int) -> np.ndarray:
    """All channels of a layer as a read-only (channels, per_channel) matrix."""
    spec = model.spec(layer)
    mat = as_channel_matrix(model.values(layer), spec)
    mat.setflags(write=False)
    return mat


def load_model(path: str | os.PathLike, channel_axis_override: int | None = None) -> ModelTensors:
    """Load and validate a model container directory."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path, "rb") as f:
            manifest = json.loads(f.read().decode("utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"missing manifest: {manifest_path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"malformed manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, list) or not manifest:
        raise FormatError(f"manifest {manifest_path} must be a nonempty array of layer entries")

    layers = []
    for entry in manifest:
        try:
            name = entry["name"]
            shape = tuple(int(d) for d in entry["shape"])
            axis = int(entry.get("channel_axis", 0))
            dtype = entry.get("dtype", "f32")
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad manifest entry {entry!r}: {e}") from e
        if dtype != "f32":
            raise ValidationError(f"layer {name}: unsupported dtype {dtype!r} (only f32)")
        if channel_axis_override is not None:
            axis = channel_axis_override
        spec = LayerSpec(name=name, shape=shape, channel_axis=axis)
        blob_path = os.path.join(path, f"{name}.bin")
        try:
            with open(blob_path, "rb") as f:
                blob = f.read()
        except FileNotFoundError:
            raise ValidationError(f"missing blob for layer {name}: {blob_path}") from None
        if len(blob) != 4 * spec.count:
            raise ValidationError(
                f"layer {name}: blob holds {len(blob) // 4} values, manifest declares {spec.count}"
            )
        values = np.frombuffer(blob, dtype="<f4")
        layers.append((spec, values))
    return ModelTensors(layers)


def save_model(model: ModelTensors, path: str | os.PathLike) -> None:
    """Write a model container directory (manifest + one blob per layer)."""
    try:
        os.makedirs(path, exist_ok=True)
        manifest = _manifest_entries(model.specs)
        with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        for spec, values in model:
            with open(os.path.join(path, f"{spec.name}.bin"), "wb") as f:
                f.write(values.astype("<f4").tobytes())
    except OSError as e:
        raise ArtifactIOError(f"cannot write model container at {path}: {e}") from e


def save_artifact(artifact, path: str | os.PathLike) -> None:
    """Serialize a PruningAllocation, QuantAllocation, or CompressedModel.

    The write is atomic (temp file + rename) so failures leave no partial file.
    """
    from .prune_alloc import PruningAllocation
    from .quant_alloc import QuantAllocation
    from .codec import CompressedModel

    if isinstance(artifact, PruningAllocation):
        tag = formats.TAG_PRUNING
    elif isinstance(artifact, QuantAllocation):
        tag = formats.TAG_QUANT
    elif isinstance(artifact, CompressedModel):
        tag = formats.TAG_COMPRESSED
    else:
        raise ValidationError(f"cannot serialize object of type {type(artifact).__name__}")
    artifact.validate()
    writer = formats.SectionWriter(tag)
    artifact.write_sections(writer)
    blob = writer.getvalue()
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise ArtifactIOError(f"cannot write artifact at {path}: {e}") from e


def load_artifact(path: str | os.PathLike):
    """Load any artifact file, dispatching on its type tag."""
    from .prune_alloc import PruningAllocation
    from .quant_alloc import QuantAllocation
    from .codec import CompressedModel

    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ArtifactIOError(f"cannot read artifact at {path}: {e}") from e
    reader = formats.SectionReader(data)
    readers = {
        formats.TAG_PRUNING: PruningAllocation.read_sections,
        formats.TAG_QUANT: QuantAllocation.read_sections,
        formats.TAG_COMPRESSED: CompressedModel.read_sections,
    }
    if reader.tag not in readers:
        raise FormatError(f"unknown artifact type tag {reader.tag!r}")
    artifact = readers[reader.tag](reader)
    reader.expect_end()
    artifact.validate()
    return artifact


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
