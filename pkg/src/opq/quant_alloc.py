"""Unified channel-wise quantization steps under a global bin budget.

Each layer gets one uniform step Δ_i shared by all of its channels; channel
j's dynamic range is its unpruned magnitude maximum α_ij, so the channel
needs K_ij = ⌊2α_ij/Δ_i⌉ bins. Constraining the N̄-weighted average bin
count to 2^B and minimizing the analytic quantization error Σ Δ_i²/12
yields the closed form

    λ^{1/3} = (1/(2^{B−1} N̄)) Σ_i (N̄/12)^{1/3} S_i^{2/3},
    Δ_i     = (12 λ S_i / N̄)^{1/3},      S_i = Σ_j N̄_ij α_ij,

which satisfies the continuous budget identity exactly by construction.
Δ_i is computed as cbrt(12 S_i / N̄) · λ^{1/3} so that raising B by one bit
halves λ^{1/3} — and hence every Δ_i — exactly in floating point; the
analytic error then follows the 4^{−B} law to machine precision.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ComputationError, ValidationError
from .tensor_store import ModelTensors, as_channel_matrix

__all__ = [
    "QuantAllocation",
    "channel_maxima",
    "solve_steps",
    "bin_counts",
    "quant_error_estimate",
    "allocate_quant",
    "round_half_away",
]

BUDGET_RTOL = 1e-6


def round_half_away(x: np.ndarray | float) -> np.ndarray | float:
    """⌊·⌉ with ties away from zero (np.round would go to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def channel_maxima(
    model: ModelTensors, masks: list[np.ndarray]
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-channel unpruned magnitude maxima α_ij and survivor counts N̄_ij.

    A fully pruned channel reports (α, N̄) = (0, 0).
    """
    if len(masks) != model.num_layers:
        raise ValidationError(f"{len(masks)} masks for {model.num_layers} layers")
    alpha, counts = [], []
    for i, (spec, flat) in enumerate(model):
        if masks[i].size != spec.count:
            raise ValidationError(
                f"layer {spec.name}: mask length {masks[i].size} != count {spec.count}"
            )
        mags = np.abs(as_channel_matrix(flat, spec).astype(np.float64))
        keep = as_channel_matrix(masks[i], spec).astype(bool)
        alpha.append(np.max(mags * keep, axis=1))  # masked entries contribute 0
        counts.append(keep.sum(axis=1).astype(np.int64))
    return alpha, counts


def solve_steps(
    alpha: list[np.ndarray],
    unpruned_counts: list[np.ndarray],
    B_target: float,
) -> tuple[float, list[float | None]]:
    """Closed-form λ and per-layer steps Δ_i meeting the average-bin budget.

    Fully pruned layers have no quantizer; their step is the None sentinel.
    """
    if not B_target > 0:
        raise ValidationError(f"B_target must be positive, got {B_target}")
    if len(alpha) != len(unpruned_counts):
        raise ValidationError("alpha/unpruned_counts length mismatch")
    s = np.array([float(np.dot(n, a)) for a, n in zip(alpha, unpruned_counts)])
    nbar = float(sum(int(n.sum()) for n in unpruned_counts))
    if nbar == 0 or not np.any(s > 0):
        raise ComputationError("all layers fully pruned: no quantization steps to solve")

    lam_cbrt = float(np.sum(np.cbrt(nbar / 12.0) * s ** (2.0 / 3.0))) / (
        2.0 ** (B_target - 1.0) * nbar
    )
    lambda_q = lam_cbrt**3
    delta: list[float | None] = []
    for i, s_i in enumerate(s):
        if s_i <= 0.0:
            delta.append(None)
            continue
        d = float(np.cbrt(12.0 * s_i / nbar)) * lam_cbrt
        a_max = float(np.max(alpha[i]))
        if d > 2.0 * a_max:
            warnings.warn(
                f"layer {i}: step {d:.3g} exceeds channel range 2*{a_max:.3g}; "
                "every weight quantizes to zero at this bitwidth",
                RuntimeWarning,
                stacklevel=2,
            )
        delta.append(d)
    return lambda_q, delta


def bin_counts(
    alpha: list[np.ndarray],
    unpruned_counts: list[np.ndarray],
    delta: list[float | None],
) -> tuple[list[np.ndarray], float, float]:
    """K_ij = ⌊2α_ij/Δ_i⌉ plus effective-bit accounting.

    B_effective_continuous averages the unrounded ratios (the solved budget);
    B_effective_rounded averages max(K, 1) over stored channels — a stored
    channel spends at least the zero level.
    """
    ks = []
    bin_sum_cont = 0.0
    bin_sum_round = 0.0
    nbar = float(sum(int(n.sum()) for n in unpruned_counts))
    for a, n, d in zip(alpha, unpruned_counts, delta):
        if d is None:
            ks.append(np.zeros(a.size, dtype=np.int64))
            continue
        ratio = 2.0 * a / d
        k = round_half_away(ratio).astype(np.int64)
        ks.append(k)
        bin_sum_cont += float(np.dot(n, ratio))
        bin_sum_round += float(np.dot(n, np.maximum(k, 1)))
    b_cont = math.log2(bin_sum_cont / nbar) if bin_sum_cont > 0 else 0.0
    b_round = math.log2(bin_sum_round / nbar) if bin_sum_round > 0 else 0.0
    return ks, b_cont, b_round


def quant_error_estimate(delta: list[float | None]) -> float:
    """Analytic model of the total quantization MSE: Σ_i Δ_i²/12."""
    return float(sum(d * d / 12.0 for d in delta if d is not None))


def summary_csv(alloc: "QuantAllocation") -> str:
    """Step summary table: layer, delta, alpha/K spreads, counts, effective bits."""
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "delta", "alpha_min", "alpha_mean", "alpha_max",
                     "k_min", "k_mean", "k_max", "nbar_i",
                     "b_effective_continuous", "b_effective_rounded"])
    for i, name in enumerate(alloc.layer_names):
        a, k = alloc.alpha[i], alloc.K[i]
        writer.writerow([
            name,
            "" if alloc.delta[i] is None else alloc.delta[i],
            float(a.min()), float(a.mean()), float(a.max()),
            int(k.min()), float(k.mean()), int(k.max()),
            int(alloc.nbar_ij[i].sum()),
            alloc.B_effective_continuous, alloc.B_effective_rounded,
        ])
    return buf.getvalue()


@dataclass
class QuantAllocation:
    """Solved quantization plan: steps, channel ranges, bin counts."""

    model_hash: str
    B_target: float
    lambda_q: float
    delta: list[float | None]          # None marks a fully pruned layer
    alpha: list[np.ndarray] = field(repr=False)
    nbar_ij: list[np.ndarray] = field(repr=False)
    K: list[np.ndarray] = field(repr=False)
    layer_names: list[str] = field(default_factory=list)
    B_effective_continuous: float = 0.0
    B_effective_rounded: float = 0.0

    @property
    def nbar_i(self) -> list[int]:
        return [int(n.sum()) for n in self.nbar_ij]

    @property
    def nbar(self) -> int:
        return sum(self.nbar_i)

    def validate(self) -> None:
        if not self.B_target > 0:
            raise ValidationError(f"B_target must be positive, got {self.B_target}")
        if not self.lambda_q > 0:
            raise ValidationError(f"lambda_q must be positive, got {self.lambda_q}")
        same = {len(self.delta), len(self.alpha), len(self.nbar_ij), len(self.K),
                len(self.layer_names)}
        if same != {len(self.delta)}:
            raise ValidationError("per-layer field lengths disagree")
        budget = 0.0
        for name, d, a, n, k in zip(
            self.layer_names, self.delta, self.alpha, self.nbar_ij, self.K
        ):
            if a.size != n.size or a.size != k.size:
                raise ValidationError(f"layer {name}: per-channel array lengths disagree")
            if np.any(a < 0) or np.any(n < 0) or np.any(k < 0):
                raise ValidationError(f"layer {name}: negative channel statistics")
            if np.any((n == 0) & (a != 0)):
                raise ValidationError(f"layer {name}: fully pruned channel with nonzero range")
            if d is None:
                if int(n.sum()) != 0:
                    raise ValidationError(f"layer {name}: unpruned weights but no codebook")
                continue
            if not d > 0:
                raise ValidationError(f"layer {name}: step must be positive, got {d}")
            if np.any(k != round_half_away(2.0 * a / d).astype(np.int64)):
                raise ValidationError(f"layer {name}: K inconsistent with alpha and step")
            budget += float(np.dot(n, 2.0 * a / d))
        nbar = self.nbar
        if nbar > 0:
            target_bins = 2.0**self.B_target
            if abs(budget / nbar - target_bins) > BUDGET_RTOL * target_bins:
                raise ValidationError(
                    f"continuous bin budget {budget / nbar:.9g} misses 2^B = {target_bins:.9g}"
                )

    # --- artifact serialization ------------------------------------------

    def write_sections(self, writer) -> None:
        writer.add_json(
            {
                "model_hash": self.model_hash,
                "B_target": self.B_target,
                "lambda_q": self.lambda_q,
                "delta": list(self.delta),
                "B_effective_continuous": self.B_effective_continuous,
                "B_effective_rounded": self.B_effective_rounded,
                "layers": [
                    {"name": n, "channels": int(a.size)}
                    for n, a in zip(self.layer_names, self.alpha)
                ],
            }
        )
        for a, n, k in zip(self.alpha, self.nbar_ij, self.K):
            writer.add_array(a.astype("<f8"))
            writer.add_array(n.astype("<i8"))
            writer.add_array(k.astype("<i8"))

    @classmethod
    def read_sections(cls, reader) -> "QuantAllocation":
        header = reader.next_json()
        try:
            layers = header["layers"]
            alpha, nbar_ij, ks = [], [], []
            for entry in layers:
                channels = int(entry["channels"])
                alpha.append(reader.next_array("<f8", channels))
                nbar_ij.append(reader.next_array("<i8", channels))
                ks.append(reader.next_array("<i8", channels))
            return cls(
                model_hash=header["model_hash"],
                B_target=float(header["B_target"]),
                lambda_q=float(header["lambda_q"]),
                delta=[None if d is None else float(d) for d in header["delta"]],
                alpha=alpha,
                nbar_ij=nbar_ij,
                K=ks,
                layer_names=[e["name"] for e in layers],
                B_effective_continuous=float(header["B_effective_continuous"]),
                B_effective_rounded=float(header["B_effective_rounded"]),
            )
        except (KeyError, TypeError) as e:
            raise ValidationError(f"quantization artifact header missing field: {e}") from e


def allocate_quant(
    model: ModelTensors,
    masks: list[np.ndarray],
    B_target: float,
) -> QuantAllocation:
    """Full quantization pass: ranges, steps, bins, bit accounting."""
    alpha, counts = channel_maxima(model, masks)
    lambda_q, delta = solve_steps(alpha, counts, B_target)
    ks, b_cont, b_round = bin_counts(alpha, counts, delta)
    alloc = QuantAllocation(
        model_hash=model.content_hash(),
        B_target=B_target,
        lambda_q=lambda_q,
        delta=delta,
        alpha=alpha,
        nbar_ij=counts,
        K=ks,
        layer_names=model.layer_names,
        B_effective_continuous=b_cont,
        B_effective_rounded=b_round,
    )
    alloc.validate()
    return alloc
