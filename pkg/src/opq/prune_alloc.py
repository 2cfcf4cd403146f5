"""Unified magnitude pruning: one global threshold from a rate constraint.

Under per-layer Laplace scales τ_i, minimizing total pruning error subject
to a model-level pruning rate p* puts every layer's threshold at the same
point β_i = √λ, where λ is the Lagrange multiplier of the rate constraint.
The module-level rate at threshold β is

    p(β) = (1/N) Σ_i N_i (1 − e^{−β/τ_i}),

strictly increasing in β, so β* is the unique root of p(β) = p*. The solver
runs Newton–Raphson in the substituted variable u = √λ = β with a bisection
fallback whenever a Newton step leaves the current bracket.

Masks are built from the solved β only — they are never re-calibrated to hit
p* empirically. Both the model rate and the achieved rate are recorded so
the (small) gap between distribution and data stays visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ComputationError, ValidationError
from .laplace_fit import LaplaceFitResult
from .tensor_store import LayerSpec, ModelTensors

__all__ = [
    "PruningAllocation",
    "model_prune_rate",
    "solve_threshold",
    "build_masks",
    "pruning_error",
    "allocate_pruning",
]

MAX_ITERATIONS = 100


def _check_fits(fits: list[LaplaceFitResult], specs: list[LayerSpec]) -> None:
    if len(fits) != len(specs):
        raise ValidationError(f"{len(fits)} fits for {len(specs)} layers")


def model_prune_rate(fits: list[LaplaceFitResult], specs: list[LayerSpec], beta: float) -> float:
    """Laplace-model pruning rate of the whole model at a common threshold β."""
    _check_fits(fits, specs)
    if beta < 0:
        raise ValidationError(f"beta must be nonnegative, got {beta}")
    counts = np.array([s.count for s in specs], dtype=np.float64)
    taus = np.array([f.tau for f in fits], dtype=np.float64)
    return float(np.sum(counts * -np.expm1(-beta / taus)) / np.sum(counts))


def solve_threshold(
    fits: list[LaplaceFitResult],
    specs: list[LayerSpec],
    p_target: float,
    tol: float = 1e-10,
) -> tuple[float, float]:
    """Solve p(u) = p* for u = √λ; returns (λ, β) with β = u.

    The iteration starts from the single-effective-τ guess
    u₀ = (Σ N_i τ_i / N) · ln(1/(1−p*)) and keeps a sign-preserving bracket
    [lo, hi] with p(lo) < p* ≤ p(hi); any Newton step that leaves the
    bracket is replaced by its midpoint. hi = τ_max·ln(1/(1−p*)) always
    over-prunes, so the bracket is valid from the start.
    """
    _check_fits(fits, specs)
    if not 0.0 < p_target < 1.0:
        raise ValidationError(f"p_target must lie in (0, 1), got {p_target}")
    if not tol > 0:
        raise ValidationError(f"tol must be positive, got {tol}")

    counts = np.array([s.count for s in specs], dtype=np.float64)
    taus = np.array([f.tau for f in fits], dtype=np.float64)
    total = float(np.sum(counts))

    def rate(u: float) -> float:
        return float(np.sum(counts * -np.expm1(-u / taus)) / total)

    def rate_slope(u: float) -> float:
        return float(np.sum((counts / taus) * np.exp(-u / taus)) / total)

    pull = math.log(1.0 / (1.0 - p_target))
    u = float(np.sum(counts * taus) / total) * pull
    lo, hi = 0.0, float(np.max(taus)) * pull

    residual = rate(u) - p_target
    for _ in range(MAX_ITERATIONS):
        if abs(residual) <= tol:
            return u * u, u
        if residual < 0:
            lo = u
        else:
            hi = u
        slope = rate_slope(u)
        step = u - residual / slope if slope > 0 else math.nan
        u = step if lo < step < hi else 0.5 * (lo + hi)
        residual = rate(u) - p_target
    if abs(residual) <= tol:
        return u * u, u
    raise ComputationError(
        f"threshold solve did not converge in {MAX_ITERATIONS} iterations; residual {residual:.3e}"
    )


def build_masks(model: ModelTensors, beta: float) -> tuple[list[np.ndarray], list[float], float]:
    """Magnitude masks at threshold β: bit 0 iff |W| ≤ β (boundary pruned).

    Returns (masks, per-layer empirical rates, global empirical rate).
    """
    if beta < 0:
        raise ValidationError(f"beta must be nonnegative, got {beta}")
    masks, rates = [], []
    zeros = 0
    for spec, flat in model:
        # compare in f64: demoting β to f32 could flip exact-boundary weights
        mask = (np.abs(flat.astype(np.float64)) > beta).astype(np.uint8)
        mask.setflags(write=False)
        masks.append(mask)
        kept = int(mask.sum())
        rates.append(1.0 - kept / spec.count)
        zeros += spec.count - kept
    return masks, rates, zeros / model.total_count


def pruning_error(
    model: ModelTensors,
    fits: list[LaplaceFitResult],
    beta: float,
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Real and Laplace-model pruning error, per layer and (1/N)-weighted total.

    real_i  = Σ_{|W_ij| ≤ β} W_ij²  (energy actually zeroed by the mask)
    model_i = 2 N_i ∫₀^β x² f_i(x) dx
            = N_i (2τ_i² − e^{−β/τ_i}(β² + 2βτ_i + 2τ_i²))
    """
    _check_fits(fits, model.specs)
    if beta < 0:
        raise ValidationError(f"beta must be nonnegative, got {beta}")
    real = np.empty(model.num_layers)
    analytic = np.empty(model.num_layers)
    for i, (spec, flat) in enumerate(model):
        w = flat.astype(np.float64)
        pruned = np.abs(w) <= beta
        real[i] = float(np.sum(np.square(w[pruned])))
        tau = fits[i].tau
        analytic[i] = spec.count * (
            2.0 * tau * tau
            - math.exp(-beta / tau) * (beta * beta + 2.0 * beta * tau + 2.0 * tau * tau)
        )
    n = model.total_count
    return real, analytic, float(real.sum() / n), float(analytic.sum() / n)


def summary_csv(
    alloc: "PruningAllocation",
    fits: list[LaplaceFitResult],
    real_error: np.ndarray,
    model_error: np.ndarray,
) -> str:
    """Pruning summary table: layer, tau, beta, rates, real/model error."""
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "tau", "beta", "p_model", "p_empirical",
                     "real_error", "model_error"])
    for i, name in enumerate(alloc.layer_names):
        writer.writerow([name, fits[i].tau, alloc.beta[i], alloc.rate_model[i],
                         alloc.rate_empirical[i], float(real_error[i]), float(model_error[i])])
    return buf.getvalue()


@dataclass
class PruningAllocation:
    """Solved pruning plan: threshold, rates, and per-layer masks."""

    model_hash: str
    p_target: float
    tolerance: float
    lambda_p: float
    beta: list[float]                  # per layer; all equal to √λ
    p_model: float
    p_empirical: float
    layer_names: list[str]
    layer_counts: list[int]
    rate_model: list[float]            # per-layer 1 − e^{−β/τ_i}
    rate_empirical: list[float]
    masks: list[np.ndarray] = field(repr=False)

    def validate(self) -> None:
        if not self.lambda_p > 0:
            raise ValidationError(f"lambda_p must be positive, got {self.lambda_p}")
        if not 0.0 <= self.p_target < 1.0:
            raise ValidationError(f"p_target must lie in [0, 1), got {self.p_target}")
        root = math.sqrt(self.lambda_p)
        for i, b in enumerate(self.beta):
            if not math.isclose(b, root, rel_tol=1e-12, abs_tol=1e-300):
                raise ValidationError(
                    f"layer {self.layer_names[i]}: beta {b} deviates from sqrt(lambda_p) {root}"
                )
        if abs(self.p_model - self.p_target) > self.tolerance:
            raise ValidationError(
                f"p_model {self.p_model} misses p_target {self.p_target} "
                f"beyond tolerance {self.tolerance}"
            )
        lengths = {len(self.beta), len(self.layer_names), len(self.layer_counts),
                   len(self.rate_model), len(self.rate_empirical), len(self.masks)}
        if lengths != {len(self.masks)}:
            raise ValidationError("per-layer field lengths disagree")
        zeros = 0
        for name, count, mask, rate in zip(
            self.layer_names, self.layer_counts, self.masks, self.rate_empirical
        ):
            if mask.size != count:
                raise ValidationError(f"layer {name}: mask length {mask.size} != count {count}")
            if mask.dtype != np.uint8 or np.any(mask > 1):
                raise ValidationError(f"layer {name}: mask must be 0/1 uint8")
            layer_zeros = count - int(mask.sum())
            if not math.isclose(rate, layer_zeros / count, rel_tol=0, abs_tol=1e-12):
                raise ValidationError(f"layer {name}: recorded empirical rate inconsistent with mask")
            zeros += layer_zeros
        total = sum(self.layer_counts)
        if not math.isclose(self.p_empirical, zeros / total, rel_tol=0, abs_tol=1e-12):
            raise ValidationError("p_empirical inconsistent with masks")

    # --- artifact serialization ------------------------------------------

    def write_sections(self, writer) -> None:
        writer.add_json(
            {
                "model_hash": self.model_hash,
                "p_target": self.p_target,
                "tolerance": self.tolerance,
                "lambda_p": self.lambda_p,
                "beta": list(self.beta),
                "p_model": self.p_model,
                "p_empirical": self.p_empirical,
                "layers": [
                    {
                        "name": n,
                        "count": c,
                        "rate_model": rm,
                        "rate_empirical": re,
                    }
                    for n, c, rm, re in zip(
                        self.layer_names, self.layer_counts, self.rate_model, self.rate_empirical
                    )
                ],
            }
        )
        for mask in self.masks:
            writer.add(np.packbits(mask).tobytes())

    @classmethod
    def read_sections(cls, reader) -> "PruningAllocation":
        header = reader.next_json()
        try:
            layers = header["layers"]
            names = [e["name"] for e in layers]
            counts = [int(e["count"]) for e in layers]
            masks = []
            for count in counts:
                packed = np.frombuffer(reader.next(), dtype=np.uint8)
                expected = (count + 7) // 8
                if packed.size != expected:
                    raise ValidationError(
                        f"mask section holds {packed.size} bytes, expected {expected}"
                    )
                mask = np.unpackbits(packed, count=count)
                mask.setflags(write=False)
                masks.append(mask)
            return cls(
                model_hash=header["model_hash"],
                p_target=float(header["p_target"]),
                tolerance=float(header["tolerance"]),
                lambda_p=float(header["lambda_p"]),
                beta=[float(b) for b in header["beta"]],
                p_model=float(header["p_model"]),
                p_empirical=float(header["p_empirical"]),
                layer_names=names,
                layer_counts=counts,
                rate_model=[float(e["rate_model"]) for e in layers],
                rate_empirical=[float(e["rate_empirical"]) for e in layers],
                masks=masks,
            )
        except (KeyError, TypeError) as e:
            raise ValidationError(f"pruning artifact header missing field: {e}") from e


def allocate_pruning(
    model: ModelTensors,
    fits: list[LaplaceFitResult],
    p_target: float,
    tol: float = 1e-10,
) -> PruningAllocation:
    """Full pruning pass: solve β, build masks, record both rate views."""
    lambda_p, beta = solve_threshold(fits, model.specs, p_target, tol)
    masks, rate_emp, p_emp = build_masks(model, beta)
    taus = [f.tau for f in fits]
    alloc = PruningAllocation(
        model_hash=model.content_hash(),
        p_target=p_target,
        tolerance=tol,
        lambda_p=lambda_p,
        beta=[beta] * model.num_layers,
        p_model=model_prune_rate(fits, model.specs, beta),
        p_empirical=p_emp,
        layer_names=model.layer_names,
        layer_counts=[s.count for s in model.specs],
        rate_model=[1.0 - math.exp(-beta / t) for t in taus],
        rate_empirical=rate_emp,
        masks=masks,
    )
    alloc.validate()
    return alloc
