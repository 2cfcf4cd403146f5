"""Real-vs-analytic error comparison across pruning-rate and bitwidth sweeps.

The allocation pipeline predicts its own damage twice over: pruning error
from the fitted Laplace tails and quantization error from Σ Δ²/12. This
module measures the actual damage on the weights and reports both numbers
side by side, per sweep setting and per layer. Sweep rows that fail to
allocate (e.g. a bitwidth small enough to zero out a layer) record the
error message instead of aborting the whole sweep.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .codec import quantize_layer
from .errors import OpqError, ValidationError
from .laplace_fit import FitConfig, LaplaceFitResult, fit_all_layers
from .prune_alloc import allocate_pruning, pruning_error
from .quant_alloc import QuantAllocation, allocate_quant, quant_error_estimate
from .tensor_store import ModelTensors

__all__ = [
    "SweepRow",
    "LayerRow",
    "ErrorReport",
    "real_quant_error",
    "error_sweep",
    "report_csv",
    "layer_csv",
]

EPS = 1e-30

SWEEP_VARIABLES = ("prune_rate", "bitwidth")


def relative_gap(real: float, analytic: float) -> float:
    return abs(real - analytic) / max(real, EPS)


def real_quant_error(
    model: ModelTensors, masks: list[np.ndarray], quant: QuantAllocation
) -> tuple[np.ndarray, float]:
    """Measured per-layer quantization MSE over unpruned weights, and its sum.

    Layer i contributes (1/N̄_i) Σ_j M_ij (W_ij − Q_i(W_ij))²; a fully
    pruned layer contributes zero.
    """
    if len(masks) != model.num_layers:
        raise ValidationError(f"{len(masks)} masks for {model.num_layers} layers")
    per_layer = np.zeros(model.num_layers)
    for i, (spec, flat) in enumerate(model):
        d = quant.delta[i]
        kept = int(np.asarray(masks[i]).sum())
        if d is None or kept == 0:
            continue
        q = quantize_layer(flat, masks[i], d)
        resid = (flat.astype(np.float64) - q.astype(np.float64)) * (np.asarray(masks[i]) != 0)
        per_layer[i] = float(np.sum(np.square(resid))) / kept
    return per_layer, float(per_layer.sum())


@dataclass(frozen=True)
class SweepRow:
    setting: float
    real_error: float | None
    analytic_error: float | None
    relative_gap: float | None
    error: str | None = None


@dataclass(frozen=True)
class LayerRow:
    setting: float
    layer: str
    real_error: float
    analytic_error: float
    relative_gap: float


@dataclass
class ErrorReport:
    sweep_variable: str
    rows: list[SweepRow] = field(default_factory=list)
    layer_rows: list[LayerRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.sweep_variable not in SWEEP_VARIABLES:
            raise ValidationError(f"unknown sweep variable {self.sweep_variable!r}")
        for row in self.rows:
            if row.error is None and (row.real_error < 0 or row.analytic_error < 0):
                raise ValidationError(f"negative error at setting {row.setting}")


def error_sweep(
    model: ModelTensors,
    sweep_variable: str,
    settings: list[float],
    p_target: float = 0.5,
    B_target: float = 4.0,
    fit_config: FitConfig = FitConfig(),
    fits: list[LaplaceFitResult] | None = None,
) -> ErrorReport:
    """Run the allocation pipeline at each setting and record both errors.

    ``prune_rate`` sweeps p* and compares mask energy against the Laplace
    tail integral; ``bitwidth`` sweeps B at fixed p* and compares measured
    quantization MSE against Σ Δ²/12.
    """
    if sweep_variable not in SWEEP_VARIABLES:
        raise ValidationError(f"unknown sweep variable {sweep_variable!r}")
    report = ErrorReport(
        sweep_variable=sweep_variable,
        config={
            "sweep_variable": sweep_variable,
            "settings": list(settings),
            "p_target": p_target,
            "B_target": B_target,
            "grid_points": fit_config.grid_points,
        },
    )
    if not settings:
        return report
    if fits is None:
        fits = fit_all_layers(model, fit_config)

    shared_pruning = None
    if sweep_variable == "bitwidth":
        shared_pruning = allocate_pruning(model, fits, p_target)

    for setting in settings:
        try:
            if sweep_variable == "prune_rate":
                pruning = allocate_pruning(model, fits, setting)
                beta = pruning.beta[0]
                real_i, analytic_i, real, analytic = pruning_error(model, fits, beta)
            else:
                quant = allocate_quant(model, shared_pruning.masks, setting)
                real_i, real = real_quant_error(model, shared_pruning.masks, quant)
                analytic_i = np.array(
                    [0.0 if d is None else d * d / 12.0 for d in quant.delta]
                )
                analytic = quant_error_estimate(quant.delta)
        except OpqError as e:
            report.rows.append(SweepRow(setting, None, None, None, error=str(e)))
            continue
        report.rows.append(
            SweepRow(setting, real, analytic, relative_gap(real, analytic))
        )
        for name, r, a in zip(model.layer_names, real_i, analytic_i):
            report.layer_rows.append(
                LayerRow(setting, name, float(r), float(a), relative_gap(float(r), float(a)))
            )
    report.validate()
    return report


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def report_csv(report: ErrorReport) -> str:
    """Sweep-level CSV: setting, real, analytic, gap, error."""
    return _csv(
        ["setting", "real_error", "analytic_error", "relative_gap", "error"],
        [
            [row.setting, row.real_error, row.analytic_error, row.relative_gap,
             row.error or ""]
            for row in report.rows
        ],
    )


def layer_csv(report: ErrorReport) -> str:
    """Per-layer breakdown CSV across all sweep settings."""
    return _csv(
        ["setting", "layer", "real_error", "analytic_error", "relative_gap"],
        [
            [row.setting, row.layer, row.real_error, row.analytic_error, row.relative_gap]
            for row in report.layer_rows
        ],
    )
