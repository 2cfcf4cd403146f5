"""Per-layer Laplace scale estimation.

Weight magnitudes of a trained layer are modeled as folded samples of a
zero-centered Laplace density f(x) = (1/2τ) e^{−|x|/τ}, so |w| has CDF
G(x) = 1 − e^{−x/τ}. τ is recovered by least-squares regression of that
model CDF against the empirical one, evaluated on a fixed-size quantile
grid of the nonzero magnitudes: grid point k is the (k+0.5)/g empirical
quantile and carries target probability (k+0.5)/g. Pairing quantiles with
their plotting positions keeps the regression well-posed even when the
magnitudes are heavily tied (a point mass has no density but still has a
well-defined median), and a g-point grid weighs every part of the
distribution equally no matter how large the layer is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ComputationError, ValidationError

__all__ = [
    "FitConfig",
    "LaplaceFitResult",
    "empirical_folded_cdf",
    "fit_laplace",
    "fit_all_layers",
    "laplace_tail_mass",
]


@dataclass(frozen=True)
class FitConfig:
    """Levenberg–Marquardt settings for the CDF regression."""

    grid_points: int = 256
    max_iterations: int = 100
    relative_tolerance: float = 1e-8
    initial_damping: float = 1e-3
    tau_min: float = 1e-20
    tau_max: float = 1e20

    def __post_init__(self):
        if self.grid_points < 1:
            raise ValidationError("grid_points must be positive")
        if not 0 < self.tau_min < self.tau_max:
            raise ValidationError("require 0 < tau_min < tau_max")
        if self.max_iterations < 1 or self.initial_damping <= 0 or self.relative_tolerance <= 0:
            raise ValidationError("LM settings must be positive")


@dataclass(frozen=True)
class LaplaceFitResult:
    """Fitted scale for one layer plus regression diagnostics."""

    tau: float
    rmse: float
    sample_points: int
    converged: bool

    def __post_init__(self):
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ValidationError(f"tau must be positive and finite, got {self.tau}")
        if not (0.0 <= self.rmse <= 1.0):
            raise ValidationError(f"rmse must lie in [0, 1], got {self.rmse}")
        if self.sample_points < 1:
            raise ValidationError("sample_points must be positive")


def empirical_folded_cdf(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Ĝ(x) = #{k : |v_k| ≤ x} / count at each grid point.

    This is the empirical CDF of the folded magnitudes — the quantity the
    Laplace model CDF 1 − e^{−x/τ} is fitted against.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValidationError("empty input")
    if grid.size == 0:
        raise ValidationError("empty grid")
    if np.any(grid < 0):
        raise ValidationError("grid points must be nonnegative")
    if np.any(np.diff(grid) < 0):
        raise ValidationError("grid must be sorted ascending")
    mags = np.sort(np.abs(values))
    counts = np.searchsorted(mags, grid, side="right")
    return counts / values.size


def _residuals(tau: float, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p - (1.0 - np.exp(-x / tau))


def fit_laplace(values: np.ndarray, config: FitConfig = FitConfig()) -> LaplaceFitResult:
    """Fit τ to one layer's weights by damped Gauss–Newton on the CDF grid.

    Initialization is the Laplace maximum-likelihood estimate τ₀ = mean|w|.
    Since τ is the only parameter the normal equations are scalar:
    δ = −Jᵀr / (JᵀJ + μ·JᵀJ) with the usual multiplicative damping schedule.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValidationError("empty input")
    mags = np.abs(values)
    nonzero = mags[mags > 0.0]
    if nonzero.size == 0:
        raise ValidationError("degenerate layer: zero weights")

    g = min(config.grid_points, nonzero.size)
    probs = (np.arange(g) + 0.5) / g
    x = np.quantile(nonzero, probs)
    clamp = lambda t: min(max(t, config.tau_min), config.tau_max)

    tau = clamp(float(np.mean(mags)))
    r = _residuals(tau, x, probs)
    cost = float(r @ r)
    mu = config.initial_damping
    converged = False
    for _ in range(config.max_iterations):
        e = np.exp(-x / tau)
        jac = e * x / tau**2  # ∂r/∂τ
        jtj = float(jac @ jac)
        jtr = float(jac @ r)
        if jtj == 0.0:
            converged = True  # flat residual surface; nothing to improve
            break
        step = -jtr / (jtj * (1.0 + mu))
        trial = clamp(tau + step)
        r_trial = _residuals(trial, x, probs)
        cost_trial = float(r_trial @ r_trial)
        if cost_trial <= cost:
            if abs(trial - tau) / tau < config.relative_tolerance:
                tau, r, cost = trial, r_trial, cost_trial
                converged = True
                break
            tau, r, cost = trial, r_trial, cost_trial
            mu = max(mu / 10.0, 1e-12)
        else:
            mu *= 10.0
            if mu > 1e12:
                break  # damping saturated: current iterate is the best we get

    rmse = float(np.sqrt(cost / g))
    return LaplaceFitResult(tau=tau, rmse=min(rmse, 1.0), sample_points=g, converged=converged)


def fit_all_layers(model, config: FitConfig = FitConfig()) -> list[LaplaceFitResult]:
    """Fit every layer of a model, failing loudly on degenerate layers."""
    results = []
    for spec, flat in model:
        try:
            results.append(fit_laplace(flat, config))
        except ValidationError as e:
            raise ValidationError(f"layer {spec.name}: {e}") from e
    return results


def laplace_tail_mass(tau: float, beta: float) -> float:
    """Model probability that |w| exceeds β: e^{−β/τ}.

    The complementary mass 1 − e^{−β/τ} is the fraction a magnitude
    threshold β prunes from a layer with scale τ.
    """
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    if beta < 0:
        raise ValidationError(f"beta must be nonnegative, got {beta}")
    return float(np.exp(-beta / tau))


def laplace_sample(tau: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw zero-centered Laplace(τ) variates (used by synthesis and tests)."""
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    return rng.laplace(loc=0.0, scale=tau, size=size)


def fits_csv(layer_names: list[str], fits: list[LaplaceFitResult]) -> str:
    """Fit diagnostics table: layer, tau, rmse, sample_points."""
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "tau", "rmse", "sample_points"])
    for name, fit in zip(layer_names, fits):
        writer.writerow([name, fit.tau, fit.rmse, fit.sample_points])
    return buf.getvalue()
