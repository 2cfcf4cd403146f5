from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opq import synth
from opq.errors import ValidationError
from opq.laplace_fit import LaplaceFitResult, fit_all_layers
from opq.prune_alloc import (
    PruningAllocation,
    allocate_pruning,
    build_masks,
    model_prune_rate,
    pruning_error,
    solve_threshold,
)
from opq.tensor_store import LayerSpec, ModelTensors


def fits_for(taus):
    return [LaplaceFitResult(tau=t, rmse=0.0, sample_points=256, converged=True)
            for t in taus]


def specs_for(counts):
    return [LayerSpec(f"l{i}", (c,)) for i, c in enumerate(counts)]


def bisect_oracle(taus, counts, p_target, tol=1e-12):
    """Independent threshold solver: plain bisection on the same rate function."""
    taus = np.asarray(taus, float)
    counts = np.asarray(counts, float)
    total = counts.sum()

    def rate(u):
        return float(np.sum(counts * (1.0 - np.exp(-u / taus))) / total)

    lo, hi = 0.0, float(taus.max()) * math.log(1.0 / (1.0 - p_target))
    assert rate(hi) >= p_target
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(mid) < p_target:
            lo = mid
        else:
            hi = mid
        if abs(rate(mid) - p_target) <= tol:
            return mid
    return 0.5 * (lo + hi)


# --- model prune rate -------------------------------------------------------


def test_rate_zero_threshold():
    assert model_prune_rate(fits_for([0.1]), specs_for([100]), 0.0) == 0.0


def test_rate_single_layer_analytic():
    # beta = tau ln 4 leaves exactly a quarter of the mass
    assert model_prune_rate(
        fits_for([0.1]), specs_for([100]), 0.1 * math.log(4.0)
    ) == pytest.approx(0.75, rel=1e-12)


def test_rate_two_layer_derived():
    # N equal, tau 0.1 / 0.2, beta 0.1: mean of (1-e^-1) and (1-e^-0.5)
    got = model_prune_rate(fits_for([0.1, 0.2]), specs_for([500, 500]), 0.1)
    assert got == pytest.approx(0.5127949495579621, rel=1e-12)  # frozen oracle


def test_rate_validates_inputs():
    with pytest.raises(ValidationError, match="fits for"):
        model_prune_rate(fits_for([0.1]), specs_for([10, 10]), 0.1)
    with pytest.raises(ValidationError, match="nonnegative"):
        model_prune_rate(fits_for([0.1]), specs_for([10]), -0.1)


# --- threshold solve --------------------------------------------------------


def test_solve_single_layer_closed_form():
    lam, beta = solve_threshold(fits_for([0.1]), specs_for([1000]), 0.5)
    assert beta == pytest.approx(0.1 * math.log(2.0), rel=1e-10)
    assert lam == pytest.approx(beta * beta, rel=1e-12)


def test_solve_single_layer_derived():
    _, beta = solve_threshold(fits_for([0.05]), specs_for([1000]), 0.9)
    assert beta == pytest.approx(0.1151292546497023, rel=1e-10)  # 0.05 ln 10, frozen


def test_solve_matches_bisection_oracle_multilayer():
    taus = [0.02, 0.07, 0.13, 0.3]
    counts = [1000, 3000, 2000, 500]
    for p in (0.1, 0.5, 0.77, 0.95):
        _, beta = solve_threshold(fits_for(taus), specs_for(counts), p)
        want = bisect_oracle(taus, counts, p)
        assert abs(beta - want) <= 1e-9 * max(1.0, want)


def test_solve_validates_target():
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValidationError, match="p_target"):
            solve_threshold(fits_for([0.1]), specs_for([10]), bad)


def test_solve_scale_equivariance():
    taus = np.array([0.02, 0.07, 0.13])
    counts = [1000, 3000, 2000]
    _, beta = solve_threshold(fits_for(taus), specs_for(counts), 0.6)
    for c in (0.5, 2.0, 31.0):
        _, beta_c = solve_threshold(fits_for(c * taus), specs_for(counts), 0.6)
        assert beta_c == pytest.approx(c * beta, rel=1e-9)
        # per-layer model rates are scale-free
        for t in taus:
            assert math.exp(-beta_c / (c * t)) == pytest.approx(
                math.exp(-beta / t), rel=1e-9
            )


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(0.005, 0.5), min_size=1, max_size=6),
    st.floats(0.01, 0.99),
    st.integers(0, 10**6),
)
def test_solve_hits_target_property(taus, p, seed):
    rng = np.random.default_rng(seed)
    counts = [int(c) for c in rng.integers(100, 10000, size=len(taus))]
    fits, specs = fits_for(taus), specs_for(counts)
    _, beta = solve_threshold(fits, specs, p)
    assert model_prune_rate(fits, specs, beta) == pytest.approx(p, abs=1e-10)


# --- masks -------------------------------------------------------------------


def one_layer(values):
    return ModelTensors([(LayerSpec("w", (len(values),)),
                          np.array(values, dtype=np.float32))])


def test_masks_zero_threshold_keeps_everything():
    m = one_layer([0.1, -0.3, 0.05, 0.5])
    masks, rates, p = build_masks(m, 0.0)
    assert masks[0].tolist() == [1, 1, 1, 1]
    assert rates == [0.0] and p == 0.0


def test_masks_above_max_prunes_everything():
    m = one_layer([0.1, -0.3, 0.05, 0.5])
    masks, rates, p = build_masks(m, 0.5)  # boundary |w| = beta pruned too
    assert masks[0].tolist() == [0, 0, 0, 0]
    assert rates == [1.0] and p == 1.0


def test_masks_boundary_is_pruned():
    # 0.125 is exact in binary32 and binary64, so |w| == beta holds exactly
    m = one_layer([0.125, -0.3, 0.05, 0.5])
    masks, _, _ = build_masks(m, 0.125)
    assert masks[0].tolist() == [0, 1, 0, 1]


def test_empirical_rate_tracks_target(big_model):
    fits = fit_all_layers(big_model)
    for p in (0.3, 0.6, 0.9):
        alloc = allocate_pruning(big_model, fits, p)
        assert abs(alloc.p_empirical - p) <= 0.02


# --- pruning error -----------------------------------------------------------


def test_pruning_error_zero_threshold(small_model):
    fits = fit_all_layers(small_model)
    real, analytic, rt, at = pruning_error(small_model, fits, 0.0)
    assert rt == 0.0 and np.all(real == 0.0)
    assert at == pytest.approx(0.0, abs=1e-15) and np.allclose(analytic, 0.0)


def test_pruning_error_single_term():
    m = one_layer([0.1, 0.3])
    real, _, _, _ = pruning_error(m, fits_for([0.1]), 0.2)
    assert real[0] == pytest.approx(0.01, rel=1e-6)  # f32 0.1 squared


def test_closed_form_matches_quadrature():
    # scipy quadrature of 2 N int_0^beta x^2 f(x) dx is the oracle
    from scipy import integrate

    tau, beta, n = 0.07, 0.11, 1000
    density = lambda x: (1.0 / (2.0 * tau)) * math.exp(-abs(x) / tau)
    quad, _ = integrate.quad(lambda x: x * x * density(x), 0.0, beta,
                             epsabs=1e-14, epsrel=1e-14)
    oracle = 2 * n * quad
    assert oracle == pytest.approx(2.0509926195436883, rel=1e-10)  # frozen
    m = ModelTensors([(LayerSpec("w", (n,)), np.full(n, 5.0, dtype=np.float32))])
    _, analytic, _, _ = pruning_error(m, fits_for([tau]), beta)
    assert analytic[0] == pytest.approx(oracle, rel=1e-10)


def test_model_error_tracks_real_error_on_laplace():
    # Monte-Carlo: at beta = tau on 1e6 samples the Laplace integral predicts
    # the actually-removed energy within 5%
    tau, n = 0.05, 10**6
    rng = np.random.default_rng(99)
    w = rng.laplace(0.0, tau, size=n).astype(np.float32)
    m = ModelTensors([(LayerSpec("w", (n,)), w)])
    real, analytic, _, _ = pruning_error(m, fits_for([tau]), tau)
    assert abs(real[0] - analytic[0]) / real[0] <= 0.05


def test_error_monotone_in_threshold(small_model):
    fits = fit_all_layers(small_model)
    betas = [0.01, 0.05, 0.1, 0.2]
    reals, models = [], []
    for b in betas:
        _, _, rt, at = pruning_error(small_model, fits, b)
        reals.append(rt)
        models.append(at)
    assert reals == sorted(reals)
    assert models == sorted(models)


# --- full allocation / artifact ----------------------------------------------


def test_allocation_invariants(small_model):
    fits = fit_all_layers(small_model)
    alloc = allocate_pruning(small_model, fits, 0.7)
    root = math.sqrt(alloc.lambda_p)
    assert all(b == pytest.approx(root, rel=1e-12) for b in alloc.beta)
    assert abs(alloc.p_model - 0.7) <= alloc.tolerance
    zeros = sum(c - int(m.sum()) for c, m in zip(alloc.layer_counts, alloc.masks))
    assert alloc.p_empirical == pytest.approx(zeros / small_model.total_count, abs=1e-15)
    alloc.validate()


def test_allocation_artifact_roundtrip(small_model, tmp_path):
    from opq.tensor_store import load_artifact, save_artifact

    fits = fit_all_layers(small_model)
    alloc = allocate_pruning(small_model, fits, 0.55)
    save_artifact(alloc, tmp_path / "p.art")
    back = load_artifact(tmp_path / "p.art")
    assert isinstance(back, PruningAllocation)
    assert back.lambda_p == alloc.lambda_p  # bit-exact scalar storage
    assert back.beta == alloc.beta
    assert back.p_model == alloc.p_model
    assert all(np.array_equal(a, b) for a, b in zip(back.masks, alloc.masks))
    # byte-identical when re-serialized
    save_artifact(back, tmp_path / "p2.art")
    assert (tmp_path / "p.art").read_bytes() == (tmp_path / "p2.art").read_bytes()


def test_validate_catches_tampered_rate(small_model):
    fits = fit_all_layers(small_model)
    alloc = allocate_pruning(small_model, fits, 0.5)
    alloc.p_empirical += 0.01
    with pytest.raises(ValidationError, match="p_empirical"):
        alloc.validate()
