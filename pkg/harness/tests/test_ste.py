import numpy as np
import pytest
import torch

from opq.codec import quantize_layer
from opq_harness.ste import hard_quantize, masked_quantize


def test_matches_engine_codec_bitwise():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(1, 2000))
        w = rng.laplace(0.0, 0.1, size=n).astype(np.float32)
        mask = (rng.random(n) > 0.5).astype(np.uint8)
        delta = float(rng.uniform(1e-4, 0.3))
        ours = hard_quantize(torch.from_numpy(w), torch.from_numpy(mask), delta)
        ref = quantize_layer(w, mask, delta)
        assert ours.numpy().tobytes() == ref.tobytes()


def test_identity_path_keeps_bits():
    w = torch.tensor([0.37, -0.0, 1e-30, -0.5], dtype=torch.float32)
    out = hard_quantize(w, torch.ones(4, dtype=torch.bool), None)
    assert out.numpy().tobytes() == w.numpy().tobytes()  # even -0.0 survives


def test_pruned_positions_are_positive_zero():
    w = torch.tensor([0.37, -0.9], dtype=torch.float32)
    out = hard_quantize(w, torch.zeros(2, dtype=torch.bool), 0.1)
    assert out.numpy().tobytes() == np.zeros(2, dtype=np.float32).tobytes()


def test_ste_gradient_is_the_mask():
    w = torch.tensor([0.37, -0.23, 0.11, 0.92], requires_grad=True)
    mask = torch.tensor([1, 0, 1, 1], dtype=torch.bool)
    g = torch.tensor([2.0, 3.0, -1.0, 0.5])
    loss = (masked_quantize(w, mask, 0.1) * g).sum()
    loss.backward()
    assert torch.equal(w.grad, g * mask)  # identity through Q, zero where pruned


def test_finite_difference_slope_near_identity():
    # Q is a staircase; across a span of ~2000 steps its mean slope is 1
    delta = 1e-4
    w = torch.tensor([0.2503], dtype=torch.float64)
    span = 2000 * delta
    mask = torch.ones(1, dtype=torch.bool)
    hi = hard_quantize((w + span / 2).float(), mask, delta).double()
    lo = hard_quantize((w - span / 2).float(), mask, delta).double()
    slope = float((hi - lo) / span)
    assert slope == pytest.approx(1.0, abs=1e-3)


def test_gradients_never_reach_pruned_weights():
    torch.manual_seed(0)
    w = torch.randn(64, requires_grad=True)
    mask = torch.zeros(64, dtype=torch.bool)
    mask[::2] = True
    out = masked_quantize(w, mask, 0.05)
    out.square().sum().backward()
    assert torch.all(w.grad[~mask] == 0)
    assert torch.any(w.grad[mask] != 0)
