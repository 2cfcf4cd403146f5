from __future__ import annotations

import numpy as np
import pytest

from opq import synth


@pytest.fixture(scope="session")
def small_model():
    """Three-layer synthetic model, fast enough for every test."""
    return synth.make_model([0.05, 0.1, 0.02], [8000, 16000, 4000], seed=7)


@pytest.fixture(scope="session")
def big_model():
    """Five layers at 1e5+ weights each — the statistical-acceptance fixture."""
    return synth.make_model(
        [0.02, 0.05, 0.08, 0.1, 0.15],
        [100_000, 120_000, 100_000, 160_000, 100_000],
        seed=42,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
