"""Secondary acceptance: recovery under a frozen allocation, and bit-level
agreement with the engine's quantizer. One PASS/FAIL line per criterion."""

import copy
from contextlib import contextmanager

import numpy as np
import torch

import opq_harness as h
from opq.codec import quantize_layer
from opq.tensor_store import load_artifact


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"FAIL {name}")
        raise
    print(f"PASS {name}")


def test_finetune_recovery(trained, allocated):
    with criterion("p*=0.8, B=4 finetune recovers within 1.5 points; allocation frozen"):
        net, baseline_rows = trained
        baseline = baseline_rows[-1].test_accuracy
        art_bytes_before = {
            path: open(allocated[path], "rb").read()
            for path in ("pruning_path", "quant_path")
        }

        student = copy.deepcopy(net)
        cfg = h.FinetuneConfig(
            pruning_path=allocated["pruning_path"],
            quant_path=allocated["quant_path"],
            max_epochs=14,
            learning_rate=0.01,
            two_stage=True,
            stage1_epochs=4,
            seed=1,
        )
        rows = h.finetune(student, cfg)
        recovered = rows[-1].test_accuracy
        assert baseline - recovered <= 0.015, (
            f"baseline {baseline:.4f} vs recovered {recovered:.4f}"
        )

        # masks and steps byte-identical before/after the whole run
        for path, before in art_bytes_before.items():
            assert open(allocated[path], "rb").read() == before
        reloaded_p = load_artifact(allocated["pruning_path"])
        reloaded_q = load_artifact(allocated["quant_path"])
        for a, b in zip(reloaded_p.masks, allocated["pruning"].masks):
            assert np.array_equal(a, b)
        assert reloaded_q.delta == allocated["quant"].delta


def test_cross_component_consistency():
    with criterion("harness Ŵ equals engine codec output bit-exactly (100 layers)"):
        rng = np.random.default_rng(88)
        for _ in range(100):
            n = int(rng.integers(1, 5000))
            scale = float(rng.uniform(0.001, 1.0))
            w = rng.laplace(0.0, scale, size=n).astype(np.float32)
            mask = (rng.random(n) > rng.uniform(0.0, 0.95)).astype(np.uint8)
            delta = float(np.float32(rng.uniform(1e-5, 0.5)))
            ours = h.hard_quantize(
                torch.from_numpy(w), torch.from_numpy(mask), delta
            ).numpy()
            theirs = quantize_layer(w, mask, delta)
            assert ours.tobytes() == theirs.tobytes()
