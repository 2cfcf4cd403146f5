import copy

import pytest
import torch

import opq_harness as h
from opq.laplace_fit import fit_all_layers
from opq.prune_alloc import allocate_pruning
from opq.quant_alloc import allocate_quant
from opq.tensor_store import load_model, save_artifact


@pytest.fixture(scope="session")
def trained():
    """Baseline checkpoint shared across tests; never mutate — deepcopy first."""
    torch.manual_seed(0)
    net = h.ToyConvNet()
    rows = h.train_baseline(net, epochs=12)
    return net, rows


@pytest.fixture(scope="session")
def allocated(trained, tmp_path_factory):
    """p*=0.8, B=4 artifacts computed on the baseline export."""
    net, _ = trained
    root = tmp_path_factory.mktemp("alloc")
    h.export_weights(net, root / "model")
    model = load_model(root / "model")
    fits = fit_all_layers(model)
    pruning = allocate_pruning(model, fits, 0.8)
    quant = allocate_quant(model, pruning.masks, 4.0)
    save_artifact(pruning, root / "pruning.art")
    save_artifact(quant, root / "quant.art")
    return {
        "root": root,
        "pruning_path": str(root / "pruning.art"),
        "quant_path": str(root / "quant.art"),
        "pruning": pruning,
        "quant": quant,
    }


@pytest.fixture()
def fresh(trained):
    net, _ = trained
    return copy.deepcopy(net)
