from __future__ import annotations

import json
import shutil

import pytest

from opq import cli
from opq.tensor_store import load_model


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synth → allocate → compress once; read-only for the tests below."""
    root = tmp_path_factory.mktemp("cli")
    model = root / "model"
    alloc = root / "alloc"
    assert cli.main([
        "synth", "--out", str(model),
        "--sizes", "6000,3000", "--taus", "0.1,0.05", "--seed", "11",
    ]) == 0
    assert cli.main([
        "allocate", "--model", str(model), "--out", str(alloc),
        "--prune", "0.6", "--bits", "3",
    ]) == 0
    assert cli.main([
        "compress", "--model", str(model), "--out", str(root / "model.opq"),
        "--pruning", str(alloc / "pruning.art"), "--quant", str(alloc / "quant.art"),
    ]) == 0
    return root


def verify_args(root, compressed="model.opq", model="model", alloc="alloc"):
    return [
        "verify", "--model", str(root / model),
        "--compressed", str(root / compressed),
        "--pruning", str(root / alloc / "pruning.art"),
        "--quant", str(root / alloc / "quant.art"),
    ]


def test_synth_output_loads(workdir):
    model = load_model(workdir / "model")
    assert model.layer_names == ["layer0", "layer1"]
    assert model.total_count == 9000


def test_allocate_outputs(workdir):
    alloc = workdir / "alloc"
    for name in ("fits.csv", "prune_summary.csv", "quant_summary.csv",
                 "pruning.art", "quant.art", "summary.json"):
        assert (alloc / name).exists(), name
    summary = json.loads((alloc / "summary.json").read_text())
    assert summary["p_target"] == 0.6
    assert abs(summary["p_model"] - 0.6) <= 1e-10
    assert abs(summary["p_empirical"] - 0.6) <= 0.05
    assert summary["B_target"] == 3.0
    assert summary["layers"] == ["layer0", "layer1"]


def test_verify_passes(workdir, capsys):
    assert cli.main(verify_args(workdir)) == 0
    out = capsys.readouterr().out
    for invariant in (
        "artifact integrity", "model hash provenance", "provenance fields",
        "mask reproducibility", "bit-exact reconstruction", "rate target",
        "allocation invariants", "size accounting",
    ):
        assert f"PASS {invariant}" in out


def test_verify_catches_corruption(workdir, tmp_path, capsys):
    blob = bytearray((workdir / "model.opq").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "bad.opq"
    bad.write_bytes(bytes(blob))
    args = verify_args(workdir)
    args[args.index("--compressed") + 1] = str(bad)
    assert cli.main(args) == 3
    assert "FAIL" in capsys.readouterr().err


def test_verify_catches_tampered_allocation(workdir, tmp_path, capsys):
    alloc2 = tmp_path / "alloc"
    shutil.copytree(workdir / "alloc", alloc2)
    blob = bytearray((alloc2 / "pruning.art").read_bytes())
    blob[-3] ^= 0x10
    (alloc2 / "pruning.art").write_bytes(bytes(blob))
    args = verify_args(workdir)
    args[args.index("--pruning") + 1] = str(alloc2 / "pruning.art")
    assert cli.main(args) == 3
    assert "FAIL artifact integrity" in capsys.readouterr().err


def test_stale_artifacts_rejected(workdir, tmp_path, capsys):
    other = tmp_path / "other_model"
    assert cli.main([
        "synth", "--out", str(other),
        "--sizes", "6000,3000", "--taus", "0.1,0.05", "--seed", "99",
    ]) == 0
    rc = cli.main([
        "compress", "--model", str(other), "--out", str(tmp_path / "x.opq"),
        "--pruning", str(workdir / "alloc" / "pruning.art"),
        "--quant", str(workdir / "alloc" / "quant.art"),
    ])
    assert rc == 1
    assert "stale artifacts" in capsys.readouterr().err


def test_determinism_byte_identical(workdir, tmp_path):
    alloc2 = tmp_path / "alloc2"
    assert cli.main([
        "allocate", "--model", str(workdir / "model"), "--out", str(alloc2),
        "--prune", "0.6", "--bits", "3",
    ]) == 0
    for name in ("pruning.art", "quant.art", "summary.json"):
        assert (alloc2 / name).read_bytes() == (workdir / "alloc" / name).read_bytes()
    assert cli.main([
        "compress", "--model", str(workdir / "model"), "--out", str(tmp_path / "again.opq"),
        "--pruning", str(alloc2 / "pruning.art"), "--quant", str(alloc2 / "quant.art"),
    ]) == 0
    assert (tmp_path / "again.opq").read_bytes() == (workdir / "model.opq").read_bytes()


def test_gap_bits_flag_roundtrips(workdir, tmp_path, capsys):
    out = tmp_path / "g4.opq"
    assert cli.main([
        "compress", "--model", str(workdir / "model"), "--out", str(out),
        "--pruning", str(workdir / "alloc" / "pruning.art"),
        "--quant", str(workdir / "alloc" / "quant.art"),
        "--gap-bits", "4",
    ]) == 0
    args = verify_args(workdir)
    args[args.index("--compressed") + 1] = str(out)
    assert cli.main(args) == 0
    assert "PASS bit-exact reconstruction" in capsys.readouterr().out


def test_report_outputs(workdir, tmp_path):
    out = tmp_path / "report"
    assert cli.main([
        "report", "--model", str(workdir / "model"), "--out", str(out),
        "--sweep", "bitwidth", "--values", "2,3,4", "--prune", "0.5",
    ]) == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0].startswith("setting,") and len(lines) == 4
    assert (out / "layers.csv").exists()
    assert json.loads((out / "config.json").read_text())["sweep_variable"] == "bitwidth"


def test_layer_filter(workdir, tmp_path):
    out = tmp_path / "one_layer"
    assert cli.main([
        "allocate", "--model", str(workdir / "model"), "--out", str(out),
        "--prune", "0.5", "--bits", "4", "--layers", "layer1",
    ]) == 0
    assert json.loads((out / "summary.json").read_text())["layers"] == ["layer1"]


def test_exclude_everything_fails(workdir, tmp_path, capsys):
    rc = cli.main([
        "allocate", "--model", str(workdir / "model"), "--out", str(tmp_path / "x"),
        "--prune", "0.5", "--bits", "4", "--exclude", "layer0,layer1",
    ])
    assert rc == 1
    assert "excludes every layer" in capsys.readouterr().err


def test_bad_prune_rate(workdir, tmp_path, capsys):
    rc = cli.main([
        "allocate", "--model", str(workdir / "model"), "--out", str(tmp_path / "x"),
        "--prune", "1.0", "--bits", "4",
    ])
    assert rc == 1
    assert "strictly in (0, 1)" in capsys.readouterr().err


def test_missing_required_option(workdir, capsys):
    rc = cli.main(["allocate", "--model", str(workdir / "model"), "--prune", "0.5",
                   "--bits", "4"])
    assert rc == 1
    assert "missing required option --out" in capsys.readouterr().err


def test_config_file_fills_missing_flags(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "model": str(workdir / "model"), "prune": 0.7, "bits": 4,
    }))
    out = tmp_path / "from_config"
    assert cli.main(["allocate", "--config", str(cfg), "--out", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["p_target"] == 0.7


def test_explicit_flags_beat_config(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "model": str(workdir / "model"), "prune": 0.7, "bits": 4,
    }))
    out = tmp_path / "flag_wins"
    assert cli.main([
        "allocate", "--config", str(cfg), "--out", str(out), "--prune", "0.3",
    ]) == 0
    assert json.loads((out / "summary.json").read_text())["p_target"] == 0.3


def test_unknown_config_key(workdir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"modle": "typo"}))
    rc = cli.main(["allocate", "--config", str(cfg), "--out", str(tmp_path / "x"),
                   "--prune", "0.5", "--bits", "4"])
    assert rc == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_missing_model_dir(tmp_path, capsys):
    rc = cli.main([
        "allocate", "--model", str(tmp_path / "nowhere"), "--out", str(tmp_path / "x"),
        "--prune", "0.5", "--bits", "4",
    ])
    assert rc == 1