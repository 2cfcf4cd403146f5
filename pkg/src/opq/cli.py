"""Command-line pipeline driver: fit → allocate → compress → report → verify.

Commands
    synth      write a synthetic Laplace model container (test fixture)
    allocate   fit scales, solve pruning threshold and quantization steps
    compress   apply the operator and write the sparse compressed file
    verify     decode, recompute from scratch, and check every invariant
    report     real-vs-analytic error sweeps over p* or B

Flags always win over the optional JSON config file (--config). Exit codes:
0 success, 1 validation error, 2 computation failure, 3 verification failure.
All outputs are deterministic functions of the inputs — no timestamps.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, codec, laplace_fit, prune_alloc, quant_alloc, synth
from .errors import (
    ArtifactIOError,
    ComputationError,
    FormatError,
    OpqError,
    ValidationError,
    VerificationError,
)
from .laplace_fit import FitConfig
from .tensor_store import load_model, load_artifact, save_artifact, save_model

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_COMPUTATION = 2
EXIT_VERIFICATION = 3

# flags that may be preset in a --config JSON file; command-line values win
CONFIG_KEYS = (
    "model", "out", "prune", "bits", "tol", "fit_grid", "gap_bits",
    "layers", "exclude", "channel_axis", "seed", "sweep", "values",
    "sizes", "taus", "channels", "pruning", "quant", "compressed",
)


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    path = getattr(args, "config", None)
    if not path:
        return args
    try:
        with open(path, "r", encoding="utf-8") as f:
            file_cfg = json.load(f)
    except OSError as e:
        raise ValidationError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed config file {path}: {e}") from e
    if not isinstance(file_cfg, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    unknown = set(file_cfg) - set(CONFIG_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    for key, value in file_cfg.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def _csv_list(text, kind=float) -> list:
    if isinstance(text, (list, tuple)):
        return [kind(v) for v in text]
    try:
        return [kind(part) for part in str(text).split(",") if part != ""]
    except ValueError as e:
        raise ValidationError(f"bad list value {text!r}: {e}") from e


def _load_filtered_model(args):
    model = load_model(args.model, channel_axis_override=args.channel_axis)
    if getattr(args, "layers", None):
        model = model.select(_csv_list(args.layers, str))
    if getattr(args, "exclude", None):
        drop = set(_csv_list(args.exclude, str))
        keep = [n for n in model.layer_names if n not in drop]
        if not keep:
            raise ValidationError("layer filter excludes every layer")
        model = model.select(keep)
    return model


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise ValidationError(f"missing required option --{name.replace('_', '-')}")


def _check_rates(p_target: float | None = None, bits: float | None = None) -> None:
    if p_target is not None and not 0.0 < p_target < 1.0:
        raise ValidationError(f"--prune must lie strictly in (0, 1), got {p_target}")
    if bits is not None and not bits > 0:
        raise ValidationError(f"--bits must be positive, got {bits}")


def _write_text(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}") from e


def cmd_synth(args) -> int:
    _require(args, "out", "sizes", "taus")
    seed = int(args.seed if args.seed is not None else 0)
    model = synth.make_model(
        taus=_csv_list(args.taus),
        counts=_csv_list(args.sizes, int),
        seed=seed,
        channels=_csv_list(args.channels, int) if args.channels else None,
    )
    save_model(model, args.out)
    print(f"wrote {model.num_layers} layers, {model.total_count} weights to {args.out}")
    return EXIT_OK


def cmd_allocate(args) -> int:
    _require(args, "model", "out", "prune", "bits")
    _check_rates(args.prune, args.bits)
    tol = float(args.tol if args.tol is not None else 1e-10)
    model = _load_filtered_model(args)
    fit_config = FitConfig(grid_points=int(args.fit_grid) if args.fit_grid else 256)

    # compute everything first; only then touch the filesystem
    fits = laplace_fit.fit_all_layers(model, fit_config)
    pruning = prune_alloc.allocate_pruning(model, fits, float(args.prune), tol)
    quant = quant_alloc.allocate_quant(model, pruning.masks, float(args.bits))
    real_err, model_err, real_total, model_total = prune_alloc.pruning_error(
        model, fits, pruning.beta[0]
    )
    summary = {
        "model_hash": pruning.model_hash,
        "p_target": pruning.p_target,
        "p_model": pruning.p_model,
        "p_empirical": pruning.p_empirical,
        "lambda_p": pruning.lambda_p,
        "beta": pruning.beta[0],
        "B_target": quant.B_target,
        "lambda_q": quant.lambda_q,
        "B_effective_continuous": quant.B_effective_continuous,
        "B_effective_rounded": quant.B_effective_rounded,
        "pruning_error_real": real_total,
        "pruning_error_model": model_total,
        "quant_error_estimate": quant_alloc.quant_error_estimate(quant.delta),
        "layers": model.layer_names,
    }

    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "fits.csv"),
                laplace_fit.fits_csv(model.layer_names, fits))
    _write_text(os.path.join(args.out, "prune_summary.csv"),
                prune_alloc.summary_csv(pruning, fits, real_err, model_err))
    _write_text(os.path.join(args.out, "quant_summary.csv"),
                quant_alloc.summary_csv(quant))
    save_artifact(pruning, os.path.join(args.out, "pruning.art"))
    save_artifact(quant, os.path.join(args.out, "quant.art"))
    _write_text(os.path.join(args.out, "summary.json"),
                json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"p_model {pruning.p_model:.6f}  p_empirical {pruning.p_empirical:.6f}  "
          f"beta {pruning.beta[0]:.6g}")
    print(f"B_effective {quant.B_effective_rounded:.4f}  "
          f"(continuous {quant.B_effective_continuous:.6f})")
    return EXIT_OK


def _load_allocations(args, model):
    pruning = load_artifact(args.pruning)
    quant = load_artifact(args.quant)
    if not isinstance(pruning, prune_alloc.PruningAllocation):
        raise ValidationError(f"{args.pruning} is not a pruning allocation")
    if not isinstance(quant, quant_alloc.QuantAllocation):
        raise ValidationError(f"{args.quant} is not a quantization allocation")
    model_hash = model.content_hash()
    for label, artifact in (("pruning", pruning), ("quantization", quant)):
        if artifact.model_hash != model_hash:
            raise ValidationError(
                f"stale artifacts: {label} allocation was computed for a different model "
                f"(hash {artifact.model_hash[:12]}… vs {model_hash[:12]}…)"
            )
    return pruning, quant


def cmd_compress(args) -> int:
    _require(args, "model", "out", "pruning", "quant")
    model = _load_filtered_model(args)
    pruning, quant = _load_allocations(args, model)
    gap_bits = int(args.gap_bits if args.gap_bits is not None else codec.DEFAULT_GAP_BITS)
    compressed = codec.encode(
        model, pruning.masks, quant, gap_bits=gap_bits,
        provenance={"p_target": pruning.p_target, "lambda_p": pruning.lambda_p},
    )
    save_artifact(compressed, args.out)
    n = model.total_count
    ideal = codec.compression_rate(
        pruning.p_empirical, quant.B_effective_rounded, 0, n
    )
    actual = codec.measured_rate(n, os.path.getsize(args.out))
    print(f"ideal rate {ideal:.2f}x  actual rate {actual:.2f}x  "
          f"({os.path.getsize(args.out)} bytes for {n} weights)")
    return EXIT_OK


def cmd_verify(args) -> int:
    _require(args, "model", "compressed", "pruning", "quant")
    model = _load_filtered_model(args)

    def check(invariant: str, ok: bool, detail: str = "") -> None:
        if not ok:
            raise VerificationError(f"{invariant}: {detail}" if detail else invariant)
        print(f"PASS {invariant}")

    try:
        pruning, quant = _load_allocations(args, model)
        compressed = load_artifact(args.compressed)
        if not isinstance(compressed, codec.CompressedModel):
            raise ValidationError(f"{args.compressed} is not a compressed model")
    except (FormatError, ValidationError) as e:
        raise VerificationError(f"artifact integrity: {e}") from e

    check("artifact integrity", True)
    check("model hash provenance", compressed.model_hash == model.content_hash(),
          "compressed file was built from a different model")
    prov = compressed.provenance
    expected = {
        "B_target": quant.B_target,
        "B_effective_rounded": quant.B_effective_rounded,
        "p_target": pruning.p_target,
        "p_empirical": pruning.p_empirical,
        "lambda_p": pruning.lambda_p,
    }
    # every field must be present and exactly equal, so a corrupted header
    # cannot hide behind an unchecked or silently dropped key
    check("provenance fields",
          all(prov.get(key) == value for key, value in expected.items()),
          "compressed header disagrees with allocation artifacts")

    rebuilt_masks, _, _ = prune_alloc.build_masks(model, pruning.beta[0])
    check("mask reproducibility",
          all(np.array_equal(a, b) for a, b in zip(rebuilt_masks, pruning.masks)),
          "stored masks do not match magnitude thresholding at stored beta")

    decoded = codec.decode(compressed)
    for i, (spec, flat) in enumerate(model):
        if quant.delta[i] is None:
            reference = np.zeros(spec.count, dtype=np.float32)
        else:
            reference = codec.quantize_layer(flat, pruning.masks[i], quant.delta[i])
        got = decoded.values(i)
        if got.tobytes() != reference.tobytes():
            bad = int(np.flatnonzero(got.view(np.uint32) != reference.view(np.uint32))[0])
            raise VerificationError(
                f"bit-exact reconstruction: layer {spec.name} differs at index {bad}"
            )
    check("bit-exact reconstruction", True)

    check("rate target",
          abs(pruning.p_model - pruning.p_target) <= pruning.tolerance,
          f"p_model {pruning.p_model} vs p_target {pruning.p_target}")
    try:
        quant.validate()
        pruning.validate()
    except ValidationError as e:
        raise VerificationError(f"allocation invariants: {e}") from e
    check("allocation invariants", True)

    n = model.total_count
    ideal_bytes = (1.0 - pruning.p_empirical) * quant.B_effective_rounded * n / 8.0
    actual_bytes = os.path.getsize(args.compressed)
    check("size accounting", actual_bytes >= ideal_bytes,
          f"file {actual_bytes} bytes below ideal {ideal_bytes:.0f}")
    print(f"verified {decoded.total_count} weights across {decoded.num_layers} layers")
    return EXIT_OK


def cmd_report(args) -> int:
    _require(args, "model", "out", "sweep", "values")
    p_target = float(args.prune) if args.prune is not None else 0.5
    bits = float(args.bits) if args.bits is not None else 4.0
    _check_rates(p_target, bits)
    model = _load_filtered_model(args)
    report = analysis.error_sweep(
        model,
        sweep_variable=args.sweep,
        settings=_csv_list(args.values),
        p_target=p_target,
        B_target=bits,
        fit_config=FitConfig(grid_points=int(args.fit_grid) if args.fit_grid else 256),
    )
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "report.csv"), analysis.report_csv(report))
    _write_text(os.path.join(args.out, "layers.csv"), analysis.layer_csv(report))
    _write_text(os.path.join(args.out, "config.json"),
                json.dumps(report.config, indent=2, sort_keys=True) + "\n")
    failures = [r for r in report.rows if r.error]
    print(f"{len(report.rows)} sweep rows ({len(failures)} failed) -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opq",
        description="One-shot pruning and unified channel-wise quantization of weight tensors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file presetting any flag; explicit flags win")
        p.add_argument("--model", help="model container directory")
        p.add_argument("--layers", help="comma list of layer names to include")
        p.add_argument("--exclude", help="comma list of layer names to drop")
        p.add_argument("--channel-axis", dest="channel_axis", type=int,
                       help="override the channel axis of every layer")

    p = sub.add_parser("synth", help="generate a synthetic Laplace model")
    common(p)
    p.add_argument("--out", help="output model directory")
    p.add_argument("--sizes", help="comma list of per-layer weight counts")
    p.add_argument("--taus", help="comma list of per-layer Laplace scales")
    p.add_argument("--channels", help="comma list of per-layer channel counts")
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("allocate", help="fit, solve threshold and steps, write artifacts")
    common(p)
    p.add_argument("--out", help="output directory for artifacts")
    p.add_argument("--prune", type=float, help="target pruning rate p* in (0,1)")
    p.add_argument("--bits", type=float, help="target average bitwidth B > 0")
    p.add_argument("--tol", type=float, help="threshold solver tolerance (default 1e-10)")
    p.add_argument("--fit-grid", dest="fit_grid", type=int,
                   help="quantile grid size for scale fitting (default 256)")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("compress", help="encode the compressed model file")
    common(p)
    p.add_argument("--out", help="output compressed file")
    p.add_argument("--pruning", help="pruning allocation artifact")
    p.add_argument("--quant", help="quantization allocation artifact")
    p.add_argument("--gap-bits", dest="gap_bits", type=int,
                   help="bits per index gap (default 8)")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("verify", help="check reconstruction and invariants")
    common(p)
    p.add_argument("--compressed", help="compressed model file")
    p.add_argument("--pruning", help="pruning allocation artifact")
    p.add_argument("--quant", help="quantization allocation artifact")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="real-vs-analytic error sweep")
    common(p)
    p.add_argument("--out", help="output directory for report CSVs")
    p.add_argument("--sweep", choices=sorted(analysis.SWEEP_VARIABLES),
                   help="which variable to sweep")
    p.add_argument("--values", help="comma list of sweep settings")
    p.add_argument("--prune", type=float, help="fixed p* for bitwidth sweeps (default 0.5)")
    p.add_argument("--bits", type=float, help="fixed B for prune-rate sweeps (default 4)")
    p.add_argument("--fit-grid", dest="fit_grid", type=int, help="quantile grid size")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = _merge_config(parser.parse_args(argv))
        return args.func(args)
    except VerificationError as e:
        print(f"FAIL {e}", file=sys.stderr)
        return EXIT_VERIFICATION
    except ComputationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_COMPUTATION
    except OpqError as e:  # validation, format, and I/O problems
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
