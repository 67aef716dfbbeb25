"""Command-line surface.

Subcommands: quantize, eval, bench, illposed-demo, gradcheck. Exit codes:
0 success, 1 validation/usage error, 2 numeric error. Output files are
deterministic for identical arguments and inputs (reports carry the seed and
toolkit version, never timestamps).
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import __version__
from .errors import ConvergenceError, NumericError, PreconditionError
from .fbcore import (
    MODEL_METHODS,
    OptimizerSettings,
    gradient_check,
    quantize_model,
)
from .illposed import make_scenario, run_illposed_demo
from .io import load_bundle, load_fbq, render_line_chart, save_fbq, write_json
from .linalg import gram
from .quantizer import QuantConfig, dequantize
from .runtime import CostModelQuery, active_backend, available_backends, benchmark

_SHAPE_PRESETS = {
    "decode": CostModelQuery(b=1, d=4096, r=128),
    "prefill": CostModelQuery(b=256, d=4096, r=128),
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; 2 is reserved for numeric
    # failures here, so remap to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _parse_shapes(text: str):
    shapes = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item in _SHAPE_PRESETS:
            shapes.append(_SHAPE_PRESETS[item])
            continue
        parts = item.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"bad shape {item!r}: want a preset name or BxDxR")
        b, d, r = (int(p) for p in parts)
        shapes.append(CostModelQuery(b=b, d=d, r=r))
    if not shapes:
        raise ValueError("no shapes given")
    return shapes


def _parse_alphas(text: str):
    alphas = tuple(float(a) for a in text.split(",") if a.strip())
    if not alphas:
        raise ValueError("no alphas given")
    return alphas


def _meta(args, seed) -> dict:
    return {"tool": "fbquant", "version": __version__, "seed": seed}


def cmd_quantize(args) -> int:
    records = load_bundle(args.bundle)
    qconfig = QuantConfig(bits=args.bits, group_size=args.group)
    settings = OptimizerSettings(
        epochs=args.epochs,
        learning_rate=args.lr,
        rank=args.rank,
        seed=args.seed,
        sigma_init=args.sigma_init,
        step_rule=args.step_rule,
    )
    results = quantize_model(records, qconfig, settings, args.method)
    save_fbq(args.out, [(rec.name, r.q, r.sub) for rec, r in zip(records, results)], qconfig)
    if args.report:
        report = _meta(args, args.seed)
        report.update(
            {
                "method": args.method,
                "qconfig": qconfig.to_dict(),
                "settings": {
                    "epochs": settings.epochs,
                    "learning_rate": settings.learning_rate,
                    "rank": settings.rank,
                    "sigma_init": settings.sigma_init,
                    "step_rule": settings.step_rule,
                },
                "layers": [r.report.to_dict() for r in results],
            }
        )
        write_json(args.report, report)
    if args.plot:
        series = [
            (r.report.layer, list(range(len(r.report.loss_per_epoch))), r.report.loss_per_epoch)
            for r in results
        ]
        with open(args.plot, "w", encoding="utf-8") as fh:
            fh.write(render_line_chart(series, "reconstruction loss", "epoch", "loss"))
    print(f"quantized {len(results)} layer(s) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    records = load_bundle(args.bundle)
    qconfig, fbq_layers = load_fbq(args.model)
    by_name = {layer.name: layer for layer in fbq_layers}
    rows = []
    for rec in records:
        if rec.name not in by_name:
            raise PreconditionError(f"model has no layer {rec.name!r}")
        layer = by_name[rec.name]
        w = rec.w
        w_f = dequantize(layer.q).astype(np.float64) + layer.sub.dense().astype(np.float64)
        g = gram(rec.x)
        ref = float(((w @ g) * w).sum())
        err = float((((w - w_f) @ g) * (w - w_f)).sum())
        rel = math.sqrt(err) / max(math.sqrt(ref), 1e-300)
        rows.append({"name": rec.name, "rel_output_error": rel})
    report = _meta(args, None)
    del report["seed"]
    report.update({"qconfig": qconfig.to_dict(), "layers": rows})
    write_json(args.report, report)
    print(f"evaluated {len(rows)} layer(s) -> {args.report}")
    return 0


def _variant_label(row, backends, threads) -> str:
    label = row.variant
    if len(backends) > 1:
        label += f"-{row.backend}"
    if len(threads) > 1:
        label += f"-t{row.threads}"
    return label


def cmd_bench(args) -> int:
    shapes = _parse_shapes(args.shapes)
    if args.threads:
        threads = tuple(int(t) for t in args.threads.split(","))
    else:
        # Single- and multi-threaded modes; collapses to (1,) on one CPU.
        threads = tuple(sorted({1, os.cpu_count() or 1}))
    if args.backends == "both":
        backends = available_backends()
    elif args.backends == "active":
        backends = (active_backend(),)
    else:
        backends = (args.backends,)
    rows = benchmark(
        shapes, args.reps, bits=args.bits, group_size=args.group,
        seed=args.seed, threads=threads, backends=backends,
    )
    with open(args.csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "b", "d", "r", "median_ns", "bytes_read", "bytes_written", "kernels", "macs"]
        )
        for row in rows:
            c = row.counters
            writer.writerow(
                [
                    _variant_label(row, backends, threads),
                    row.b, row.d, row.r, row.median_ns,
                    c["bytes_read"], c["bytes_written"], c["kernels_launched"], c["macs"],
                ]
            )
    json_path = args.json or os.path.splitext(args.csv)[0] + ".json"
    report = _meta(args, args.seed)
    report.update({"reps": args.reps, "rows": [row.to_dict() for row in rows]})
    write_json(json_path, report)
    print(f"benchmarked {len(rows)} row(s) -> {args.csv}, {json_path}")
    return 0


def cmd_illposed(args) -> int:
    records = load_bundle(args.bundle)
    qconfig = QuantConfig(bits=args.bits, group_size=args.group)
    alphas = _parse_alphas(args.alphas)
    settings = OptimizerSettings(
        epochs=args.epochs, learning_rate=args.lr, rank=args.rank,
        seed=args.seed, step_rule="backtracking",
    )
    reports = []
    skipped = []
    for rec in records:
        rank = min(args.rank, *rec.w.shape)
        try:
            scenario = make_scenario(rec, qconfig, rank, alphas=alphas, settings=settings)
        except PreconditionError:
            skipped.append(rec.name)
            continue
        reports.append(run_illposed_demo(scenario, qconfig))
    if not reports:
        raise PreconditionError(
            "no layer has rank-deficient calibration; ill-posedness premise fails for the whole bundle"
        )
    out = _meta(args, args.seed)
    out.update(
        {
            "qconfig": qconfig.to_dict(),
            "alphas": list(alphas),
            "skipped_full_rank_layers": skipped,
            "layers": [r.to_dict() for r in reports],
        }
    )
    write_json(args.out, out)
    if args.plot:
        series = []
        for r in reports:
            xs = [e.alpha for e in r.entries]
            series.append((f"{r.layer} conventional", xs, [e.max_deviation_conventional for e in r.entries]))
            series.append((f"{r.layer} feedback", xs, [e.max_deviation_fbquant for e in r.entries]))
        with open(args.plot, "w", encoding="utf-8") as fh:
            fh.write(render_line_chart(series, "max weight deviation vs alpha", "alpha", "max |w - w_rec|"))
    print(f"ill-posedness demo on {len(reports)} layer(s) -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    result = gradient_check(args.seed, instances=args.instances)
    print(f"max relative gradient error: {result['overall']:.3e}")
    print(f"undetached STE gradient magnitude: {result['ste_abs_max']:.3e}")
    if result["overall"] >= 1e-4 or result["ste_abs_max"] != 0.0:
        raise NumericError(f"gradient check failed: {result}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="fbquant", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fbquant {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize a calibration bundle into an .fbq checkpoint")
    p.add_argument("--bundle", required=True)
    p.add_argument("--bits", type=int, default=4, choices=(2, 3, 4, 8))
    p.add_argument("--group", type=int, default=128)
    p.add_argument("--rank", type=int, default=128)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--method", default="fbquant", choices=MODEL_METHODS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sigma-init", type=float, default=0.02)
    p.add_argument("--step-rule", default="fixed", choices=("fixed", "backtracking"))
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--plot", help="write an SVG of loss vs epoch")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="per-layer relative output error of a checkpoint")
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time naive vs fused forwards with traffic counters")
    p.add_argument("--shapes", default="decode,prefill", help="presets (decode, prefill) or BxDxR, comma-separated")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--bits", type=int, default=4, choices=(2, 3, 4, 8))
    p.add_argument("--group", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", help="comma-separated thread counts (default: 1 and the CPU count)")
    p.add_argument("--backends", default="active", help="active, both, python, or compiled")
    p.add_argument("--csv", required=True)
    p.add_argument("--json", help="JSON twin path (default: CSV path with .json)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("illposed-demo", help="loss-invariant null-space perturbations vs the feedback bound")
    p.add_argument("--bundle", required=True)
    p.add_argument("--alphas", default="0,1,10,100")
    p.add_argument("--bits", type=int, default=4, choices=(2, 3, 4, 8))
    p.add_argument("--group", type=int, default=128)
    p.add_argument("--rank", type=int, default=128)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="write an SVG of deviation vs alpha")
    p.set_defaults(func=cmd_illposed)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NumericError, ConvergenceError, ZeroDivisionError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
