"""Command-line front end.

Subcommands cover the main workflows: ``quantize`` a matrix file through the
double-block codec, ``bench-bias`` the quantized backward pass, ``train`` a
model from a JSON config, ``switch`` precision mid-run, ``sweep`` quantizer
site subsets, and ``osci-analyze`` exported oscillation tables.  Every
subcommand writes a resolved ``config.json`` next to its outputs so a result
directory is self-describing, and none of the outputs embed timestamps:
rerunning a command with the same inputs reproduces the same bytes.

Exit codes: 0 success, 2 usage or input-format error, 3 training diverged,
4 bias detected by ``bench-bias``.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import blockquant as bq
from . import fpcodec as fc
from . import matrixio as mio
from . import metrics as mx
from . import qlinear as ql
from . import trainer as tr

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_BIASED = 4

_FMT = "%.9g"

SUMMARY_SCHEMA = "osci-summary-v1"
DELTA_SCHEMA = "osci-delta-v1"
SWEEP_SCHEMA = "sweep-v1"


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_USAGE


def _json_safe(value):
    """Replace non-finite floats with None so the JSON stays strict."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _write_json(path, obj) -> None:
    Path(path).write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="ascii"
    )


def _write_table(path, schema: str, header: str, rows) -> None:
    lines = [f"#schema={schema}", header]
    lines.extend(rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _num(x) -> str:
    if isinstance(x, int):
        return str(x)
    return _FMT % x


def _load_run_config(args, **extra) -> tr.TrainRunConfig:
    d = dict(json.loads(Path(args.config).read_text(encoding="ascii")))
    d["out_dir"] = str(args.out)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    d.update(extra)
    return tr.TrainRunConfig.from_dict(d)


# ── quantize ─────────────────────────────────────────────────────────────────


def _cmd_quantize(args) -> int:
    try:
        m = mio.load_matrix(args.input)
    except mio.FileFormatError as exc:
        return _fail(f"malformed matrix file at byte offset {exc.offset}: {exc}")
    outer = args.outer
    if outer is None:
        outer = "per-tensor" if args.orientation == "square" else "1x128"
    rng = fc.stream(args.seed, "cli", "quantize") if args.mode == "stoch" else None
    try:
        q = bq.quantize_double_block(
            m, args.orientation, outer=outer, mode=args.mode, rng=rng,
            element_fmt=args.format,
        )
    except ValueError as exc:
        return _fail(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mio.save_quantized(out / "quantized.qmxf", q)
    stats = dict(mx.error_stats(m, bq.dequantize(q)))
    stats["clamp_count"] = int(q.clamp_count)
    _write_json(out / "stats.json", _json_safe(stats))
    _write_json(out / "config.json", {
        "command": "quantize",
        "input": str(args.input),
        "orientation": args.orientation,
        "outer": outer,
        "format": args.format,
        "mode": args.mode,
        "seed": args.seed,
    })
    print(f"quantized {q.rows}x{q.cols} ({args.format}, outer {outer}): "
          f"mse {_num(stats['mse'])}, clamps {stats['clamp_count']}")
    return EXIT_OK


# ── bench-bias ───────────────────────────────────────────────────────────────


def _cmd_bench_bias(args) -> int:
    if args.draws < 10000:
        return _fail("--draws must be at least 10000 for a meaningful z-test")
    try:
        cfg = ql.preset(args.preset)
    except ValueError as exc:
        return _fail(str(exc))
    report = mx.mc_backward_bias(
        cfg,
        shape=args.shape,
        draws=args.draws,
        seed=args.seed,
        nsigma=args.nsigma,
        dy_craft=args.dy_craft,
        x_craft=args.x_craft,
        w_craft=args.w_craft,
        outlier_percent=args.outlier_percent,
        outlier_style=args.outlier_style,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "bias_report.json", _json_safe(report.to_dict()))
    _write_json(out / "config.json", {
        "command": "bench-bias",
        "preset": args.preset,
        "shape": list(args.shape),
        "draws": args.draws,
        "seed": args.seed,
        "nsigma": args.nsigma,
        "dy_craft": args.dy_craft,
        "x_craft": args.x_craft,
        "w_craft": args.w_craft,
        "outlier_percent": args.outlier_percent,
        "outlier_style": args.outlier_style,
    })
    verdict = "passed" if report.passed else "FAILED"
    print(f"bias check {verdict}: max |z| {_num(float(report.max_z))} "
          f"over {args.draws} draws (limit {_num(args.nsigma)})")
    return EXIT_OK if report.passed else EXIT_BIASED


# ── train / switch ───────────────────────────────────────────────────────────


def _print_report(report: tr.RunReport) -> None:
    print(f"ran {report.steps_run} steps: "
          f"final train loss {_num(report.final_train_loss)}, "
          f"final val loss {_num(report.final_val_loss)}, "
          f"resets {report.total_resets}, clamp events {report.clamp_total}")


def _cmd_train(args) -> int:
    try:
        cfg = _load_run_config(args)
    except (ValueError, KeyError, TypeError) as exc:
        return _fail(f"bad config: {exc}")
    try:
        report = tr.train(cfg)
    except tr.TrainDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _print_report(report)
    return EXIT_OK


def _cmd_switch(args) -> int:
    try:
        cfg = _load_run_config(args)
    except (ValueError, KeyError, TypeError) as exc:
        return _fail(f"bad config: {exc}")
    try:
        report = tr.precision_switch_run(cfg, args.switch_step, args.mode)
    except ValueError as exc:
        return _fail(str(exc))
    except tr.TrainDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _print_report(report)
    return EXIT_OK


# ── sweep ────────────────────────────────────────────────────────────────────


def _cmd_sweep(args) -> int:
    try:
        cfg = _load_run_config(args)
        subsets = json.loads(Path(args.subsets).read_text(encoding="ascii"))
    except (ValueError, KeyError, TypeError) as exc:
        return _fail(f"bad config: {exc}")
    if not isinstance(subsets, list):
        return _fail("subsets file must hold a JSON list")
    try:
        rows = tr.loss_decomposition_sweep(cfg, subsets)
    except ValueError as exc:
        return _fail(str(exc))
    except tr.TrainDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(
        out / "sweep.csv",
        SWEEP_SCHEMA,
        "subset,final_train_loss,final_val_loss,delta_vs_bypass",
        (
            f"{r['subset']},{_num(r['final_train_loss'])},"
            f"{_num(r['final_val_loss'])},{_num(r['delta_vs_bypass'])}"
            for r in rows
        ),
    )
    _write_json(out / "config.json", {
        "command": "sweep",
        "config": cfg.to_dict(),
        "subsets": subsets,
    })
    for r in rows:
        print(f"{r['subset']}: val loss {_num(r['final_val_loss'])} "
              f"(delta vs bypass {_num(r['delta_vs_bypass'])})")
    return EXIT_OK


# ── osci-analyze ─────────────────────────────────────────────────────────────


def _read_osci_table(path, thresholds):
    """Aggregate an oscillation export per step, summing across layers.

    Returns an ordered ``{step: (n_elements, {threshold: count}, n_reset)}``.
    """
    lines = Path(path).read_text(encoding="ascii").splitlines()
    expected = f"#schema={tr.OSCILLATION_SCHEMA}"
    if not lines or lines[0] != expected:
        raise ValueError(
            f"{path}: schema mismatch (expected {expected!r}, "
            f"got {lines[0] if lines else '<empty file>'!r})"
        )
    if len(lines) < 2:
        raise ValueError(f"{path}: missing header row")
    header = lines[1].split(",")
    col = {name: i for i, name in enumerate(header)}
    for name in ("step", "n_elements", "n_reset"):
        if name not in col:
            raise ValueError(f"{path}: missing column {name!r}")
    count_cols = {}
    for t in thresholds:
        name = f"n_gt_{t:g}"
        if name not in col:
            raise ValueError(f"{path}: no column for threshold {t:g} ({name!r})")
        count_cols[t] = col[name]
    table: dict = {}
    for ln in lines[2:]:
        if not ln:
            continue
        cells = ln.split(",")
        step = int(cells[col["step"]])
        n_el, counts, n_reset = table.setdefault(step, [0, {t: 0 for t in thresholds}, 0])
        table[step][0] = n_el + int(cells[col["n_elements"]])
        for t, i in count_cols.items():
            counts[t] += int(cells[i])
        table[step][2] = n_reset + int(cells[col["n_reset"]])
    return table


def _fractions(entry, thresholds):
    n_el = entry[0]
    return [entry[1][t] / n_el if n_el else 0.0 for t in thresholds]


def _cmd_osci_analyze(args) -> int:
    thresholds = args.thresholds
    try:
        table = _read_osci_table(args.file, thresholds)
        paired = _read_osci_table(args.paired, thresholds) if args.paired else None
    except (ValueError, OSError) as exc:
        return _fail(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if paired is None:
        header = ("step,n_elements,"
                  + ",".join(f"frac_gt_{t:g}" for t in thresholds) + ",n_reset")
        rows = []
        for step in sorted(table):
            n_el, _, n_reset = table[step]
            fracs = _fractions(table[step], thresholds)
            rows.append(f"{step},{n_el},"
                        + ",".join(_num(f) for f in fracs) + f",{n_reset}")
        _write_table(out / "osci_summary.csv", SUMMARY_SCHEMA, header, rows)
        written = "osci_summary.csv"
    else:
        shared = sorted(set(table) & set(paired))
        header = "step," + ",".join(
            f"frac_gt_{t:g}_a,frac_gt_{t:g}_b,delta_gt_{t:g}" for t in thresholds
        )
        rows = []
        for step in shared:
            fa = _fractions(table[step], thresholds)
            fb = _fractions(paired[step], thresholds)
            cells = []
            for a, b in zip(fa, fb):
                cells.extend((_num(a), _num(b), _num(a - b)))
            rows.append(f"{step}," + ",".join(cells))
        _write_table(out / "osci_delta.csv", DELTA_SCHEMA, header, rows)
        written = "osci_delta.csv"
    _write_json(out / "config.json", {
        "command": "osci-analyze",
        "file": str(args.file),
        "paired": str(args.paired) if args.paired else None,
        "thresholds": list(thresholds),
    })
    print(f"analyzed {len(table)} steps -> {out / written}")
    return EXIT_OK


# ── argument parsing ─────────────────────────────────────────────────────────


def _shape_arg(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("shape must be N,C,D (three integers)")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if any(v < 1 for v in shape):
        raise argparse.ArgumentTypeError("shape entries must be positive")
    return shape


def _thresholds_arg(text: str):
    try:
        values = tuple(float(p) for p in text.split(",") if p)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not values:
        raise argparse.ArgumentTypeError("at least one threshold is required")
    return values


def _sub(subparsers, name: str, help_text: str, example: str):
    return subparsers.add_parser(
        name,
        help=help_text,
        description=help_text,
        epilog=f"example:\n  {example}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvfp4sim",
        description="Bit-exact simulator for double-block FP4/FP6 training.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = _sub(subparsers, "quantize",
             "Quantize a matrix file (binary or CSV) through the double-block "
             "codec and report reconstruction stats.",
             "nvfp4sim quantize weights.csv --out qdir --orientation row "
             "--outer 1x128 --format e2m1 --mode stoch --seed 7")
    p.add_argument("input", help="matrix file (binary dump or CSV)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--orientation", choices=["row", "col", "square"],
                   default="row", help="block grouping (default: row)")
    p.add_argument("--outer", choices=["1x128", "per-row", "per-tensor"],
                   default=None,
                   help="outer-scale granularity (default: 1x128; square "
                        "tiles always use per-tensor)")
    p.add_argument("--format", choices=["e2m1", "e3m2", "e2m3"],
                   default="e2m1", help="element format (default: e2m1)")
    p.add_argument("--mode", choices=["det", "stoch"], default="det",
                   help="rounding mode (default: det)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for stochastic rounding (default: 0)")
    p.set_defaults(func=_cmd_quantize)

    p = _sub(subparsers, "bench-bias",
             "Monte-Carlo z-test of backward-pass gradient bias for a "
             "quantization preset.",
             "nvfp4sim bench-bias --out biasdir --preset fp4-base "
             "--shape 8,32,16 --draws 100000 --seed 1")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", default="fp4-base",
                   help="quantization preset (default: fp4-base)")
    p.add_argument("--shape", type=_shape_arg, default=(8, 32, 16),
                   help="batch,in,out dimensions as N,C,D (default: 8,32,16)")
    p.add_argument("--draws", type=int, default=10000,
                   help="Monte-Carlo sample count, minimum 10000 "
                        "(default: 10000)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")
    p.add_argument("--nsigma", type=float, default=5.0,
                   help="z-score pass limit (default: 5.0)")
    p.add_argument("--dy-craft", choices=["gaussian", "boundary", "signs"],
                   default="gaussian", help="output-gradient construction")
    p.add_argument("--x-craft", choices=["gaussian", "boundary", "signs"],
                   default="gaussian", help="activation construction")
    p.add_argument("--w-craft", choices=["gaussian", "boundary", "signs"],
                   default="gaussian", help="weight construction")
    p.add_argument("--outlier-percent", type=float, default=None,
                   help="retain this percent of channels at high precision")
    p.add_argument("--outlier-style", choices=["largest-norm", "random", "none"],
                   default="largest-norm", help="outlier channel selection")
    p.set_defaults(func=_cmd_bench_bias)

    p = _sub(subparsers, "train",
             "Train a model from a JSON run config and export metrics.",
             "nvfp4sim train --config run.json --out rundir --seed 3")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.set_defaults(func=_cmd_train)

    p = _sub(subparsers, "switch",
             "Train with a mid-run switch to a higher-precision mode.",
             "nvfp4sim switch --config run.json --out rundir "
             "--switch-step 4000 --mode fp6xfp4")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--switch-step", type=int, required=True,
                   help="last step of the low-precision phase")
    p.add_argument("--mode", required=True, choices=["fp6xfp4", "fp6xfp6"],
                   help="precision mode after the switch")
    p.set_defaults(func=_cmd_switch)

    p = _sub(subparsers, "sweep",
             "Run one training job per quantizer-site subset and tabulate "
             "final losses against an all-bypass reference.",
             "nvfp4sim sweep --config run.json --subsets subsets.json "
             "--out sweepdir")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--subsets", required=True,
                   help="JSON list of {id, sites|exclude} subset specs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.set_defaults(func=_cmd_sweep)

    p = _sub(subparsers, "osci-analyze",
             "Aggregate an oscillation export per step; with --paired, emit "
             "the per-threshold fraction deltas between two runs.",
             "nvfp4sim osci-analyze run/oscillation.csv --out oscdir"
             "--thresholds 8,16")
    p.add_argument("file", help="oscillation.csv from a training run")
    p.add_argument("--paired", default=None,
                   help="second oscillation.csv to difference against")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--thresholds", type=_thresholds_arg, default=(8.0, 16.0),
                   help="comma-separated risk thresholds (default: 8,16)")
    p.set_defaults(func=_cmd_osci_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
