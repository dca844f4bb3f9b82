"""Command-line front end.

Exit codes:
  0  success
  2  usage error (bad flags)
  3  input error (missing, unreadable or malformed checkpoint; no tensors selected)
  4  invalid quantization configuration
  5  corrupt or unreadable packed artifact
  6  output could not be written
"""

from __future__ import annotations

import argparse
import fnmatch
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from soarq import tensor_io
from soarq.block import FORMATS, METHODS, QuantConfig, mse
from soarq.soar import quantize

EXIT_OK = 0
EXIT_INPUT = 3
EXIT_CONFIG = 4
EXIT_ARTIFACT = 5
EXIT_OUTPUT = 6

SYNTHETIC_KINDS = ("gaussian", "uniform", "laplace")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def parse_synthetic(arg: str) -> tuple[str, tuple[int, ...]]:
    """``KIND:N`` or ``KIND:RxC`` -> (kind, shape)."""
    kind, _, dims = arg.partition(":")
    if kind not in SYNTHETIC_KINDS or not dims:
        raise ValueError(f"--synthetic expects KIND:SHAPE with KIND in {SYNTHETIC_KINDS}, got {arg!r}")
    try:
        shape = tuple(int(d) for d in dims.lower().split("x"))
    except ValueError:
        raise ValueError(f"bad synthetic shape {dims!r}") from None
    if not shape or any(d < 1 for d in shape):
        raise ValueError(f"bad synthetic shape {dims!r}")
    return kind, shape


def synthetic_tensors(arg: str, seed: int, count: int) -> list[tuple[str, np.ndarray]]:
    kind, shape = parse_synthetic(arg)
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        n = math.prod(shape)
        if kind == "gaussian":
            v = rng.standard_normal(n)
        elif kind == "uniform":
            v = rng.uniform(-1.0, 1.0, n)
        else:
            v = rng.laplace(0.0, 1.0, n)
        out.append((f"synthetic.{i}", v.reshape(shape)))
    return out


def load_inputs(args) -> list[tuple[str, np.ndarray]]:
    if args.synthetic:
        try:
            tensors = synthetic_tensors(args.synthetic, args.seed, args.num_tensors)
        except ValueError as e:
            raise CliError(str(e), EXIT_CONFIG) from None
    else:
        if not args.input:
            raise CliError("an input checkpoint or --synthetic is required", EXIT_INPUT)
        try:
            tensors = [(r.name, r.values) for r in tensor_io.load_checkpoint(args.input)]
        except OSError as e:
            raise CliError(f"cannot read {args.input}: {e}", EXIT_INPUT) from None
        except tensor_io.CheckpointError as e:
            raise CliError(f"{args.input}: {e}", EXIT_INPUT) from None
    if args.filter:
        tensors = [t for t in tensors if fnmatch.fnmatchcase(t[0], args.filter)]
    tensors = [t for t in tensors if t[1].size > 0]
    if not tensors:
        raise CliError("no tensors selected", EXIT_INPUT)
    for name, values in tensors:
        if not np.all(np.isfinite(values)):
            raise CliError(f"tensor {name!r} contains non-finite values", EXIT_INPUT)
    return tensors


def make_config(args, method: str | None = None) -> QuantConfig:
    try:
        return QuantConfig(
            format=args.format,
            method=method or args.method,
            block_size=args.block_size,
            max_iters=args.iters,
            early_stop_tol=args.tol,
            grid_lo=args.grid_lo,
            grid_hi=args.grid_hi,
            grid_step=args.grid_step,
            dequant_neighbor_count=args.neighbors,
        )
    except ValueError as e:
        raise CliError(f"invalid configuration: {e}", EXIT_CONFIG) from None


def run_all(tensors, config: QuantConfig, jobs: int):
    """Quantize tensors on a bounded pool; results come back in input order."""

    def work(item):
        name, values = item
        return quantize(values, config, name)

    if jobs <= 1:
        return [work(t) for t in tensors]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, tensors))


def _write(fn, path, payload) -> None:
    try:
        fn(path, payload)
    except OSError as e:
        raise CliError(f"cannot write {path}: {e}", EXIT_OUTPUT) from None


def cmd_quantize(args) -> int:
    config = make_config(args)
    tensors = load_inputs(args)
    results = run_all(tensors, config, args.jobs)
    _write(tensor_io.write_packed, args.output, results)
    _write(tensor_io.write_report, args.report or args.output + ".report.json", results)
    if args.trace:
        _write(tensor_io.write_trace, args.trace, results)
    return EXIT_OK


def format_compare_table(names, per_method: dict[str, list[float]]) -> str:
    methods = list(per_method)
    lines = ["tensor\t" + "\t".join(methods)]
    for i, name in enumerate(names):
        lines.append(name + "\t" + "\t".join(repr(per_method[m][i]) for m in methods))
    lines.append("mean\t" + "\t".join(repr(float(np.mean(per_method[m]))) for m in methods))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    tensors = load_inputs(args)
    methods = [m for m in METHODS if args.format == "nvfp4" or m in ("baseline", "dss")]
    for m in METHODS:
        if m not in methods:
            print(f"note: method {m!r} is not available for {args.format}; skipped", file=sys.stderr)
    per_method = {}
    all_results = []
    for m in methods:
        results = run_all(tensors, make_config(args, m), args.jobs)
        per_method[m] = [r.mse for r in results]
        all_results.extend(results)
    table = format_compare_table([t[0] for t in tensors], per_method)
    if args.output:
        _write(lambda p, s: open(p, "w").write(s), args.output, table)
    else:
        sys.stdout.write(table)
    if args.report:
        _write(tensor_io.write_report, args.report, all_results)
    return EXIT_OK


def cmd_trace(args) -> int:
    if args.method not in ("cjso", "soar"):
        raise CliError("trace requires --method cjso or --method soar", EXIT_CONFIG)
    config = make_config(args)
    out = args.trace or args.output
    if not out:
        raise CliError("trace requires --trace PATH (or -o PATH)", EXIT_CONFIG)
    results = run_all(load_inputs(args), config, args.jobs)
    _write(tensor_io.write_trace, out, results)
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        tensors = tensor_io.read_packed(args.input)
    except OSError as e:
        raise CliError(f"cannot read {args.input}: {e}", EXIT_ARTIFACT) from None
    except tensor_io.ArtifactError as e:
        raise CliError(f"corrupt artifact {args.input}: {e}", EXIT_ARTIFACT) from None
    sources = {}
    if args.checkpoint or args.synthetic:
        ns = argparse.Namespace(**vars(args))
        ns.input = args.checkpoint
        ns.filter = None
        sources = dict(load_inputs(ns))
    print(f"{args.input}: {len(tensors)} tensor(s)")
    for qt in tensors:
        gbytes = 4 if qt.format == "nvfp4" else 0
        cbytes = (qt.numel + 1) // 2
        line = (
            f"{qt.name}\tshape={'x'.join(map(str, qt.shape))}\tformat={qt.format}\tblock={qt.block_size}"
            f"\tcodes={cbytes}\tscales={qt.block_scales.size}\tglobal={gbytes}\ttotal={qt.payload_nbytes()}"
        )
        if qt.name in sources:
            line += f"\tmse={mse(sources[qt.name], qt)!r}"
        print(line)
    return EXIT_OK


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("SOARQ_JOBS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="soarq",
        description="NVFP4/MXFP4 weight quantization with closed-form and decoupled scale optimization.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__.split("\n", 2)[2],
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, method_default="soar"):
        sp.add_argument("input", nargs="?", help="safetensors checkpoint (omit with --synthetic)")
        sp.add_argument("--format", choices=FORMATS, default="nvfp4", help="microscaling format (default nvfp4)")
        sp.add_argument("--method", choices=METHODS, default=method_default, help=f"default {method_default}")
        sp.add_argument("--iters", type=int, default=15, help="maximum iterations (default 15)")
        sp.add_argument("--tol", type=float, default=1e-3, help="early-stop relative improvement (default 1e-3)")
        sp.add_argument("--grid-lo", type=float, default=0.5, help="lowest quant-scale multiplier (default 0.5)")
        sp.add_argument("--grid-hi", type=float, default=1.5, help="highest quant-scale multiplier (default 1.5)")
        sp.add_argument("--grid-step", type=float, default=0.01, help="multiplier step (default 0.01)")
        sp.add_argument("--neighbors", type=int, default=2, help="dequant-scale neighbors searched (default 2)")
        sp.add_argument("--block-size", type=int, default=None, help="block size (default 16 nvfp4, 32 mxfp4)")
        sp.add_argument("--filter", metavar="GLOB", help="only tensors whose name matches GLOB")
        sp.add_argument("--synthetic", metavar="KIND:N", help=f"random tensor instead of a file; KIND in {SYNTHETIC_KINDS}, N or RxC")
        sp.add_argument("--num-tensors", type=int, default=1, help="synthetic tensors to generate (default 1)")
        sp.add_argument("--seed", type=int, default=0, help="synthetic seed (default 0)")
        sp.add_argument("--jobs", type=int, default=_default_jobs(), help="worker threads (default $SOARQ_JOBS or 1)")

    q = sub.add_parser("quantize", help="quantize tensors and write a packed artifact plus report")
    common(q)
    q.add_argument("-o", "--output", required=True, help="packed artifact path")
    q.add_argument("--report", help="JSON report path (default OUTPUT.report.json)")
    q.add_argument("--trace", help="CSV convergence trace path")
    q.set_defaults(func=cmd_quantize)

    c = sub.add_parser("compare", help="MSE of every method on the same tensors")
    common(c)
    c.add_argument("-o", "--output", help="write the table here instead of stdout")
    c.add_argument("--report", help="JSON report of every method and tensor")
    c.set_defaults(func=cmd_compare)

    t = sub.add_parser("trace", help="write per-iteration losses for cjso or soar")
    common(t)
    t.add_argument("-o", "--output", help="alias for --trace")
    t.add_argument("--trace", help="CSV convergence trace path")
    t.set_defaults(func=cmd_trace)

    i = sub.add_parser("inspect", help="describe a packed artifact")
    i.add_argument("input", help="packed artifact")
    i.add_argument("--checkpoint", help="source checkpoint; prints the recomputed MSE per tensor")
    i.add_argument("--synthetic", metavar="KIND:N", help="regenerate the synthetic source instead")
    i.add_argument("--num-tensors", type=int, default=1)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("soarq: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as e:
        print(f"soarq: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
