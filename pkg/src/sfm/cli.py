"""Command-line interface: ``sfm sketch|privatize|merge|estimate|simulate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Iterator, Sequence
from typing import BinaryIO

from . import io_format
from .errors import SfmError
from .estimate import estimate_cardinality
from .merge import BoolOp, merge
from .pcsa import PcsaSketch, SketchParams
from .privacy import RandomSource, mechanism_sym, mechanism_xor, privatize
from .simulate import Method, MergeSplit, SimulationSpec, run_simulation

log = logging.getLogger("sfm")


def read_items(stream: BinaryIO, keep_empty: bool = False) -> Iterator[bytes]:
    """Yield newline-delimited items with the trailing newline removed."""
    for line in stream:
        item = line[:-1] if line.endswith(b"\n") else line
        if item or keep_empty:
            yield item


def _open_input(path: str):
    return sys.stdin.buffer if path == "-" else open(path, "rb")


def cmd_sketch(args) -> int:
    params = SketchParams(args.bits, args.levels, args.seed)
    sketch = PcsaSketch(params)
    stream = _open_input(args.input)
    count = 0
    try:
        batch = []
        for item in read_items(stream, args.keep_empty):
            batch.append(item)
            count += 1
            if len(batch) >= 65536:
                sketch.update(batch)
                batch.clear()
        sketch.update(batch)
    finally:
        if stream is not sys.stdin.buffer:
            stream.close()
    io_format.save(sketch, args.out)
    print(f"items read: {count}")
    print(f"bits set: {sketch.popcount()}")
    return 0


def cmd_privatize(args) -> int:
    sketch = io_format.load(args.input)
    if not isinstance(sketch, PcsaSketch):
        raise SfmError("input sketch is already private")
    mech = mechanism_sym(args.eps) if args.mech == "sym" else mechanism_xor(args.eps)
    rng = RandomSource.seeded(args.rng_seed) if args.rng_seed is not None else RandomSource.system()
    private = privatize(sketch, mech, rng)
    io_format.save(private, args.out)
    print(f"mechanism: {args.mech} p={mech.p!r} q={mech.q!r} eps={mech.epsilon!r}")
    return 0


def cmd_merge(args) -> int:
    if len(args.inputs) < 2:
        raise SfmError("merge needs at least two input sketches")
    sketches = [io_format.load(path) for path in args.inputs]
    if any(isinstance(s, PcsaSketch) for s in sketches):
        raise SfmError("merge expects private sketches; combine raw sketches before privatizing")
    rng = RandomSource.seeded(args.rng_seed) if args.rng_seed is not None else RandomSource.system()
    merged = merge(sketches, BoolOp(args.op), rng)
    io_format.save(merged, args.out)
    print(f"merged {len(sketches)} sketches: eps*={merged.mech.epsilon!r}")
    return 0


def cmd_estimate(args) -> int:
    sketch = io_format.load(args.input)
    result = estimate_cardinality(sketch)
    report = {
        "n_hat": result.n_hat,
        "std_err": result.std_err,
        "rel_std_err": result.rel_std_err if result.n_hat > 0 else None,
        "iterations": result.iterations,
        "converged": result.converged,
        "bracket": list(result.bracket),
    }
    if args.json:
        print(json.dumps(report))
    else:
        print(f"n_hat: {result.n_hat!r}")
        print(f"std_err: {result.std_err!r}")
        print(f"rel_std_err: {report['rel_std_err']!r}")
        print(f"iterations: {result.iterations}")
        print(f"converged: {result.converged}")
    return 0 if result.converged else 3


def cmd_simulate(args) -> int:
    spec = SimulationSpec(
        methods=tuple(args.method),
        epsilons=tuple(args.eps),
        buckets=tuple(args.bits),
        levels=args.levels,
        cardinalities=tuple(args.n),
        trials=args.trials,
        merge_fanout=args.merge_fanout,
        seed=args.seed,
        merge_split=args.merge_split,
    )
    rows = run_simulation(spec)
    if args.out == "-":
        io_format.write_csv(rows, sys.stdout)
    else:
        with open(args.out, "w", newline="") as fh:
            count = io_format.write_csv(rows, fh)
        print(f"wrote {count} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sketch", help="build a PCSA sketch from newline-delimited items")
    p.add_argument("input", help="item file, or - for stdin")
    p.add_argument("--bits", "-B", type=int, default=4096, help="number of buckets")
    p.add_argument("--levels", "-P", type=int, default=24)
    p.add_argument("--seed", type=int, default=0, help="hash seed")
    p.add_argument("--keep-empty", action="store_true", help="treat empty lines as items")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sketch)

    p = sub.add_parser("privatize", help="apply a flip mechanism to a raw sketch")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--mech", choices=("sym", "xor"), default="sym")
    p.add_argument("--rng-seed", type=int, help="reproducible noise (testing only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_privatize)

    p = sub.add_parser("merge", help="merge private sketches of one mechanism kind")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--op", choices=[o.value for o in BoolOp], default="or")
    p.add_argument("--rng-seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("estimate", help="estimate the cardinality behind a sketch")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="Monte Carlo accuracy experiment to CSV")
    p.add_argument("--method", nargs="+", choices=[m.value for m in Method], default=["sfm_sym"])
    p.add_argument("--eps", nargs="+", type=float, default=[1.0])
    p.add_argument("--bits", "-B", nargs="+", type=int, default=[4096])
    p.add_argument("--levels", "-P", type=int, default=24)
    p.add_argument("--n", nargs="+", type=int, default=[10**6])
    p.add_argument("--trials", "-m", type=int, default=1000)
    p.add_argument("--merge-fanout", "-k", type=int, default=1)
    p.add_argument("--merge-split", choices=[s.value for s in MergeSplit], default="same")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path, or - for stdout")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SfmError, ValueError, OSError) as exc:
        print(f"sfm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
