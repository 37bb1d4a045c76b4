"""Command-line front end: ``generate``, ``bench``, ``query`` and ``report``."""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from arraydb import bench, volume
from arraydb.engine import CellBox, Engine, EngineConfig
from arraydb.errors import ArrayDBError


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _extents(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected extents like 512x512x64, got {text!r}")


def _box(text: str) -> CellBox:
    try:
        lo, hi = text.split(":")
        return CellBox(_ints(lo), _ints(hi))
    except (ValueError, ArrayDBError):
        raise argparse.ArgumentTypeError(f"expected lo1,lo2,lo3:hi1,hi2,hi3, got {text!r}")


def cmd_generate(args) -> int:
    info = volume.generate_volume(args.extents, args.seed, args.out, dry_run=args.dry_run)
    note = "" if info.desk_scale else " (beyond desk scale)"
    verb = "would write" if args.dry_run else "wrote"
    print(f"{verb} {info.path}: {'x'.join(map(str, info.extents))} uint8, "
          f"{info.nbytes} bytes{note}")
    return 0


def cmd_bench(args) -> int:
    extents = volume.read_header(args.volume)[0]
    kw = dict(repetitions=args.reps, seed=args.seed)
    if args.preset:
        matrix = bench.BenchMatrix.preset(args.preset, extents, **kw)
    else:
        matrix = bench.BenchMatrix(extents, clients=args.clients, workers=args.workers,
                                   nodes=args.nodes, **kw)
    root = args.root or tempfile.mkdtemp(prefix="arraydb-bench-")
    rows = bench.run_matrix(matrix, args.volume, root, args.out, target=args.array)
    print(f"{len(rows)} runs written to {args.out}; engine root {root}")
    return 0


def cmd_query(args) -> int:
    with Engine(EngineConfig(root=args.root)) as engine:
        if args.raw_out:
            block, _ = engine.fetch_dense(args.array, args.between)
            volume.write_volume(args.raw_out, block)
            print(f"wrote {'x'.join(map(str, block.shape))} block to {args.raw_out}")
        else:
            cells = engine.between(args.array, args.between)
            out = sys.stdout
            for coord, value in cells.pairs():
                out.write("\t".join(map(str, coord)) + f"\t{value}\n")
    return 0


def cmd_report(args) -> int:
    rows = bench.read_csv(args.input)
    summaries, best = bench.summarize(rows)
    print(bench.format_report(summaries, best))
    if args.gnuplot:
        Path(args.gnuplot).write_text(bench.gnuplot_data(summaries))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arraydb", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a seeded synthetic uint8 volume")
    g.add_argument("--extents", type=_extents, required=True, help="RxCxS")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--dry-run", action="store_true", help="report size only")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="run the ingest benchmark matrix")
    b.add_argument("--volume", required=True)
    b.add_argument("--clients", type=_ints, default=(1,))
    b.add_argument("--workers", type=_ints, default=(1,))
    b.add_argument("--nodes", type=_ints, default=(1,))
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--preset", choices=sorted(bench.PRESETS))
    b.add_argument("--out", required=True)
    b.add_argument("--root", help="engine data directory (default: fresh temp dir)")
    b.add_argument("--array", default="vol3d", help="target array name")
    b.set_defaults(func=cmd_bench)

    q = sub.add_parser("query", help="range-select cells from an array")
    q.add_argument("--array", required=True)
    q.add_argument("--between", type=_box, required=True, help="lo1,lo2,lo3:hi1,hi2,hi3")
    q.add_argument("--raw-out", help="write a dense block in the volume format")
    q.add_argument("--root", required=True, help="engine data directory")
    q.set_defaults(func=cmd_query)

    r = sub.add_parser("report", help="summarize a benchmark CSV")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--gnuplot", help="also write gnuplot-friendly data to this file")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArrayDBError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
