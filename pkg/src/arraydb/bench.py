"""Benchmark matrix runner and CSV reporting."""

from __future__ import annotations

import csv
import itertools
import logging
import statistics
from dataclasses import dataclass, field
from typing import Iterable

from arraydb.engine import Engine, EngineConfig
from arraydb.errors import CSVFormatError, ValidationError
from arraydb.ingest import IngestConfig, IngestReport, cleanup, run_ingest, verify
from arraydb.schema import parse_schema
from arraydb.volume import FileVolume

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "config_id", "nodes", "workers_per_node", "clients", "rows", "cols", "slices",
    "total_cells", "stage_seconds", "merge_seconds", "total_seconds",
    "rate_stage", "rate_total", "fidelity_ok", "rep",
)

PRESETS = {
    "paper-single-node": dict(nodes=(1,), workers=(1, 4, 8, 12, 16), clients=(2, 4, 8, 12)),
    "paper-two-node": dict(nodes=(2,), workers=(2, 4, 8, 16), clients=(2, 4, 8, 12)),
}


class FidelityError(AssertionError):
    pass


@dataclass(frozen=True)
class BenchMatrix:
    extents: tuple[int, int, int]
    clients: tuple[int, ...] = (1,)
    workers: tuple[int, ...] = (1,)
    nodes: tuple[int, ...] = (1,)
    repetitions: int = 3
    seed: int = 0
    value_type: str = "uint8"

    def __post_init__(self):
        for axis in ("clients", "workers", "nodes"):
            vals = tuple(getattr(self, axis))
            object.__setattr__(self, axis, vals)
            if not vals or any(v < 1 for v in vals):
                raise ValidationError(f"{axis} axis must be a non-empty list of positive ints")
        if len(self.extents) != 3 or any(e < 1 for e in self.extents):
            raise ValidationError(f"extents must be three positive ints, got {self.extents}")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")

    @classmethod
    def preset(cls, name: str, extents, **kw) -> BenchMatrix:
        try:
            axes = PRESETS[name]
        except KeyError:
            raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(tuple(extents), clients=axes["clients"], workers=axes["workers"],
                   nodes=axes["nodes"], **kw)

    def cells(self):
        """Benchmark cells as ``(nodes, workers_per_node, clients)`` triples."""
        return list(itertools.product(self.nodes, self.workers, self.clients))


def config_id(nodes: int, workers: int, clients: int) -> str:
    return f"n{nodes}-w{workers}-c{clients}"


def vol_schema_text(name: str, extents) -> str:
    r, c, s = extents
    return f"{name}<val:uint8>[row=1:{r},{r},0,col=1:{c},{c},0,slice=1:{s},1,0]"


def report_row(report: IngestReport, rep: int) -> dict:
    r, c, s = report.extents
    return {
        "config_id": config_id(report.nodes, report.workers_per_node, report.num_clients),
        "nodes": report.nodes, "workers_per_node": report.workers_per_node,
        "clients": report.num_clients, "rows": r, "cols": c, "slices": s,
        "total_cells": report.total_cells,
        "stage_seconds": report.stage_seconds, "merge_seconds": report.merge_seconds,
        "total_seconds": report.total_seconds,
        "rate_stage": report.rate_stage, "rate_total": report.rate_total,
        "fidelity_ok": bool(report.fidelity_ok), "rep": rep,
    }


def run_matrix(matrix: BenchMatrix, volume_path, root, out_csv=None, *,
               target: str = "vol3d", keep_last: bool = True) -> list[dict]:
    """Run every matrix cell ``repetitions`` times with fidelity checks.

    Each run ingests the volume with the two-stage protocol, compares the
    merged target with the source, then drops the arrays. The target of the
    final run is kept when ``keep_last`` is set, so it can be queried.

    Raises
    ------
    FidelityError
        A merged target did not reproduce the source; names the config.
    """
    source = FileVolume(volume_path)
    if source.extents != tuple(matrix.extents):
        raise ValidationError(f"volume extents {source.extents} do not match matrix "
                              f"{matrix.extents}")
    _, schema = parse_schema(vol_schema_text(target, matrix.extents))
    rows = []
    writer = fh = None
    if out_csv is not None:
        fh = open(out_csv, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
    runs = [(cell, rep) for cell in matrix.cells() for rep in range(1, matrix.repetitions + 1)]
    try:
        for i, ((nodes, workers, clients), rep) in enumerate(runs):
            cid = config_id(nodes, workers, clients)
            last = i == len(runs) - 1
            with Engine(EngineConfig(nodes, workers, root)) as engine:
                cleanup(engine, target)
                _, report = run_ingest(engine, IngestConfig(target, schema, clients), source)
                report.fidelity_ok = verify(engine, target, source)
                if not report.fidelity_ok:
                    raise FidelityError(f"fidelity check failed for {cid} rep {rep}")
                cleanup(engine, target, keep_target=keep_last and last)
            row = report_row(report, rep)
            log.info("%s rep %d: %.0f cells/s stage, %.0f total", cid, rep,
                     report.rate_stage, report.rate_total)
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return rows


_INT_COLS = {"nodes", "workers_per_node", "clients", "rows", "cols", "slices",
             "total_cells", "rep"}
_FLOAT_COLS = {"stage_seconds", "merge_seconds", "total_seconds", "rate_stage", "rate_total"}


def read_csv(path) -> list[dict]:
    """Parse a results CSV, raising CSVFormatError with the line number on bad input."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError("empty file", 1) from None
        if tuple(header) != CSV_COLUMNS:
            raise CSVFormatError(f"unexpected header {header}", 1)
        rows = []
        for rec in reader:
            line = reader.line_num
            if not rec:
                continue
            if len(rec) != len(CSV_COLUMNS):
                raise CSVFormatError(f"expected {len(CSV_COLUMNS)} fields, got {len(rec)}", line)
            row = {}
            for k, v in zip(CSV_COLUMNS, rec):
                try:
                    if k in _INT_COLS:
                        row[k] = int(v)
                    elif k in _FLOAT_COLS:
                        row[k] = float(v)
                    elif k == "fidelity_ok":
                        if v not in ("True", "False"):
                            raise ValueError(v)
                        row[k] = v == "True"
                    else:
                        row[k] = v
                except ValueError:
                    raise CSVFormatError(f"bad value {v!r} for column {k}", line) from None
            rows.append(row)
    return rows


@dataclass
class ConfigSummary:
    config_id: str
    nodes: int
    workers_per_node: int
    clients: int
    runs: int
    rate_stage: tuple[float, float, float]  # mean, min, max
    rate_total: tuple[float, float, float]
    reps: list[dict] = field(default_factory=list, repr=False)


def summarize(rows: Iterable[dict]) -> tuple[list[ConfigSummary], ConfigSummary | None]:
    """Per-config mean/min/max of both rates and the config with the best mean stage rate."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["config_id"], []).append(r)
    out = []
    for cid, rs in groups.items():
        st = [r["rate_stage"] for r in rs]
        tt = [r["rate_total"] for r in rs]
        out.append(ConfigSummary(
            cid, rs[0]["nodes"], rs[0]["workers_per_node"], rs[0]["clients"], len(rs),
            (statistics.fmean(st), min(st), max(st)),
            (statistics.fmean(tt), min(tt), max(tt)), rs))
    out.sort(key=lambda s: (s.nodes, s.workers_per_node, s.clients))
    best = max(out, key=lambda s: s.rate_stage[0]) if out else None
    return out, best


def format_report(summaries: list[ConfigSummary], best: ConfigSummary | None) -> str:
    lines = [f"{'config':<16}{'runs':>5}  {'stage mean':>12}{'min':>12}{'max':>12}"
             f"  {'total mean':>12}{'min':>12}{'max':>12}"]
    for s in summaries:
        lines.append(f"{s.config_id:<16}{s.runs:>5}  "
                     + "".join(f"{x:>12.0f}" for x in s.rate_stage) + "  "
                     + "".join(f"{x:>12.0f}" for x in s.rate_total))
    if best is not None:
        lines.append(f"best: {best.config_id} ({best.nodes} node(s), {best.workers_per_node} "
                     f"workers/node, {best.clients} clients) rate_stage={best.rate_stage[0]:.0f} "
                     f"rate_total={best.rate_total[0]:.0f} entries/s")
    return "\n".join(lines)


def gnuplot_data(summaries: list[ConfigSummary]) -> str:
    """Whitespace-separated columns: nodes workers clients stage_mean total_mean."""
    lines = ["# nodes workers_per_node clients rate_stage_mean rate_total_mean"]
    for s in summaries:
        lines.append(f"{s.nodes} {s.workers_per_node} {s.clients} "
                     f"{s.rate_stage[0]:.3f} {s.rate_total[0]:.3f}")
    return "\n".join(lines) + "\n"
