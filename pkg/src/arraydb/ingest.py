"""Two-stage parallel ingest: per-client staging arrays, then one merge.

Writes to any single array are serialized by the engine, so parallel clients
never share an array. Client ``k`` creates ``{target}__stage_{k}``, inserts
its share of the slices there, and after every client has finished the
coordinator (rank 0) merges all staging arrays into the target.

Timing: the stage clock starts at the first insert call of any client and
stops at the last client's final commit; staging-array creation is excluded.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from arraydb.assoc import DbTable
from arraydb.engine import ArrayHandle, CellBox, Engine
from arraydb.errors import IngestAborted, MeasurementError, ValidationError
from arraydb.schema import ArraySchema

CLOCK_NOTE = "stage clock starts at the first insert call, after staging arrays exist"


def staging_name(target: str, rank: int) -> str:
    return f"{target}__stage_{rank}"


def block_assignment(slices: Sequence[int], num_clients: int) -> list[list[int]]:
    """Contiguous blocks; the first ``len % n`` clients get one extra slice."""
    q, r = divmod(len(slices), num_clients)
    out, i = [], 0
    for k in range(num_clients):
        n = q + (1 if k < r else 0)
        out.append(list(slices[i:i + n]))
        i += n
    return out


def round_robin_assignment(slices: Sequence[int], num_clients: int) -> list[list[int]]:
    return [list(slices[k::num_clients]) for k in range(num_clients)]


ASSIGNMENTS = {"block": block_assignment, "round-robin": round_robin_assignment}


@dataclass(frozen=True)
class IngestConfig:
    """One ingest run.

    ``assignment`` is ``"block"``, ``"round-robin"`` or a callable
    ``(slice coordinates, num_clients) -> list of per-rank slice lists``.
    ``batch_size`` is cells per insert call; ``None`` means one slice.
    """

    target: str
    schema: ArraySchema
    num_clients: int = 1
    assignment: str | Callable = "block"
    batch_size: int | None = None

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValidationError("num_clients must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")

    @property
    def slice_dim(self):
        return self.schema.dimensions[-1]

    @property
    def slice_cells(self) -> int:
        return math.prod(self.schema.shape[:-1])


@dataclass(frozen=True)
class ClientPlan:
    rank: int
    staging: str
    slices: tuple[int, ...]
    batch_size: int
    coordinator: bool


@dataclass
class ClientStats:
    rank: int
    staging: str
    cells: int = 0
    inserts: int = 0
    first_insert: float | None = None
    last_commit: float | None = None
    error: BaseException | None = None

    @property
    def seconds(self) -> float:
        if self.first_insert is None or self.last_commit is None:
            return 0.0
        return self.last_commit - self.first_insert


def plan(config: IngestConfig) -> list[ClientPlan]:
    """Split the slice axis over clients. Rank 0 is the coordinator."""
    sd = config.slice_dim
    all_slices = list(range(sd.lo, sd.hi + 1))
    assign = config.assignment
    fn = ASSIGNMENTS.get(assign) if isinstance(assign, str) else assign
    if fn is None:
        raise ValidationError(f"unknown slice assignment {assign!r}")
    parts = [list(p) for p in fn(all_slices, config.num_clients)]
    if len(parts) != config.num_clients:
        raise ValidationError(f"assignment produced {len(parts)} parts for "
                              f"{config.num_clients} clients")
    flat = [s for p in parts for s in p]
    if len(flat) != len(set(flat)):
        raise ValidationError("slice assignment is not disjoint")
    if sorted(flat) != all_slices:
        raise ValidationError("slice assignment does not cover every slice")
    batch = config.batch_size or config.slice_cells
    return [ClientPlan(k, staging_name(config.target, k), tuple(p), batch, k == 0)
            for k, p in enumerate(parts)]


def _slice_cells(schema: ArraySchema, base: np.ndarray, slice_coord: int, image):
    coords = np.empty((base.shape[0], schema.ndim), dtype=np.int64)
    coords[:, :-1] = base
    coords[:, -1] = slice_coord
    return coords, np.asarray(image).reshape(-1)


def _base_coords(schema: ArraySchema) -> np.ndarray:
    """Row-major coordinates of one slice (all dims but the last)."""
    axes = [np.arange(d.lo, d.hi + 1, dtype=np.int64) for d in schema.dimensions[:-1]]
    if not axes:
        return np.empty((1, 0), np.int64)
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def _batches(pieces, batch_size):
    buf_c, buf_v, n = [], [], 0
    for c, v in pieces:
        while len(v):
            take = min(batch_size - n, len(v))
            buf_c.append(c[:take])
            buf_v.append(v[:take])
            n += take
            c, v = c[take:], v[take:]
            if n == batch_size:
                yield _join(buf_c, buf_v)
                buf_c, buf_v, n = [], [], 0
    if n:
        yield _join(buf_c, buf_v)


def _join(cs, vs):
    if len(cs) == 1:
        return cs[0], vs[0]
    return np.concatenate(cs), np.concatenate(vs)


def run_client(engine: Engine, client: ClientPlan, schema: ArraySchema, source,
               start_gate: threading.Barrier | None = None) -> tuple[ArrayHandle, ClientStats]:
    """Create this client's staging array and ingest its slices into it.

    ``source.slice(k)`` must return slice ``k`` (0-based) of the volume.
    Errors are recorded in the returned stats rather than raised, so the
    coordinator can report every failed rank.
    """
    stats = ClientStats(client.rank, client.staging)
    handle = None
    try:
        handle = engine.create_array(client.staging, schema)
        if start_gate is not None:
            start_gate.wait()
        table = DbTable(engine, client.staging)
        sd = schema.dimensions[-1]
        base = _base_coords(schema)
        pieces = (_slice_cells(schema, base, s, source.slice(s - sd.lo)) for s in client.slices)
        for coords, values in _batches(pieces, client.batch_size):
            if stats.first_insert is None:
                stats.first_insert = time.perf_counter()
            table = table.put_triple(coords, values)
            stats.last_commit = time.perf_counter()
            stats.cells += len(values)
            stats.inserts += 1
    except BaseException as exc:  # noqa: BLE001 - reported to the coordinator
        stats.error = exc
        if start_gate is not None:
            start_gate.abort()
    return handle, stats


@dataclass
class IngestReport:
    nodes: int
    workers_per_node: int
    num_clients: int
    extents: tuple[int, ...]
    total_cells: int
    stage_seconds: float
    merge_seconds: float
    total_seconds: float
    rate_stage: float
    rate_total: float
    degenerate: bool = False
    clients: list[ClientStats] = field(default_factory=list)
    fidelity_ok: bool | None = None
    clock_note: str = CLOCK_NOTE

    def check(self) -> None:
        """Assert the report's arithmetic invariants."""
        if self.clients:
            assert self.total_cells == sum(c.cells for c in self.clients)
        assert self.total_seconds == self.stage_seconds + self.merge_seconds
        for rate, secs in ((self.rate_stage, self.stage_seconds),
                           (self.rate_total, self.total_seconds)):
            if self.degenerate:
                assert rate == 0.0
            else:
                assert rate == self.total_cells / secs
                assert abs(rate * secs - self.total_cells) <= math.ulp(self.total_cells)


def measure(total_cells: int, stage_seconds: float, merge_seconds: float, *,
            nodes: int = 1, workers_per_node: int = 1, num_clients: int = 1,
            extents=(), clients=()) -> IngestReport:
    """Build an :class:`IngestReport` with both throughput variants.

    ``rate_stage`` divides cells by the staging time alone; ``rate_total``
    includes the merge. Zero cells yields zero rates flagged ``degenerate``.

    Raises
    ------
    MeasurementError
        If a wall time is not positive while cells were ingested.
    """
    if total_cells < 0 or stage_seconds < 0 or merge_seconds < 0:
        raise MeasurementError("negative cell count or time")
    clients = list(clients)
    if clients and sum(c.cells for c in clients) != total_cells:
        raise MeasurementError("per-client cell counts do not add up to the total")
    total_seconds = stage_seconds + merge_seconds
    degenerate = total_cells == 0
    if degenerate:
        rs = rt = 0.0
    else:
        if stage_seconds <= 0 or total_seconds <= 0:
            raise MeasurementError("zero wall time: below clock resolution")
        rs = total_cells / stage_seconds
        rt = total_cells / total_seconds
    report = IngestReport(nodes, workers_per_node, num_clients, tuple(extents), int(total_cells),
                          float(stage_seconds), float(merge_seconds), float(total_seconds),
                          rs, rt, degenerate, clients)
    report.check()
    return report


def finalize(engine: Engine, staged: Sequence, target: str,
             clients: Sequence[ClientStats] = ()) -> tuple[ArrayHandle, float]:
    """Merge staging arrays into ``target`` once every client has succeeded.

    Returns the target handle and the merge wall time in seconds.
    """
    failed = {c.rank: c.error for c in clients if c.error is not None}
    if failed:
        detail = ", ".join(f"rank {c.rank} ({c.staging}: {c.cells} cells staged)"
                           for c in clients if c.rank in failed)
        raise IngestAborted(f"ingest aborted, failed clients: {detail}", failed)
    if any(h is None for h in staged):
        raise IngestAborted("a staging array is missing", {})
    t0 = time.perf_counter()
    handle = engine.merge(target, list(staged))
    return handle, time.perf_counter() - t0


def run_ingest(engine: Engine, config: IngestConfig, source) -> tuple[ArrayHandle, IngestReport]:
    """Full protocol: plan, concurrent staging clients, barrier, merge, report."""
    if tuple(source.extents) != config.schema.shape:
        raise ValidationError(f"source extents {source.extents} != schema shape "
                              f"{config.schema.shape}")
    plans = plan(config)
    gate = threading.Barrier(len(plans))
    results: list = [None] * len(plans)
    log_start = len(engine.insert_log)

    def client(p):
        results[p.rank] = run_client(engine, p, config.schema, source, gate)

    threads = [threading.Thread(target=client, args=(p,), name=f"client{p.rank}")
               for p in plans]
    for t in threads:
        t.start()
    for t in threads:  # pre-merge barrier
        t.join()

    stats = [r[1] for r in results]
    handles = [r[0] for r in results]
    _check_disjoint(engine.insert_log[log_start:], plans)
    target, merge_s = finalize(engine, handles, config.target, stats)
    starts = [s.first_insert for s in stats if s.first_insert is not None]
    ends = [s.last_commit for s in stats if s.last_commit is not None]
    stage_s = (max(ends) - min(starts)) if starts else 0.0
    cfg = engine.config
    report = measure(sum(s.cells for s in stats), stage_s, merge_s,
                     nodes=cfg.nodes, workers_per_node=cfg.workers_per_node,
                     num_clients=config.num_clients, extents=config.schema.shape,
                     clients=stats)
    return target, report


def _check_disjoint(log, plans):
    """Every staging array must have been written by exactly one client thread."""
    writers: dict[str, set] = {}
    for name, tid in log:
        writers.setdefault(name, set()).add(tid)
    for p in plans:
        if len(writers.get(p.staging, ())) > 1:
            raise AssertionError(f"{p.staging} was written by more than one client")


def verify(engine: Engine, target, source) -> bool:
    """True when the target holds exactly the source volume (every cell present)."""
    h = engine.handle(target) if isinstance(target, str) else target
    s = h.schema
    block, mask = engine.fetch_dense(h, CellBox(tuple(s.lows), tuple(s.highs)))
    if not mask.all():
        return False
    for k in range(block.shape[-1]):
        if not np.array_equal(block[..., k], source.slice(k)):
            return False
    return True


def cleanup(engine: Engine, target: str, *, keep_target: bool = False) -> None:
    """Drop every staging array of ``target`` (and the target unless kept), then gc."""
    prefix = staging_name(target, 0)[:-1]
    for name in engine.arrays():
        if name.startswith(prefix) or (name == target and not keep_target):
            engine.drop_array(name)
    engine.gc()
