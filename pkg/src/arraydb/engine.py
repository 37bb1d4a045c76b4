"""Embedded array engine.

The engine owns the catalog of named arrays, serializes writers per array,
routes chunk work to simulated worker shards and answers range queries.

Concurrency contract
--------------------
* Reads never block and always see an immutable committed version.
* Inserts into the same array commit one at a time; each sees the previous
  commit as its base.
* Inserts into different arrays proceed independently.
"""

from __future__ import annotations

import itertools
import math
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from arraydb.chunkstore import ArrayVersion, ChunkStore, DENSE, _sort_rows
from arraydb.digest import fnv1a64
from arraydb.errors import (
    ConflictError,
    CorruptionError,
    NotFoundError,
    OutOfBoundsError,
    ValidationError,
)
from arraydb.schema import ArraySchema, as_coords, format_schema, parse_schema

CATALOG_MAGIC = b"ADBK"
CATALOG_FILE = "catalog.adbk"


@dataclass(frozen=True)
class EngineConfig:
    nodes: int = 1
    workers_per_node: int = 1
    root: Path | str = "arraydb-data"

    def __post_init__(self):
        if self.nodes < 1 or self.workers_per_node < 1:
            raise ValidationError("nodes and workers_per_node must be >= 1")

    @property
    def total_shards(self) -> int:
        return self.nodes * self.workers_per_node


@dataclass(frozen=True)
class ShardMap:
    """Round-robin chunk placement: flattened chunk ordinal mod shard count."""

    grid: tuple[int, ...]
    shards: int

    def __call__(self, ordinals) -> int:
        flat = 0
        for o, n in zip(ordinals, self.grid):
            flat = flat * n + int(o)
        return flat % self.shards


@dataclass(frozen=True)
class CellBox:
    low: tuple[int, ...]
    high: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "low", tuple(int(x) for x in self.low))
        object.__setattr__(self, "high", tuple(int(x) for x in self.high))
        if len(self.low) != len(self.high):
            raise ValidationError("box corners differ in dimensionality")
        for a, b in zip(self.low, self.high):
            if a > b:
                raise ValidationError(f"box low {self.low} exceeds high {self.high}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b - a + 1 for a, b in zip(self.low, self.high))

    def check(self, schema: ArraySchema) -> None:
        if len(self.low) != schema.ndim:
            raise ValidationError(f"box has {len(self.low)} dims, schema has {schema.ndim}")
        for d, a, b in zip(schema.dimensions, self.low, self.high):
            if a < d.lo or b > d.hi:
                raise OutOfBoundsError(
                    f"box [{a}, {b}] outside dimension {d.name} [{d.lo}, {d.hi}]")

    def chunk_ranges(self, schema: ArraySchema) -> list[range]:
        return [range((a - d.lo) // d.chunk_len, (b - d.lo) // d.chunk_len + 1)
                for d, a, b in zip(schema.dimensions, self.low, self.high)]

    def contains(self, coords: np.ndarray) -> np.ndarray:
        return np.all((coords >= np.asarray(self.low)) & (coords <= np.asarray(self.high)), axis=1)


@dataclass(frozen=True)
class Cells:
    """A batch of cells: ``coords`` of shape (n, ndim) and ``values`` of shape (n,).

    Unpacks as ``coords, values = cells``; ``len()`` is the cell count.
    """

    coords: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __iter__(self):
        return iter((self.coords, self.values))

    def pairs(self):
        """Yield ``(coordinate tuple, value)`` for every cell."""
        for c, v in zip(self.coords.tolist(), self.values.tolist()):
            yield tuple(c), v


@dataclass(frozen=True)
class ArrayHandle:
    name: str
    schema: ArraySchema
    shard_map: ShardMap


class _ShardPool:
    """Single-threaded lanes keyed by ``(array, shard)``.

    Within one array a shard processes one chunk job at a time; separate
    arrays get separate lanes so their work never queues behind each other.
    """

    def __init__(self, n: int):
        self.n = n
        self._lanes: dict[tuple[str, int], ThreadPoolExecutor] = {}
        self._lock = threading.Lock()

    def _lane(self, array: str, shard: int) -> ThreadPoolExecutor:
        with self._lock:
            ex = self._lanes.get((array, shard))
            if ex is None:
                ex = ThreadPoolExecutor(1, thread_name_prefix=f"{array}-shard{shard}")
                self._lanes[(array, shard)] = ex
            return ex

    def run(self, array: str, shard_of, jobs):
        if not jobs:
            return []
        groups: dict[int, list[int]] = {}
        for i, (ords, _) in enumerate(jobs):
            groups.setdefault(shard_of(ords), []).append(i)
        results = [None] * len(jobs)

        def work(idxs):
            for i in idxs:
                results[i] = jobs[i][1]()

        futures = [self._lane(array, s).submit(work, idxs) for s, idxs in groups.items()]
        for f in futures:
            f.result()
        return results

    def release(self, array: str):
        with self._lock:
            lanes = [k for k in self._lanes if k[0] == array]
            executors = [self._lanes.pop(k) for k in lanes]
        for ex in executors:
            ex.shutdown(wait=False)

    def shutdown(self):
        with self._lock:
            executors = list(self._lanes.values())
            self._lanes.clear()
        for ex in executors:
            ex.shutdown(wait=True)


def _no_hook(step, array):
    pass


class Engine:
    """Embedded array database.

    Parameters
    ----------
    config : EngineConfig
        Shard layout and data root. An existing catalog under the root is
        loaded, so an engine can be reopened after a restart.
    write_hook : callable, optional
        Forwarded to :class:`ChunkStore`; called before every chunk file write.
    """

    def __init__(self, config: EngineConfig | None = None, *, write_hook=None):
        self.config = config or EngineConfig()
        self.root = Path(self.config.root)
        self._pool = _ShardPool(self.config.total_shards)
        self.store = ChunkStore(self.root, run_jobs=self._run_jobs, write_hook=write_hook)
        self._handles: dict[str, ArrayHandle] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._catalog_lock = threading.RLock()
        # Instrumentation: called as hook(step, array) at the insert steps
        # "enter", "locked", "written", "committed".
        self.hook: Callable[[str, str], None] = _no_hook
        self.insert_log: list[tuple[str, int]] = []
        self._load_catalog()

    def close(self):
        self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- catalog -----------------------------------------------------------

    def _run_jobs(self, array, schema, jobs):
        smap = ShardMap(schema.chunk_grid, self.config.total_shards)
        return self._pool.run(array, smap, jobs)

    def _save_catalog(self):
        recs = []
        for name in sorted(self._handles):
            h = self._handles[name]
            nums = [v.number for v in self.store.list_versions(name)]
            nb = name.encode()
            sb = format_schema(h.schema, name).encode()
            body = (struct.pack("<H", len(nb)) + nb + struct.pack("<I", len(sb)) + sb
                    + struct.pack(f"<I{len(nums)}I", len(nums), *nums))
            recs.append(struct.pack("<I", len(body)) + body)
        payload = b"".join(recs)
        data = (struct.pack("<4sHI", CATALOG_MAGIC, 1, len(recs)) + payload
                + struct.pack("<Q", fnv1a64(payload)))
        tmp = self.root / (CATALOG_FILE + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(self.root / CATALOG_FILE)

    def _load_catalog(self):
        path = self.root / CATALOG_FILE
        if not path.exists():
            return
        buf = path.read_bytes()
        magic, fmt, n = struct.unpack_from("<4sHI", buf, 0)
        payload = buf[10:-8]
        if magic != CATALOG_MAGIC or fnv1a64(payload) != struct.unpack_from("<Q", buf, len(buf) - 8)[0]:
            raise CorruptionError("catalog file is corrupt")
        pos = 0
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", payload, pos)
            body = payload[pos + 4:pos + 4 + ln]
            pos += 4 + ln
            (nl,) = struct.unpack_from("<H", body, 0)
            name = body[2:2 + nl].decode()
            q = 2 + nl
            (sl,) = struct.unpack_from("<I", body, q)
            _, schema = parse_schema(body[q + 4:q + 4 + sl].decode())
            q += 4 + sl
            (nv,) = struct.unpack_from("<I", body, q)
            nums = struct.unpack_from(f"<{nv}I", body, q + 4)
            self.store.attach(name, schema, nums)
            self._register(name, schema)

    def _register(self, name, schema) -> ArrayHandle:
        h = ArrayHandle(name, schema, ShardMap(schema.chunk_grid, self.config.total_shards))
        self._handles[name] = h
        self._locks[name] = threading.Lock()
        return h

    # -- lifecycle ---------------------------------------------------------

    def create_array(self, name: str, schema: ArraySchema | str) -> ArrayHandle:
        if isinstance(schema, str):
            parsed_name, schema = parse_schema(schema)
            name = name or parsed_name
        with self._catalog_lock:
            if name in self._handles:
                raise ConflictError(f"array {name!r} already exists")
            self.store.create(name, schema)
            h = self._register(name, schema)
            self._save_catalog()
        return h

    def drop_array(self, name: str) -> None:
        with self._catalog_lock:
            self._handle(name)
            with self._locks[name]:
                del self._handles[name]
                self.store.drop(name)
                self._pool.release(name)
                self._save_catalog()

    def gc(self) -> int:
        with self._catalog_lock:
            return self.store.gc()

    def arrays(self) -> list[str]:
        return sorted(self._handles)

    def _handle(self, array) -> ArrayHandle:
        name = array.name if isinstance(array, ArrayHandle) else array
        try:
            return self._handles[name]
        except KeyError:
            raise NotFoundError(f"unknown array {name!r}") from None

    def handle(self, name: str) -> ArrayHandle:
        return self._handle(name)

    def list_versions(self, array) -> list[ArrayVersion]:
        return self.store.list_versions(self._handle(array).name)

    def latest(self, array) -> ArrayVersion:
        return self.store.latest(self._handle(array).name)

    # -- writes ------------------------------------------------------------

    def insert(self, array, coords, values) -> ArrayVersion:
        """Commit a batch of cells as a new version.

        Duplicate coordinates within a batch: the last occurrence wins.
        """
        h = self._handle(array)
        coords = as_coords(coords, h.schema.ndim)
        self.hook("enter", h.name)
        with self._locks[h.name]:
            self.hook("locked", h.name)
            base = self.store.latest(h.name)
            version = self.store.write_chunks(h.name, base, coords, values)
            self.hook("written", h.name)
            with self._catalog_lock:
                self.insert_log.append((h.name, threading.get_ident()))
                self._save_catalog()
        self.hook("committed", h.name)
        return version

    def merge(self, target: str, sources) -> ArrayHandle:
        """Combine same-schema arrays into a new array ``target``.

        Where sources overlap, the earlier source in the list wins. Chunks
        held by a single source are shared by reference, so merging arrays
        with disjoint chunk sets touches no cell data.
        """
        hs = [self._handle(s) for s in sources]
        if not hs:
            raise ValidationError("merge needs at least one source")
        schema = hs[0].schema
        for h in hs[1:]:
            if h.schema != schema:
                raise ValidationError(f"schema of {h.name!r} differs from {hs[0].name!r}")
        snapshots = [(h.name, self.store.latest(h.name)) for h in hs]
        out = self.create_array(target, schema)
        with self._locks[target]:
            self.store.merge_into(target, snapshots)
            with self._catalog_lock:
                self._save_catalog()
        return out

    # -- reads -------------------------------------------------------------

    def _version(self, h: ArrayHandle, version):
        return self.store.resolve(h.name, version)

    def _chunks_in_box(self, h: ArrayHandle, v: ArrayVersion, box: CellBox):
        ranges = box.chunk_ranges(h.schema)
        total = math.prod(len(r) for r in ranges)
        if total <= len(v.manifest):
            return [o for o in itertools.product(*ranges) if o in v.manifest]
        return sorted(o for o in v.manifest
                      if all(r.start <= x < r.stop for x, r in zip(o, ranges)))

    def between(self, array, box: CellBox | tuple, version=None) -> Cells:
        """Stored cells inside ``box`` (inclusive), in row-major coordinate order.

        Only chunks intersecting the box are read.
        """
        h = self._handle(array)
        box = box if isinstance(box, CellBox) else CellBox(*box)
        box.check(h.schema)
        v = self._version(h, version)
        lo, hi = np.asarray(box.low), np.asarray(box.high)

        def job(ords):
            chunk = self.store.load_chunk(h.name, h.schema, ords, v.manifest[ords])
            org = np.asarray(chunk.origin)
            clo = np.maximum(lo, org) - org
            chi = np.minimum(hi, org + np.asarray(chunk.shape) - 1) - org
            if chunk.encoding == DENSE:
                data, mask = chunk.dense()
                sl = tuple(slice(a, b + 1) for a, b in zip(clo, chi))
                sub = mask[sl]
                idx = np.nonzero(sub)
                c = np.stack(idx, axis=1).astype(np.int64) + (clo + org) if len(idx[0]) else \
                    np.empty((0, len(org)), np.int64)
                return c, data[sl][sub]
            c, vals = chunk.cells()
            keep = np.all((c >= lo) & (c <= hi), axis=1)
            return c[keep], vals[keep]

        ordl = self._chunks_in_box(h, v, box)
        parts = self._pool.run(h.name, h.shard_map, [(o, (lambda o=o: job(o))) for o in ordl])
        return _concat_sorted(parts, h.schema)

    def scan(self, array, version=None) -> Cells:
        h = self._handle(array)
        s = h.schema
        return self.between(h, CellBox(tuple(s.lows), tuple(s.highs)), version)

    def fetch_dense(self, array, box: CellBox | tuple, version=None):
        """Dense block over ``box`` plus a presence mask (absent cells hold zero)."""
        h = self._handle(array)
        box = box if isinstance(box, CellBox) else CellBox(*box)
        box.check(h.schema)
        v = self._version(h, version)
        attr = h.schema.attribute
        block = np.zeros(box.shape, dtype=attr.dtype)
        if attr.value_type == "utf8-string":
            block[...] = ""
        mask = np.zeros(box.shape, dtype=bool)
        lo, hi = np.asarray(box.low), np.asarray(box.high)

        def job(ords):
            chunk = self.store.load_chunk(h.name, h.schema, ords, v.manifest[ords])
            org = np.asarray(chunk.origin)
            glo = np.maximum(lo, org)
            ghi = np.minimum(hi, org + np.asarray(chunk.shape) - 1)
            src = tuple(slice(a, b + 1) for a, b in zip(glo - org, ghi - org))
            dst = tuple(slice(a, b + 1) for a, b in zip(glo - lo, ghi - lo))
            data, m = chunk.dense()
            # disjoint destination regions per chunk: safe to fill concurrently
            np.copyto(block[dst], data[src], where=m[src])
            mask[dst] |= m[src]

        ordl = self._chunks_in_box(h, v, box)
        self._pool.run(h.name, h.shard_map, [(o, (lambda o=o: job(o))) for o in ordl])
        return block, mask


def _concat_sorted(parts, schema: ArraySchema) -> Cells:
    parts = [p for p in parts if len(p[1])]
    if not parts:
        return Cells(np.empty((0, schema.ndim), np.int64),
                     np.empty(0, dtype=schema.attribute.dtype))
    coords = np.concatenate([p[0] for p in parts])
    values = np.concatenate([p[1] for p in parts])
    order = _sort_rows(coords)
    return Cells(coords[order], values[order])
