"""Chunk representation, on-disk chunk/manifest files and versioned storage.

A chunk holds the cells of one coordinate-aligned block ("core") plus copies
of neighboring cells that fall inside its overlap margin ("halo"). Halos are
materialized when cells are written, so a reader can get boundary
neighborhoods from a single chunk file.

Every write produces a new immutable :class:`ArrayVersion`. Chunks untouched
by a write are shared with the base version through the manifest; touched
chunks are written to new files (copy-on-write). Nothing is ever deleted
except by an explicit :meth:`ChunkStore.gc`.

Thread safety: any number of concurrent readers. Writers to the *same* array
must be serialized by the caller (the engine holds a per-array commit lock);
writers to different arrays may run concurrently.
"""

from __future__ import annotations

import itertools
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from arraydb.digest import fnv1a64
from arraydb.errors import (
    CorruptionError,
    NotFoundError,
    StorageWriteError,
    ValidationError,
    VersionError,
)
from arraydb.schema import ArraySchema, as_coords, check_coords

CHUNK_MAGIC = b"ADBC"
MANIFEST_MAGIC = b"ADBM"
FORMAT_VERSION = 1

DENSE = 0
SPARSE = 1
ENCODING_NAMES = {DENSE: "dense", SPARSE: "sparse-coo"}

_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class ChunkId:
    array: str
    ordinals: tuple[int, ...]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    digest: int


@dataclass(frozen=True)
class ArrayVersion:
    number: int
    parent: int | None
    manifest: Mapping[tuple[int, ...], ManifestEntry] = field(compare=False)

    def __post_init__(self):
        if not isinstance(self.manifest, MappingProxyType):
            object.__setattr__(self, "manifest", MappingProxyType(dict(self.manifest)))


def _empty_values(dtype, n):
    if dtype == object:
        out = np.empty(n, dtype=object)
        out[:] = ""
        return out
    return np.zeros(n, dtype=dtype)


def _keep_last(offsets: np.ndarray, values: np.ndarray):
    """Deduplicate offsets keeping the last occurrence; result sorted by offset."""
    rev = offsets[::-1]
    uniq, idx = np.unique(rev, return_index=True)
    return uniq, values[::-1][idx]


def _sort_rows(coords: np.ndarray) -> np.ndarray:
    """Row-major (lexicographic) ordering permutation for an (n, d) array."""
    if coords.shape[0] <= 1:
        return np.arange(coords.shape[0])
    return np.lexsort(coords.T[::-1])


class Chunk:
    """Decoded contents of one chunk.

    The core is held either densely (``data`` + presence ``mask`` over the
    clipped chunk extent, flattened row-major) or sparsely (sorted flat
    ``offsets`` + ``values``). Halo cells are kept as global coordinates.
    Instances are treated as immutable: every update returns a new chunk.
    """

    __slots__ = (
        "id", "origin", "shape", "dtype", "encoding",
        "data", "mask", "offsets", "values",
        "halo_coords", "halo_values", "_count",
    )

    def __init__(self, id: ChunkId, origin, shape, dtype, *, data=None, mask=None,
                 offsets=None, values=None, halo_coords=None, halo_values=None):
        self.id = id
        self.origin = tuple(int(x) for x in origin)
        self.shape = tuple(int(x) for x in shape)
        self.dtype = np.dtype(dtype)
        ndim = len(self.shape)
        if data is not None:
            self.encoding = DENSE
            self.data, self.mask = data, mask
            self.offsets = self.values = None
            self._count = int(np.count_nonzero(mask))
        else:
            self.encoding = SPARSE
            self.data = self.mask = None
            self.offsets = np.empty(0, np.int64) if offsets is None else offsets
            self.values = _empty_values(self.dtype, 0) if values is None else values
            self._count = len(self.offsets)
        self.halo_coords = np.empty((0, ndim), np.int64) if halo_coords is None else halo_coords
        self.halo_values = _empty_values(self.dtype, 0) if halo_values is None else halo_values

    @classmethod
    def empty(cls, schema: ArraySchema, id: ChunkId) -> Chunk:
        return cls(id, schema.chunk_origin(id.ordinals), schema.chunk_shape(id.ordinals),
                   schema.attribute.dtype)

    @property
    def capacity(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def cell_count(self) -> int:
        return self._count

    @property
    def halo_count(self) -> int:
        return len(self.halo_values)

    @property
    def encoding_name(self) -> str:
        return ENCODING_NAMES[self.encoding]

    def core(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted flat offsets and matching values of the core cells."""
        if self.encoding == DENSE:
            off = np.flatnonzero(self.mask)
            return off, self.data[off]
        return self.offsets, self.values

    def coords(self) -> np.ndarray:
        off, _ = self.core()
        return self.offsets_to_coords(off)

    def offsets_to_coords(self, off: np.ndarray) -> np.ndarray:
        if len(off) == 0:
            return np.empty((0, len(self.shape)), np.int64)
        idx = np.unravel_index(off, self.shape)
        return np.stack(idx, axis=1).astype(np.int64) + np.asarray(self.origin, np.int64)

    def coords_to_offsets(self, coords: np.ndarray) -> np.ndarray:
        local = coords - np.asarray(self.origin, np.int64)
        return np.ravel_multi_index(tuple(local.T), self.shape).astype(np.int64)

    def cells(self, include_halo: bool = False) -> tuple[np.ndarray, np.ndarray]:
        off, vals = self.core()
        coords = self.offsets_to_coords(off)
        if include_halo and self.halo_count:
            coords = np.concatenate([coords, self.halo_coords])
            vals = np.concatenate([vals, self.halo_values])
            order = _sort_rows(coords)
            coords, vals = coords[order], vals[order]
        return coords, vals

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Core as ``(data, mask)`` reshaped to the chunk extent."""
        if self.encoding == DENSE:
            return self.data.reshape(self.shape), self.mask.reshape(self.shape)
        data = _empty_values(self.dtype, self.capacity)
        mask = np.zeros(self.capacity, dtype=bool)
        data[self.offsets] = self.values
        mask[self.offsets] = True
        return data.reshape(self.shape), mask.reshape(self.shape)

    def _replace(self, **kw) -> Chunk:
        args = dict(halo_coords=self.halo_coords, halo_values=self.halo_values)
        if "data" not in kw and "offsets" not in kw:
            if self.encoding == DENSE:
                args.update(data=self.data, mask=self.mask)
            else:
                args.update(offsets=self.offsets, values=self.values)
        args.update(kw)
        return Chunk(self.id, self.origin, self.shape, self.dtype, **args)

    def with_encoding(self, encoding: int) -> Chunk:
        if encoding == self.encoding:
            return self
        if encoding == DENSE:
            data, mask = self.dense()
            return self._replace(data=data.reshape(-1), mask=mask.reshape(-1))
        off, vals = self.core()
        return self._replace(offsets=off, values=vals)

    def normalized(self) -> Chunk:
        """Apply the storage rule: dense iff more than half the core is populated."""
        want = DENSE if 2 * self.cell_count > self.capacity else SPARSE
        return self.with_encoding(want)

    def with_cells(self, offsets: np.ndarray, values: np.ndarray) -> Chunk:
        """Write core cells (last occurrence wins) and return the new chunk."""
        if len(offsets) == 0:
            return self
        values = np.asarray(values, dtype=self.dtype)
        if self.encoding == DENSE or 2 * (self._count + len(offsets)) > self.capacity:
            if self.encoding == DENSE:
                data, mask = self.data.copy(), self.mask.copy()
            else:
                data = _empty_values(self.dtype, self.capacity)
                mask = np.zeros(self.capacity, dtype=bool)
                data[self.offsets] = self.values
                mask[self.offsets] = True
            fresh = np.zeros(self.capacity, dtype=bool)
            fresh[offsets] = True
            if np.count_nonzero(fresh) != len(offsets):
                offsets, values = _keep_last(offsets, values)
            data[offsets] = values
            mask[offsets] = True
            return self._replace(data=data, mask=mask).normalized()
        off, vals = _keep_last(np.concatenate([self.offsets, offsets]),
                               np.concatenate([self.values, values]))
        return self._replace(offsets=off, values=vals).normalized()

    def with_halo(self, coords: np.ndarray, values: np.ndarray) -> Chunk:
        if len(coords) == 0:
            return self
        values = np.asarray(values, dtype=self.dtype)
        allc = np.concatenate([self.halo_coords, coords])
        allv = np.concatenate([self.halo_values, values])
        # last occurrence wins: sort stably by coordinate, keep final of each run
        order = np.lexsort(allc.T[::-1])
        allc, allv = allc[order], allv[order]
        if len(allc) > 1:
            same_next = np.all(allc[1:] == allc[:-1], axis=1)
            keep = np.ones(len(allc), dtype=bool)
            keep[:-1] = ~same_next
            allc, allv = allc[keep], allv[keep]
        return self._replace(halo_coords=allc, halo_values=allv)

    def without_halo(self) -> Chunk:
        return self._replace(halo_coords=None, halo_values=None)

    def same_cells(self, other: Chunk) -> bool:
        a_off, a_val = self.core()
        b_off, b_val = other.core()
        return (np.array_equal(a_off, b_off) and np.array_equal(a_val, b_val)
                and np.array_equal(self.halo_coords, other.halo_coords)
                and np.array_equal(self.halo_values, other.halo_values))


# --------------------------------------------------------------------------
# binary encoding


def _value_bytes(values: np.ndarray, value_type: str) -> bytes:
    if value_type == "utf8-string":
        parts = []
        for v in values:
            b = v.encode("utf-8")
            parts.append(struct.pack("<I", len(b)))
            parts.append(b)
        return b"".join(parts)
    return np.ascontiguousarray(values).tobytes()


def _read_strings(buf, pos, n):
    out = np.empty(n, dtype=object)
    for i in range(n):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out[i] = bytes(buf[pos:pos + ln]).decode("utf-8")
        pos += ln
    return out, pos


def _records_bytes(rel: np.ndarray, values: np.ndarray, value_type: str) -> bytes:
    """Sparse records: per-dimension u32 (lo-relative) coordinates then the value."""
    n, ndim = rel.shape
    if value_type == "utf8-string":
        parts = []
        for i in range(n):
            parts.append(rel[i].astype("<u4").tobytes())
            b = values[i].encode("utf-8")
            parts.append(struct.pack("<I", len(b)))
            parts.append(b)
        return b"".join(parts)
    dt = np.dtype([(f"c{i}", "<u4") for i in range(ndim)] + [("v", values.dtype)])
    rec = np.empty(n, dtype=dt)
    for i in range(ndim):
        rec[f"c{i}"] = rel[:, i]
    rec["v"] = values
    return rec.tobytes()


def _read_records(buf, pos, n, ndim, dtype, value_type):
    if value_type == "utf8-string":
        rel = np.empty((n, ndim), np.int64)
        vals = np.empty(n, dtype=object)
        for i in range(n):
            rel[i] = np.frombuffer(buf, "<u4", ndim, pos)
            pos += 4 * ndim
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            vals[i] = bytes(buf[pos:pos + ln]).decode("utf-8")
            pos += ln
        return rel, vals, pos
    dt = np.dtype([(f"c{i}", "<u4") for i in range(ndim)] + [("v", dtype)])
    rec = np.frombuffer(buf, dt, n, pos)
    rel = np.stack([rec[f"c{i}"] for i in range(ndim)], axis=1).astype(np.int64) if n else \
        np.empty((0, ndim), np.int64)
    return rel, rec["v"].copy(), pos + n * dt.itemsize


def encode_chunk(chunk: Chunk, schema: ArraySchema) -> bytes:
    """Serialize a chunk to the ``ADBC`` little-endian format.

    Layout: magic, u16 format version, u64 schema digest, u8 ordinal count,
    u32 ordinals, u8 encoding, u64 cell count, u64 halo count, payload,
    u64 FNV-1a digest of the payload. Dense payloads start with a presence
    bitmap (one bit per core cell, LSB first) followed by every core value in
    row-major order; sparse payloads are coordinate/value records. Halo cells
    follow as sparse records in both encodings. Coordinates are stored
    relative to each dimension's ``lo``.
    """
    vt = schema.attribute.value_type
    lows = schema.lows
    ords = chunk.id.ordinals
    header = struct.pack(f"<4sHQB{len(ords)}IBQQ", CHUNK_MAGIC, FORMAT_VERSION,
                         schema.digest, len(ords), *ords, chunk.encoding,
                         chunk.cell_count, chunk.halo_count)
    if chunk.encoding == DENSE:
        parts = [np.packbits(chunk.mask, bitorder="little").tobytes(),
                 _value_bytes(chunk.data, vt)]
    else:
        rel = chunk.offsets_to_coords(chunk.offsets) - lows
        parts = [_records_bytes(rel, chunk.values, vt)]
    if chunk.halo_count:
        parts.append(_records_bytes(chunk.halo_coords - lows, chunk.halo_values, vt))
    payload = b"".join(parts)
    return b"".join([header, payload, _U64.pack(fnv1a64(payload))])


def payload_digest(buf: bytes) -> int:
    return _U64.unpack_from(buf, len(buf) - 8)[0]


def decode_chunk(buf: bytes, schema: ArraySchema, array: str = "") -> Chunk:
    buf = memoryview(buf)
    if len(buf) < 24 or bytes(buf[:4]) != CHUNK_MAGIC:
        raise CorruptionError("not a chunk file (bad magic)")
    fmt, sdig, nord = struct.unpack_from("<HQB", buf, 4)
    if fmt != FORMAT_VERSION:
        raise CorruptionError(f"unsupported chunk format version {fmt}")
    if sdig != schema.digest:
        raise CorruptionError("chunk was written for a different schema")
    pos = 4 + struct.calcsize("<HQB")
    ords = struct.unpack_from(f"<{nord}I", buf, pos)
    pos += 4 * nord
    encoding, count, nhalo = struct.unpack_from("<BQQ", buf, pos)
    pos += struct.calcsize("<BQQ")
    payload = buf[pos:len(buf) - 8]
    if fnv1a64(payload) != payload_digest(buf):
        raise CorruptionError(f"payload digest mismatch in chunk {ords}")
    if nord != schema.ndim:
        raise CorruptionError("ordinal count does not match schema")
    attr = schema.attribute
    cid = ChunkId(array, tuple(ords))
    origin, shape = schema.chunk_origin(ords), schema.chunk_shape(ords)
    lows = schema.lows
    p = 0
    try:
        if encoding == DENSE:
            cap = int(np.prod(shape, dtype=np.int64))
            nbits = (cap + 7) // 8
            mask = np.unpackbits(np.frombuffer(payload, np.uint8, nbits, p),
                                 count=cap, bitorder="little").astype(bool)
            p += nbits
            if attr.value_type == "utf8-string":
                data, p = _read_strings(payload, p, cap)
            else:
                data = np.frombuffer(payload, attr.dtype, cap, p).copy()
                p += cap * attr.dtype.itemsize
            core = dict(data=data, mask=mask)
        elif encoding == SPARSE:
            rel, vals, p = _read_records(payload, p, count, nord, attr.dtype, attr.value_type)
            tmp = Chunk(cid, origin, shape, attr.dtype)
            core = dict(offsets=tmp.coords_to_offsets(rel + lows), values=vals)
        else:
            raise CorruptionError(f"unknown encoding {encoding}")
        hrel, hvals, p = _read_records(payload, p, nhalo, nord, attr.dtype, attr.value_type)
    except (struct.error, ValueError) as exc:
        raise CorruptionError(f"truncated chunk payload: {exc}") from exc
    if p != len(payload):
        raise CorruptionError("trailing bytes in chunk payload")
    chunk = Chunk(cid, origin, shape, attr.dtype, halo_coords=hrel + lows,
                  halo_values=hvals, **core)
    if chunk.cell_count != count:
        raise CorruptionError("cell count does not match payload")
    return chunk


def encode_manifest(version: ArrayVersion, schema: ArraySchema) -> bytes:
    """Version manifest: header then length-prefixed records, trailing digest."""
    recs = []
    for ords in sorted(version.manifest):
        e = version.manifest[ords]
        p = e.path.encode("utf-8")
        body = struct.pack(f"<B{len(ords)}IH", len(ords), *ords, len(p)) + p + _U64.pack(e.digest)
        recs.append(struct.pack("<I", len(body)) + body)
    payload = b"".join(recs)
    header = struct.pack("<4sHIIQI", MANIFEST_MAGIC, FORMAT_VERSION, version.number,
                         version.parent or 0, schema.digest, len(recs))
    return header + payload + _U64.pack(fnv1a64(payload))


def decode_manifest(buf: bytes, schema: ArraySchema) -> ArrayVersion:
    hsize = struct.calcsize("<4sHIIQI")
    if len(buf) < hsize + 8:
        raise CorruptionError("manifest truncated")
    magic, fmt, number, parent, sdig, n = struct.unpack_from("<4sHIIQI", buf, 0)
    if magic != MANIFEST_MAGIC or fmt != FORMAT_VERSION:
        raise CorruptionError("not a manifest file")
    if sdig != schema.digest:
        raise CorruptionError("manifest was written for a different schema")
    payload = buf[hsize:-8]
    if fnv1a64(payload) != payload_digest(buf):
        raise CorruptionError(f"manifest digest mismatch (version {number})")
    manifest = {}
    pos = 0
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        body = payload[pos:pos + ln]
        pos += ln
        nord = body[0]
        ords = struct.unpack_from(f"<{nord}I", body, 1)
        q = 1 + 4 * nord
        (plen,) = struct.unpack_from("<H", body, q)
        q += 2
        path = bytes(body[q:q + plen]).decode("utf-8")
        (dig,) = _U64.unpack_from(body, q + plen)
        manifest[tuple(ords)] = ManifestEntry(path, dig)
    return ArrayVersion(number, parent or None, manifest)


# --------------------------------------------------------------------------
# store


def _write_file(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


@dataclass
class _ArrayState:
    schema: ArraySchema
    versions: list[ArrayVersion]


class ChunkStore:
    """Versioned chunk storage rooted at a directory.

    Parameters
    ----------
    root : path
        Directory holding ``chunks/`` and ``manifests/`` subtrees.
    run_jobs : callable, optional
        ``run_jobs(array, schema, jobs)`` executes a list of ``(ordinals, fn)`` and
        returns the results in order. The engine uses it to route chunk work
        to per-shard workers; by default jobs run inline.
    write_hook : callable, optional
        Called with the relative path before every chunk file write. Tests use
        it to inject latency or failures.
    """

    def __init__(self, root, *, run_jobs: Callable | None = None,
                 write_hook: Callable[[str], None] | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.run_jobs = run_jobs or (lambda array, schema, jobs: [fn() for _, fn in jobs])
        self.write_hook = write_hook
        self._arrays: dict[str, _ArrayState] = {}
        self._meta_lock = threading.Lock()
        self._read_total = 0
        self._count_lock = threading.Lock()

    # -- bookkeeping -------------------------------------------------------

    @property
    def chunk_reads(self) -> int:
        """Number of chunk files read so far (monotonic)."""
        return self._read_total

    def _state(self, array: str) -> _ArrayState:
        try:
            return self._arrays[array]
        except KeyError:
            raise NotFoundError(f"unknown array {array!r}") from None

    def schema(self, array: str) -> ArraySchema:
        return self._state(array).schema

    def arrays(self) -> list[str]:
        return sorted(self._arrays)

    def create(self, array: str, schema: ArraySchema) -> ArrayVersion:
        with self._meta_lock:
            if array in self._arrays:
                raise ValidationError(f"array {array!r} already exists in the store")
            v1 = ArrayVersion(1, None, {})
            self._arrays[array] = _ArrayState(schema, [])
        self._publish(array, v1)
        return v1

    def attach(self, array: str, schema: ArraySchema, numbers) -> None:
        """Register an existing array (after restart) by loading its manifests."""
        versions = []
        for n in numbers:
            buf = (self.root / self._manifest_path(array, n)).read_bytes()
            versions.append(decode_manifest(buf, schema))
        with self._meta_lock:
            self._arrays[array] = _ArrayState(schema, versions)

    def drop(self, array: str) -> None:
        """Forget an array. Its files stay until :meth:`gc`."""
        with self._meta_lock:
            self._arrays.pop(array, None)
        mdir = self.root / "manifests" / array
        if mdir.exists():
            for p in mdir.iterdir():
                p.unlink()
            mdir.rmdir()

    def list_versions(self, array: str) -> list[ArrayVersion]:
        return list(self._state(array).versions)

    def latest(self, array: str) -> ArrayVersion:
        return self._state(array).versions[-1]

    def get_version(self, array: str, number: int) -> ArrayVersion:
        for v in self._state(array).versions:
            if v.number == number:
                return v
        raise VersionError(f"array {array!r} has no version {number}")

    def resolve(self, array: str, version) -> ArrayVersion:
        if version is None:
            return self.latest(array)
        if isinstance(version, ArrayVersion):
            known = self.get_version(array, version.number)
            if known is not version and known.manifest != version.manifest:
                raise VersionError(f"version {version.number} does not belong to {array!r}")
            return known
        return self.get_version(array, int(version))

    @staticmethod
    def _manifest_path(array: str, number: int) -> str:
        return f"manifests/{array}/v{number:08d}.adbm"

    @staticmethod
    def _chunk_path(array: str, ords, number: int) -> str:
        return f"chunks/{array}/{'_'.join(map(str, ords))}.v{number}.adbc"

    def _publish(self, array: str, version: ArrayVersion) -> None:
        st = self._state(array)
        rel = self._manifest_path(array, version.number)
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_file(path, encode_manifest(version, st.schema))
        st.versions.append(version)

    # -- chunk I/O ---------------------------------------------------------

    def load_chunk(self, array: str, schema: ArraySchema, ords, entry: ManifestEntry) -> Chunk:
        try:
            buf = (self.root / entry.path).read_bytes()
        except FileNotFoundError:
            raise CorruptionError(f"chunk file {entry.path} missing") from None
        with self._count_lock:
            self._read_total += 1
        if payload_digest(buf) != entry.digest:
            raise CorruptionError(f"chunk {ords} digest differs from manifest")
        chunk = decode_chunk(buf, schema, array)
        if chunk.id.ordinals != tuple(ords):
            raise CorruptionError(f"chunk file {entry.path} holds chunk {chunk.id.ordinals}")
        return chunk

    def _store(self, array: str, schema: ArraySchema, chunk: Chunk, number: int) -> ManifestEntry:
        rel = self._chunk_path(array, chunk.id.ordinals, number)
        data = encode_chunk(chunk, schema)
        try:
            if self.write_hook is not None:
                self.write_hook(rel)
            path = self.root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            _write_file(path, data)
        except OSError as exc:
            raise StorageWriteError(f"failed writing chunk {chunk.id.ordinals}: {exc}") from exc
        return ManifestEntry(rel, payload_digest(data))

    def read_chunk(self, array: str, version, ordinals, include_halo: bool = False) -> Chunk:
        """Decode one chunk of ``version``; absent chunks come back empty."""
        st = self._state(array)
        v = self.resolve(array, version)
        ords = tuple(int(o) for o in ordinals)
        if len(ords) != st.schema.ndim or any(
                not 0 <= o < n for o, n in zip(ords, st.schema.chunk_grid)):
            raise ValidationError(f"chunk ordinals {ords} outside the chunk grid")
        entry = v.manifest.get(ords)
        if entry is None:
            return Chunk.empty(st.schema, ChunkId(array, ords)).with_encoding(SPARSE)
        chunk = self.load_chunk(array, st.schema, ords, entry)
        return chunk if include_halo else chunk.without_halo()

    # -- writes ------------------------------------------------------------

    def write_chunks(self, array: str, base, coords, values) -> ArrayVersion:
        """Apply a batch of cells on top of ``base`` and commit a new version.

        Duplicate coordinates within the batch resolve to the last occurrence.
        Neighbor halos are refreshed for cells within overlap distance of a
        chunk boundary. All-or-nothing: on any error no version is created.
        """
        st = self._state(array)
        schema = st.schema
        base = self.resolve(array, base)
        coords = as_coords(coords, schema.ndim)
        values = np.asarray(values, dtype=schema.attribute.dtype).reshape(-1)
        if len(values) != len(coords):
            raise ValidationError(f"{len(coords)} coordinates but {len(values)} values")
        extremes = check_coords(schema, coords)
        number = st.versions[-1].number + 1

        core_groups = _group_by_chunk(schema, coords, extremes)
        halo_groups = _halo_groups(schema, coords)
        touched = sorted(set(core_groups) | set(halo_groups))

        def job(ords):
            cid = ChunkId(array, ords)
            entry = base.manifest.get(ords)
            chunk = (self.load_chunk(array, schema, ords, entry) if entry is not None
                     else Chunk.empty(schema, cid))
            if ords in core_groups:
                idx = core_groups[ords]
                chunk = chunk.with_cells(chunk.coords_to_offsets(coords[idx]), values[idx])
            if ords in halo_groups:
                idx = halo_groups[ords]
                chunk = chunk.with_halo(coords[idx], values[idx])
            return self._store(array, schema, chunk.normalized(), number)

        entries = self.run_jobs(array, schema, [(o, (lambda o=o: job(o))) for o in touched])
        manifest = dict(base.manifest)
        manifest.update(zip(touched, entries))
        version = ArrayVersion(number, base.number, manifest)
        self._publish(array, version)
        return version

    def commit_manifest(self, array: str, manifest: Mapping, parent: int | None) -> ArrayVersion:
        st = self._state(array)
        version = ArrayVersion(st.versions[-1].number + 1, parent, manifest)
        self._publish(array, version)
        return version

    def merge_into(self, target: str, sources: list[tuple[str, ArrayVersion]]) -> ArrayVersion:
        """Commit the union of ``sources`` as a new version of ``target``.

        Earlier sources win on colliding coordinates. A chunk held by exactly
        one source is reused by reference (no decoding) unless its halo could
        see a neighbor contributed by a different source; only such chunks and
        genuinely colliding ones are decoded and rewritten.
        """
        st = self._state(target)
        schema = st.schema
        number = st.versions[-1].number + 1
        owners: dict[tuple, list[int]] = {}
        for i, (_, v) in enumerate(sources):
            for ords in v.manifest:
                owners.setdefault(ords, []).append(i)

        deltas = [d for d in itertools.product(*(
            (-1, 0, 1) if dim.overlap else (0,) for dim in schema.dimensions)) if any(d)]

        def neighbors(ords):
            for d in deltas:
                n = tuple(o + x for o, x in zip(ords, d))
                if n in owners:
                    yield n

        manifest: dict[tuple, ManifestEntry] = {}
        rebuild = []
        for ords, who in owners.items():
            if len(who) == 1 and all(owners[n] == who for n in neighbors(ords)):
                manifest[ords] = sources[who[0]][1].manifest[ords]
            else:
                rebuild.append(ords)

        cores: dict[tuple, Chunk] = {}

        def core_of(ords):
            if ords not in cores:
                merged = None
                for i in owners[ords]:
                    arr, v = sources[i]
                    c = self.load_chunk(arr, self.schema(arr), ords, v.manifest[ords])
                    c = Chunk(ChunkId(target, ords), c.origin, c.shape, c.dtype,
                              **({"data": c.data, "mask": c.mask} if c.encoding == DENSE
                                 else {"offsets": c.offsets, "values": c.values}))
                    if merged is None:
                        merged = c
                    else:
                        # earlier source wins: write the later cells first, then re-apply
                        off, vals = merged.core()
                        merged = c.with_cells(off, vals)
                cores[ords] = merged
            return cores[ords]

        def job(ords):
            chunk = core_of(ords)
            if deltas:
                lo = np.array([d.extended_bounds(k)[0] for d, k in zip(schema.dimensions, ords)])
                hi = np.array([d.extended_bounds(k)[1] for d, k in zip(schema.dimensions, ords)])
                hc, hv = [], []
                for n in neighbors(ords):
                    nc, nv = core_of(n).cells()
                    inside = np.all((nc >= lo) & (nc <= hi), axis=1)
                    hc.append(nc[inside])
                    hv.append(nv[inside])
                if hc:
                    chunk = chunk.with_halo(np.concatenate(hc), np.concatenate(hv))
            return self._store(target, schema, chunk.normalized(), number)

        # core_of caches across jobs, so rebuilt chunks are processed inline
        for ords in sorted(rebuild):
            manifest[ords] = job(ords)
        parent = st.versions[-1].number
        return self.commit_manifest(target, manifest, parent)

    # -- maintenance -------------------------------------------------------

    def referenced_paths(self) -> set[str]:
        refs = set()
        for st in list(self._arrays.values()):
            for v in st.versions:
                refs.update(e.path for e in v.manifest.values())
        return refs

    def gc(self) -> int:
        """Delete chunk files no live version references. Returns files removed."""
        refs = self.referenced_paths()
        removed = 0
        cdir = self.root / "chunks"
        if not cdir.exists():
            return 0
        for adir in cdir.iterdir():
            for p in adir.iterdir():
                rel = f"chunks/{adir.name}/{p.name}"
                if rel not in refs:
                    p.unlink()
                    removed += 1
            if not any(adir.iterdir()):
                adir.rmdir()
        return removed


def _group_by_chunk(schema: ArraySchema, coords: np.ndarray, extremes=None) -> dict[tuple, np.ndarray]:
    """Map chunk ordinals -> indices of ``coords`` in that chunk (original order kept)."""
    n = coords.shape[0]
    if n == 0:
        return {}
    lows = schema.lows
    lens = np.array([d.chunk_len for d in schema.dimensions], np.int64)
    if extremes is None:
        extremes = coords.min(axis=0), coords.max(axis=0)
    # ordinals are monotonic in the coordinate: equal at both extremes => one chunk
    omin, omax = (extremes[0] - lows) // lens, (extremes[1] - lows) // lens
    if np.array_equal(omin, omax):
        return {tuple(int(x) for x in omin): np.arange(n)}
    ords = (coords - lows) // lens
    grid = schema.chunk_grid
    lin = np.ravel_multi_index(tuple(ords.T), grid)
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    cuts = np.flatnonzero(np.diff(lin_sorted)) + 1
    out = {}
    for idx in np.split(order, cuts):
        out[tuple(int(x) for x in ords[idx[0]])] = idx
    return out


def _halo_groups(schema: ArraySchema, coords: np.ndarray) -> dict[tuple, np.ndarray]:
    """Map neighbor chunk ordinals -> indices of cells inside that chunk's halo."""
    dims = schema.dimensions
    if coords.shape[0] == 0 or not any(d.overlap for d in dims):
        return {}
    lows = schema.lows
    lens = np.array([d.chunk_len for d in dims], np.int64)
    rel = coords - lows
    ords, offs = rel // lens, rel % lens
    prev = np.zeros_like(ords, dtype=bool)
    nxt = np.zeros_like(ords, dtype=bool)
    for i, d in enumerate(dims):
        if d.overlap:
            prev[:, i] = (offs[:, i] < d.overlap) & (ords[:, i] > 0)
            nxt[:, i] = (offs[:, i] >= d.chunk_len - d.overlap) & (ords[:, i] + 1 < d.num_chunks)
    cand = np.flatnonzero(np.any(prev | nxt, axis=1))
    if len(cand) == 0:
        return {}
    pairs_ords, pairs_idx = [], []
    choices = [(-1, 0, 1) if d.overlap else (0,) for d in dims]
    for delta in itertools.product(*choices):
        if not any(delta):
            continue
        ok = np.ones(len(cand), dtype=bool)
        for i, x in enumerate(delta):
            if x == -1:
                ok &= prev[cand, i]
            elif x == 1:
                ok &= nxt[cand, i]
        sel = cand[ok]
        if len(sel):
            pairs_ords.append(ords[sel] + np.asarray(delta, np.int64))
            pairs_idx.append(sel)
    if not pairs_idx:
        return {}
    all_ords = np.concatenate(pairs_ords)
    all_idx = np.concatenate(pairs_idx)
    out: dict[tuple, list] = {}
    # keep original batch order inside each group so "last wins" still holds
    order = np.argsort(all_idx, kind="stable")
    for o, i in zip(map(tuple, all_ords[order].tolist()), all_idx[order]):
        out.setdefault(o, []).append(i)
    return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}
