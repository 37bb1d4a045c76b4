import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arraydb.chunkstore import (
    DENSE,
    SPARSE,
    ArrayVersion,
    Chunk,
    ChunkId,
    ChunkStore,
    ManifestEntry,
    decode_chunk,
    decode_manifest,
    encode_chunk,
    encode_manifest,
)
from arraydb.errors import (
    CorruptionError,
    NotFoundError,
    OutOfBoundsError,
    StorageWriteError,
    VersionError,
)
from arraydb.schema import parse_schema

X200 = parse_schema("x<v:int64>[x=1:200,100,10]")[1]


def small_vol():
    return parse_schema("vol3d<val:uint8>[row=1:64,64,0,col=1:64,64,0,slice=1:20,1,0]")[1]


@pytest.fixture
def store(tmp_path):
    return ChunkStore(tmp_path)


def all_cells(store, array, version=None):
    v = store.resolve(array, version)
    out = {}
    for ords in v.manifest:
        c, vals = store.read_chunk(array, v, ords).cells()
        out.update(zip(map(tuple, c.tolist()), vals.tolist()))
    return out


# -- encoding ---------------------------------------------------------------


SCHEMAS = {
    "uint8": "a<v:uint8>[i=-3:10,5,1,j=1:7,4,0]",
    "int64": "a<v:int64>[i=-3:10,5,1,j=1:7,4,0]",
    "float64": "a<v:float64>[i=-3:10,5,1,j=1:7,4,0]",
    "utf8-string": "a<v:utf8-string>[i=-3:10,5,1,j=1:7,4,0]",
}


def _values(vt, draw, n):
    if vt == "uint8":
        return np.array(draw(st.lists(st.integers(0, 255), min_size=n, max_size=n)), np.uint8)
    if vt == "int64":
        return np.array(draw(st.lists(st.integers(-2**63, 2**63 - 1), min_size=n, max_size=n)), np.int64)
    if vt == "float64":
        return np.array(draw(st.lists(st.floats(allow_nan=False), min_size=n, max_size=n)), np.float64)
    return np.array(draw(st.lists(st.text(max_size=5), min_size=n, max_size=n)), dtype=object)


@st.composite
def random_chunks(draw):
    vt = draw(st.sampled_from(sorted(SCHEMAS)))
    _, schema = parse_schema(SCHEMAS[vt])
    ords = tuple(draw(st.integers(0, n - 1)) for n in schema.chunk_grid)
    chunk = Chunk.empty(schema, ChunkId("a", ords))
    cap = chunk.capacity
    offs = np.array(sorted(draw(st.sets(st.integers(0, cap - 1), max_size=cap))), np.int64)
    chunk = chunk.with_cells(offs, _values(vt, draw, len(offs)))
    # halo: any coordinate in the extended-but-not-core region
    ext = [range(d.extended_bounds(k)[0], d.extended_bounds(k)[1] + 1)
           for d, k in zip(schema.dimensions, ords)]
    core = [range(d.chunk_bounds(k)[0], d.chunk_bounds(k)[1] + 1)
            for d, k in zip(schema.dimensions, ords)]
    ring = [p for p in itertools.product(*ext) if not all(x in r for x, r in zip(p, core))]
    if ring:
        pick = draw(st.lists(st.sampled_from(ring), unique=True, max_size=len(ring)))
        if pick:
            chunk = chunk.with_halo(np.array(pick, np.int64), _values(vt, draw, len(pick)))
    encoding = draw(st.sampled_from([DENSE, SPARSE]))
    return schema, chunk.with_encoding(encoding)


@settings(max_examples=150)
@given(random_chunks())
def test_encode_decode_roundtrip(sc):
    schema, chunk = sc
    buf = encode_chunk(chunk, schema)
    back = decode_chunk(buf, schema, "a")
    assert back.encoding == chunk.encoding
    assert back.id == chunk.id
    assert back.same_cells(chunk)
    assert encode_chunk(back, schema) == buf


@settings(max_examples=80)
@given(random_chunks())
def test_encoding_choice_is_invisible(sc):
    _, chunk = sc
    dense = chunk.with_encoding(DENSE)
    sparse = dense.with_encoding(SPARSE)
    for a, b in [(chunk, dense), (dense, sparse)]:
        ca, va = a.cells(include_halo=True)
        cb, vb = b.cells(include_halo=True)
        assert np.array_equal(ca, cb) and np.array_equal(va, vb)
    assert sparse.same_cells(chunk.with_encoding(SPARSE))


def test_header_layout():
    _, schema = parse_schema("a<v:uint8>[i=1:4,4,0]")
    chunk = Chunk.empty(schema, ChunkId("a", (0,))).with_cells(np.array([1]), np.array([7]))
    buf = encode_chunk(chunk, schema)
    assert buf[:4] == b"ADBC"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert int.from_bytes(buf[6:14], "little") == schema.digest
    assert buf[14] == 1  # one ordinal
    assert int.from_bytes(buf[15:19], "little") == 0
    assert buf[19] == SPARSE
    assert int.from_bytes(buf[20:28], "little") == 1
    assert int.from_bytes(buf[28:36], "little") == 0
    # one record: u32 coordinate relative to lo, then the byte value
    assert buf[36:41] == (1).to_bytes(4, "little") + bytes([7])
    assert len(buf) == 41 + 8


def test_density_rule():
    _, schema = parse_schema("a<v:uint8>[i=1:10,10,0]")
    c = Chunk.empty(schema, ChunkId("a", (0,)))
    assert c.with_cells(np.arange(5), np.ones(5)).encoding == SPARSE
    assert c.with_cells(np.arange(6), np.ones(6)).encoding == DENSE


def test_manifest_roundtrip():
    schema = small_vol()
    v = ArrayVersion(3, 2, {(0, 0, k): ManifestEntry(f"chunks/x/0_0_{k}.v3.adbc", k * 977)
                            for k in range(5)})
    buf = encode_manifest(v, schema)
    assert buf[:4] == b"ADBM"
    assert decode_manifest(buf, schema) == v
    bad = bytearray(buf)
    bad[40] ^= 0xFF
    with pytest.raises(CorruptionError):
        decode_manifest(bytes(bad), schema)


# -- store ------------------------------------------------------------------


def test_new_array_has_one_empty_version(store):
    store.create("a", X200)
    (v,) = store.list_versions("a")
    assert v.number == 1 and not v.manifest and v.parent is None
    with pytest.raises(NotFoundError):
        store.list_versions("nope")


def test_empty_batch_still_versions(store):
    store.create("a", X200)
    v2 = store.write_chunks("a", None, [[5]], [1])
    v3 = store.write_chunks("a", v2, np.empty((0, 1)), [])
    assert v3.number == 3 and v3.parent == 2
    assert v3.manifest == v2.manifest


def test_single_slice_touches_one_chunk(tmp_path):
    # one full slice of a vol3d-shaped schema lands in ordinals (0, 0, 14)
    _, schema = parse_schema("vol3d<val:uint8>[row=1:256,256,0,col=1:256,256,0,slice=1:20,1,0]")
    store = ChunkStore(tmp_path)
    store.create("vol3d", schema)
    r, c = np.meshgrid(np.arange(1, 257), np.arange(1, 257), indexing="ij")
    coords = np.stack([r.ravel(), c.ravel(), np.full(r.size, 15)], axis=1)
    v = store.write_chunks("vol3d", None, coords, np.arange(r.size) % 256)
    assert list(v.manifest) == [(0, 0, 14)]
    chunk = store.read_chunk("vol3d", v, (0, 0, 14))
    assert chunk.cell_count == 256 * 256 and chunk.encoding == DENSE


def test_halo_write_and_read(store):
    store.create("x", X200)
    v = store.write_chunks("x", None, [[95]], [42])
    assert sorted(v.manifest) == [(0,), (1,)]
    c0 = store.read_chunk("x", v, (0,))
    assert c0.cells()[0].tolist() == [[95]]
    c1 = store.read_chunk("x", v, (1,), include_halo=True)
    assert c1.cell_count == 0
    before = store.chunk_reads
    c1 = store.read_chunk("x", v, (1,), include_halo=True)
    assert store.chunk_reads - before == 1
    coords, vals = c1.cells(include_halo=True)
    assert coords.tolist() == [[95]] and vals.tolist() == [42]
    assert store.read_chunk("x", v, (1,)).cells(include_halo=True)[0].shape == (0, 1)


def test_never_written_chunk_reads_empty(store):
    store.create("x", X200)
    c = store.read_chunk("x", None, (1,))
    assert c.cell_count == 0 and c.encoding == SPARSE


def test_out_of_bounds_creates_no_version(store):
    store.create("x", X200)
    with pytest.raises(OutOfBoundsError, match="x"):
        store.write_chunks("x", None, [[5], [201]], [1, 2])
    assert len(store.list_versions("x")) == 1


def test_write_failure_creates_no_version(tmp_path):
    def hook(rel):
        if rel.startswith("chunks/x/1"):
            raise OSError("disk full")

    store = ChunkStore(tmp_path, write_hook=hook)
    store.create("x", X200)
    with pytest.raises(StorageWriteError):
        store.write_chunks("x", None, [[5], [150]], [1, 2])
    assert len(store.list_versions("x")) == 1


def test_duplicate_in_batch_last_wins(store):
    store.create("x", X200)
    v = store.write_chunks("x", None, [[7], [8], [7]], [1, 2, 3])
    assert all_cells(store, "x", v) == {(7,): 3, (8,): 2}


def test_versions_are_snapshots(store):
    store.create("x", X200)
    rng = np.random.default_rng(5)
    snaps = []
    for _ in range(6):
        coords = rng.integers(1, 201, size=(30, 1))
        store.write_chunks("x", None, coords, rng.integers(-9, 9, size=30))
        snaps.append(all_cells(store, "x"))
    versions = store.list_versions("x")
    assert [v.number for v in versions] == list(range(1, 8))
    for v, expected in zip(versions[1:], snaps):
        assert all_cells(store, "x", v) == expected


def test_copy_on_write_keeps_base_digests(store):
    store.create("x", X200)
    v2 = store.write_chunks("x", None, [[10], [150]], [1, 2])
    v3 = store.write_chunks("x", v2, [[11]], [5])
    assert v3.manifest[(1,)] == v2.manifest[(1,)]      # untouched, shared
    assert v3.manifest[(0,)] != v2.manifest[(0,)]
    assert (store.root / v2.manifest[(0,)].path).exists()
    assert store.get_version("x", 2).manifest == v2.manifest


def test_unknown_version(store):
    store.create("x", X200)
    with pytest.raises(VersionError):
        store.read_chunk("x", 9, (0,))


def test_corruption_detected(store):
    store.create("x", X200)
    v = store.write_chunks("x", None, [[10], [20]], [1, 2])
    path = store.root / v.manifest[(0,)].path
    buf = bytearray(path.read_bytes())
    buf[-9] ^= 0x01   # last payload byte
    path.write_bytes(bytes(buf))
    with pytest.raises(CorruptionError):
        store.read_chunk("x", v, (0,))


def test_gc_only_removes_unreferenced(store):
    store.create("x", X200)
    store.create("y", X200)
    store.write_chunks("x", None, [[10]], [1])
    vy = store.write_chunks("y", None, [[10]], [1])
    assert store.gc() == 0
    store.drop("x")
    assert store.gc() == 1
    assert (store.root / vy.manifest[(0,)].path).exists()


def test_halo_coherence_full_scan(tmp_path):
    _, schema = parse_schema("h<v:int64>[i=1:40,8,3,j=-5:30,7,2]")
    store = ChunkStore(tmp_path)
    store.create("h", schema)
    rng = np.random.default_rng(11)
    for _ in range(5):
        n = int(rng.integers(1, 400))
        coords = np.stack([rng.integers(1, 41, n), rng.integers(-5, 31, n)], axis=1)
        store.write_chunks("h", None, coords, rng.integers(0, 1000, n))
    for v in store.list_versions("h"):
        core = all_cells(store, "h", v)
        for ords in v.manifest:
            c = store.read_chunk("h", v, ords, include_halo=True)
            ext = [d.extended_bounds(k) for d, k in zip(schema.dimensions, ords)]
            for coord, val in zip(c.halo_coords.tolist(), c.halo_values.tolist()):
                assert core[tuple(coord)] == val
            # and every core cell in the halo region is present
            expected = {k for k in core
                        if all(a <= x <= b for x, (a, b) in zip(k, ext))
                        and tuple(ords) != tuple((x - d.lo) // d.chunk_len
                                                 for x, d in zip(k, schema.dimensions))}
            assert {tuple(p) for p in c.halo_coords.tolist()} == expected


def test_merge_into_prefers_earlier_source(store):
    for name in ("a", "b", "t"):
        store.create(name, X200)
    va = store.write_chunks("a", None, [[5], [150]], [1, 2])
    vb = store.write_chunks("b", None, [[5], [60]], [9, 8])
    vt = store.merge_into("t", [("a", va), ("b", vb)])
    assert all_cells(store, "t", vt) == {(5,): 1, (60,): 8, (150,): 2}
    vt2 = store.merge_into("t", [("b", vb), ("a", va)])
    assert all_cells(store, "t", vt2)[(5,)] == 9
