import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arraydb.errors import OutOfBoundsError, SchemaParseError, ValidationError
from arraydb.schema import (
    ArraySchema,
    AttributeSpec,
    DimensionSpec,
    VALUE_TYPES,
    chunk_of,
    format_schema,
    halo_chunks,
    parse_schema,
)

VOL3D = "vol3d<val:uint8>[row=1:4096,4096,0,col=1:4096,4096,0,slice=1:1000,1,0]"


def test_parse_vol3d():
    name, s = parse_schema(VOL3D)
    assert name == "vol3d"
    assert s.attributes == (AttributeSpec("val", "uint8"),)
    assert s.dimensions == (
        DimensionSpec("row", 1, 4096, 4096, 0),
        DimensionSpec("col", 1, 4096, 4096, 0),
        DimensionSpec("slice", 1, 1000, 1, 0),
    )
    assert s.chunk_grid == (1, 1, 1000)


def test_parse_is_whitespace_insensitive():
    spaced = " vol3d < val : uint8 > [ row = 1 : 4096 , 4096 , 0 ,\n col=1:4096,4096,0, slice=1:1000,1,0 ] "
    assert parse_schema(spaced) == parse_schema(VOL3D)


def test_single_cell_schema():
    name, s = parse_schema("a<v:uint8>[x=1:1,1,0]")
    assert s.num_chunks == 1
    assert format_schema(s, name) == "a<v:uint8>[x=1:1,1,0]"


def test_overlap_not_below_chunk_len_rejected():
    with pytest.raises(ValidationError, match="x"):
        parse_schema("a<v:uint8>[x=1:100,100,200]")


@pytest.mark.parametrize(
    "text, offset",
    [
        ("a<v:uint8>[x=1:10,5,0", 21),       # missing ]
        ("a<v:uint9>[x=1:10,5,0]", 4),       # unknown type
        ("a<v:uint8>x=1:10,5,0]", 10),       # missing [
        ("a<v:uint8>[x=1:*,5,0]", 15),       # unbounded
        ("a<v:uint8>[x=1:10,5,0]]", 22),     # trailing junk
        ("a<v:uint8>[x=1:10;5,0]", 17),      # bad character
    ],
)
def test_parse_errors_carry_byte_offset(text, offset):
    with pytest.raises(SchemaParseError) as exc:
        parse_schema(text)
    assert exc.value.offset == offset


def test_empty_text_rejected():
    with pytest.raises(SchemaParseError):
        parse_schema("   ")


def test_validation_errors():
    with pytest.raises(ValidationError):
        parse_schema("a<v:uint8>[x=5:1,1,0]")
    with pytest.raises(ValidationError):
        parse_schema("a<v:uint8>[x=1:5,0,0]")
    with pytest.raises(ValidationError, match="duplicate"):
        parse_schema("a<v:uint8>[x=1:5,1,0,x=1:5,1,0]")
    with pytest.raises(ValidationError, match="duplicate"):
        parse_schema("a<v:uint8,v:int64>[x=1:5,1,0]")
    with pytest.raises(ValidationError, match="2\\^32"):
        parse_schema("a<v:uint8>[x=0:4294967296,10,0]")
    assert parse_schema("a<v:uint8>[x=0:4294967295,10,0]")[1].shape == (2**32,)


def test_roundtrip_vol3d():
    name, s = parse_schema(VOL3D)
    assert format_schema(s, name) == VOL3D
    assert parse_schema(format_schema(s, name)) == (name, s)


idents = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,6}", fullmatch=True)


@st.composite
def dims(draw):
    lo = draw(st.integers(-1000, 1000))
    hi = lo + draw(st.integers(0, 5000))
    chunk = draw(st.integers(1, 600))
    overlap = draw(st.integers(0, chunk - 1))
    return lo, hi, chunk, overlap


@st.composite
def schemas(draw):
    anames = draw(st.lists(idents, min_size=1, max_size=3, unique=True))
    dnames = draw(st.lists(idents, min_size=1, max_size=4, unique=True))
    attrs = tuple(AttributeSpec(n, draw(st.sampled_from(VALUE_TYPES))) for n in anames)
    ds = tuple(DimensionSpec(n, *draw(dims())) for n in dnames)
    return draw(idents), ArraySchema(attrs, ds)


@given(schemas())
def test_roundtrip_random(named):
    name, s = named
    assert parse_schema(format_schema(s, name)) == (name, s)


def test_chunk_of_examples():
    _, s = parse_schema(VOL3D)
    row, _, sl = s.dimensions
    assert chunk_of(row, 4096) == (0, 4095)
    assert chunk_of(sl, 15) == (14, 0)
    x = DimensionSpec("x", 1, 1000, 100, 10)
    assert chunk_of(x, 105) == (1, 4)
    with pytest.raises(OutOfBoundsError, match="x"):
        chunk_of(x, 1001)


def brute_halo(dim, coord):
    """Chunks whose extended region contains coord, by enumerating every region."""
    out = set()
    for k in range(dim.num_chunks):
        start = dim.lo + k * dim.chunk_len
        lo = max(dim.lo, start - dim.overlap)
        hi = min(dim.hi, start + dim.chunk_len - 1 + dim.overlap)
        if lo <= coord <= hi:
            out.add(k)
    return out


def test_halo_examples():
    x = DimensionSpec("x", 1, 1000, 100, 10)
    # frozen from brute_halo
    assert brute_halo(x, 105) == {0, 1}
    assert brute_halo(x, 150) == {1}
    assert halo_chunks(x, 105) == {0, 1}
    assert halo_chunks(x, 150) == {1}
    assert halo_chunks(DimensionSpec("y", 1, 1000, 100, 0), 100) == {0}
    with pytest.raises(OutOfBoundsError):
        halo_chunks(x, 0)


@settings(max_examples=60)
@given(dims())
def test_partition_and_halo_properties(d):
    dim = DimensionSpec("x", *d)
    if dim.extent > 2_000:
        dim = DimensionSpec("x", dim.lo, dim.lo + 1999, dim.chunk_len, dim.overlap)
    seen = {}
    for c in range(dim.lo, dim.hi + 1):
        k, off = chunk_of(dim, c)
        assert 0 <= off < dim.chunk_len
        a, b = dim.chunk_bounds(k)
        assert a <= c <= b
        seen.setdefault(k, []).append(c)
        assert halo_chunks(dim, c) == brute_halo(dim, c)
    # primary regions tile [lo, hi] without overlap
    tiles = sorted(itertools.chain.from_iterable(seen.values()))
    assert tiles == list(range(dim.lo, dim.hi + 1))
    assert sorted(seen) == list(range(dim.num_chunks))


@settings(max_examples=30)
@given(st.lists(dims(), min_size=1, max_size=3), st.data())
def test_replication_bound(ds, data):
    # at most 2^d chunks per cell when the halo is at most half a chunk
    dims_ = [DimensionSpec(f"d{i}", lo, hi, ch, min(ov, ch // 2)) for i, (lo, hi, ch, ov) in enumerate(ds)]
    coord = [data.draw(st.integers(d.lo, d.hi)) for d in dims_]
    total = 1
    for d, c in zip(dims_, coord):
        total *= len(halo_chunks(d, c))
    assert total <= 2 ** len(dims_)
