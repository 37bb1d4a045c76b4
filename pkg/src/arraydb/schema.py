"""Array schemas: parsing, formatting and chunk-grid arithmetic.

Grammar::

    NAME '<' attr (',' attr)* '>' '[' dim (',' dim)* ']'
    attr := IDENT ':' TYPE
    dim  := IDENT '=' INT ':' INT ',' INT ',' INT     # name=lo:hi,chunk_len,overlap

Whitespace between tokens is ignored. Every dimension is bounded; coordinates
are inclusive on both ends and all arithmetic is relative to ``lo``.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from arraydb.digest import fnv1a64
from arraydb.errors import OutOfBoundsError, SchemaParseError, ValidationError

VALUE_TYPES = ("uint8", "int64", "float64", "utf8-string")

_NUMPY_DTYPES = {
    "uint8": np.dtype("<u1"),
    "int64": np.dtype("<i8"),
    "float64": np.dtype("<f8"),
    "utf8-string": np.dtype(object),
}

_ZERO = {"uint8": 0, "int64": 0, "float64": 0.0, "utf8-string": ""}


@dataclass(frozen=True)
class DimensionSpec:
    name: str
    lo: int
    hi: int
    chunk_len: int
    overlap: int = 0

    def __post_init__(self):
        if not _IDENT.fullmatch(self.name):
            raise ValidationError(f"dimension name {self.name!r} is not an identifier")
        if self.lo > self.hi:
            raise ValidationError(f"dimension {self.name}: lo {self.lo} > hi {self.hi}")
        if self.hi - self.lo >= 2**32:
            # chunk files store lo-relative coordinates as u32
            raise ValidationError(f"dimension {self.name}: extent exceeds 2^32 cells")
        if self.chunk_len < 1:
            raise ValidationError(f"dimension {self.name}: chunk_len must be >= 1")
        if self.overlap < 0:
            raise ValidationError(f"dimension {self.name}: overlap must be >= 0")
        if self.overlap >= self.chunk_len:
            raise ValidationError(
                f"dimension {self.name}: overlap {self.overlap} >= chunk_len {self.chunk_len}"
            )

    @property
    def extent(self) -> int:
        return self.hi - self.lo + 1

    @property
    def num_chunks(self) -> int:
        return -(-self.extent // self.chunk_len)

    def chunk_bounds(self, ordinal: int) -> tuple[int, int]:
        """Inclusive core coordinate range of chunk ``ordinal`` (clipped to hi)."""
        start = self.lo + ordinal * self.chunk_len
        return start, min(self.hi, start + self.chunk_len - 1)

    def extended_bounds(self, ordinal: int) -> tuple[int, int]:
        """Core range widened by the overlap on both sides, clipped to [lo, hi]."""
        start, stop = self.chunk_bounds(ordinal)
        return max(self.lo, start - self.overlap), min(self.hi, stop + self.overlap)

    def check(self, coord: int) -> None:
        if not self.lo <= coord <= self.hi:
            raise OutOfBoundsError(
                f"coordinate {coord} out of bounds for dimension {self.name} "
                f"[{self.lo}, {self.hi}]"
            )


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    value_type: str

    def __post_init__(self):
        if not _IDENT.fullmatch(self.name):
            raise ValidationError(f"attribute name {self.name!r} is not an identifier")
        if self.value_type not in VALUE_TYPES:
            raise ValidationError(
                f"attribute {self.name}: unknown type {self.value_type!r}, "
                f"expected one of {', '.join(VALUE_TYPES)}"
            )

    @property
    def dtype(self) -> np.dtype:
        return _NUMPY_DTYPES[self.value_type]

    @property
    def zero(self):
        return _ZERO[self.value_type]


@dataclass(frozen=True)
class ArraySchema:
    attributes: tuple[AttributeSpec, ...]
    dimensions: tuple[DimensionSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        if not self.attributes:
            raise ValidationError("schema needs at least one attribute")
        if not self.dimensions:
            raise ValidationError("schema needs at least one dimension")
        _unique([a.name for a in self.attributes], "attribute")
        _unique([d.name for d in self.dimensions], "dimension")

    @property
    def ndim(self) -> int:
        return len(self.dimensions)

    @property
    def attribute(self) -> AttributeSpec:
        """The stored attribute. Only the first one is materialized by the engine."""
        return self.attributes[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(d.extent for d in self.dimensions)

    @property
    def lows(self) -> np.ndarray:
        return np.array([d.lo for d in self.dimensions], dtype=np.int64)

    @property
    def highs(self) -> np.ndarray:
        return np.array([d.hi for d in self.dimensions], dtype=np.int64)

    @property
    def chunk_grid(self) -> tuple[int, ...]:
        return tuple(d.num_chunks for d in self.dimensions)

    @property
    def num_chunks(self) -> int:
        return math.prod(self.chunk_grid)

    def chunk_shape(self, ordinals) -> tuple[int, ...]:
        """Clipped core extents of one chunk."""
        out = []
        for d, k in zip(self.dimensions, ordinals):
            a, b = d.chunk_bounds(k)
            out.append(b - a + 1)
        return tuple(out)

    def chunk_origin(self, ordinals) -> tuple[int, ...]:
        return tuple(d.chunk_bounds(k)[0] for d, k in zip(self.dimensions, ordinals))

    def chunk_ordinals(self):
        """Iterate over every chunk ordinal tuple in row-major order."""
        return itertools.product(*(range(n) for n in self.chunk_grid))

    @cached_property
    def digest(self) -> int:
        return fnv1a64(format_schema(self, "_").encode())


_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_TOKEN = re.compile(r"\s*(?:(?P<int>[+-]?\d+)|(?P<ident>[A-Za-z_][A-Za-z0-9_\-]*)|(?P<punct>[<>\[\]:,=*]))")


def _unique(names, what):
    seen = set()
    for n in names:
        if n in seen:
            raise ValidationError(f"duplicate {what} name {n!r}")
        seen.add(n)


class _Lexer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.tokens: list[tuple[str, str, int]] = []
        while True:
            m = _TOKEN.match(text, self.pos)
            if m is None:
                rest = text[self.pos:]
                if rest.strip():
                    off = self.pos + len(rest) - len(rest.lstrip())
                    raise SchemaParseError(f"unexpected character {text[off]!r}", _byte(text, off))
                break
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind), m.start(kind)))
            self.pos = m.end()
        self.tokens.append(("eof", "", len(text)))
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind, value=None):
        tok = self.tokens[self.i]
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = repr(value) if value is not None else kind
            got = repr(tok[1]) if tok[0] != "eof" else "end of input"
            raise SchemaParseError(f"expected {want}, got {got}", _byte(self.text, tok[2]))
        self.i += 1
        return tok


def _byte(text: str, char_offset: int) -> int:
    return len(text[:char_offset].encode("utf-8"))


def parse_schema(text: str) -> tuple[str, ArraySchema]:
    """Parse ``name<attr:type,...>[dim=lo:hi,chunk,overlap,...]``.

    Returns
    -------
    name, schema : tuple
        The array name and the validated schema.

    Raises
    ------
    SchemaParseError
        Malformed text; carries the byte offset of the offending token.
    ValidationError
        Well-formed text that violates a schema invariant.
    """
    if not text or not text.strip():
        raise SchemaParseError("empty schema", 0)
    lx = _Lexer(text)
    name = lx.take("ident")[1]
    if not _IDENT.fullmatch(name):
        raise SchemaParseError(f"bad array name {name!r}", 0)
    lx.take("punct", "<")
    attrs = []
    while True:
        aname = lx.take("ident")[1]
        lx.take("punct", ":")
        kind, tname, off = lx.take("ident")
        if tname not in VALUE_TYPES:
            raise SchemaParseError(f"unknown value type {tname!r}", _byte(text, off))
        attrs.append(AttributeSpec(aname, tname))
        if lx.peek()[1] == ",":
            lx.take("punct", ",")
            continue
        lx.take("punct", ">")
        break
    lx.take("punct", "[")
    dims = []
    while True:
        dname = lx.take("ident")[1]
        lx.take("punct", "=")
        lo = lx.peek()
        if lo[1] == "*":
            raise SchemaParseError("unbounded dimensions are not supported", _byte(text, lo[2]))
        lo = int(lx.take("int")[1])
        lx.take("punct", ":")
        hi_tok = lx.peek()
        if hi_tok[1] == "*":
            raise SchemaParseError("unbounded dimensions are not supported", _byte(text, hi_tok[2]))
        hi = int(lx.take("int")[1])
        lx.take("punct", ",")
        chunk = int(lx.take("int")[1])
        lx.take("punct", ",")
        overlap = int(lx.take("int")[1])
        dims.append(DimensionSpec(dname, lo, hi, chunk, overlap))
        if lx.peek()[1] == ",":
            lx.take("punct", ",")
            continue
        lx.take("punct", "]")
        break
    lx.take("eof")
    return name, ArraySchema(tuple(attrs), tuple(dims))


def format_schema(schema: ArraySchema, name: str) -> str:
    attrs = ",".join(f"{a.name}:{a.value_type}" for a in schema.attributes)
    dims = ",".join(
        f"{d.name}={d.lo}:{d.hi},{d.chunk_len},{d.overlap}" for d in schema.dimensions
    )
    return f"{name}<{attrs}>[{dims}]"


def chunk_of(dim: DimensionSpec, coord: int) -> tuple[int, int]:
    """Return ``(chunk ordinal, offset within chunk)`` for one coordinate."""
    dim.check(coord)
    return divmod(coord - dim.lo, dim.chunk_len)


def halo_chunks(dim: DimensionSpec, coord: int) -> set[int]:
    """Primary chunk of ``coord`` plus every neighbor whose halo contains it."""
    ordinal, offset = chunk_of(dim, coord)
    out = {ordinal}
    if dim.overlap:
        if offset < dim.overlap and ordinal > 0:
            out.add(ordinal - 1)
        if offset >= dim.chunk_len - dim.overlap and ordinal + 1 < dim.num_chunks:
            out.add(ordinal + 1)
    return out


def check_coords(schema: ArraySchema, coords: np.ndarray):
    """Raise OutOfBoundsError naming the first offending dimension/coordinate.

    Returns the per-dimension ``(mins, maxs)`` of the batch, or None if empty.
    """
    if coords.shape[0] == 0:
        return None
    mins, maxs = coords.min(axis=0), coords.max(axis=0)
    for i, d in enumerate(schema.dimensions):
        if mins[i] < d.lo:
            d.check(int(mins[i]))
        if maxs[i] > d.hi:
            d.check(int(maxs[i]))
    return mins, maxs


def as_coords(coords, ndim: int) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.int64)
    if arr.size == 0:
        return np.empty((0, ndim), dtype=np.int64)
    if arr.ndim == 1 and ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != ndim:
        raise ValidationError(f"expected coordinates of shape (n, {ndim}), got {arr.shape}")
    return arr
