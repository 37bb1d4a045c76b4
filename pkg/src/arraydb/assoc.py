"""Associative arrays: labeled sparse matrices that double as triple stores.

An :class:`AssocArray` maps (row key, column key) pairs to values. Keys are
strings or integers, kept sorted and unique per axis; string order is raw
code-point (equivalently UTF-8 byte) order. Values are either all numeric or
all strings. Every operation returns a new AssocArray whose key lists hold
only keys that still have entries.

>>> A = AssocArray.from_triples([("alice", "bob", 47.0), ("alice", "carl", 1.0)])
>>> A["al*", :].to_triples()
[('alice', 'bob', 47.0), ('alice', 'carl', 1.0)]
"""

from __future__ import annotations

import bisect
import io
import numbers
import operator
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from arraydb.engine import CellBox, Engine
from arraydb.errors import OutOfBoundsError, ValidationError

_COMPARE = {
    "==": operator.eq, "!=": operator.ne,
    "<": operator.lt, "<=": operator.le,
    ">": operator.gt, ">=": operator.ge,
}


def _is_number(v) -> bool:
    return isinstance(v, (numbers.Number, np.number)) and not isinstance(v, (bool, np.bool_))


def _check_keys(keys, axis):
    kinds = {isinstance(k, str) for k in keys}
    if len(kinds) > 1:
        raise TypeError(f"{axis} keys mix strings and integers")
    for k in keys:
        if not isinstance(k, (str, numbers.Integral)) or isinstance(k, bool):
            raise TypeError(f"{axis} key {k!r} is neither a string nor an integer")


@dataclass(frozen=True)
class KeySelector:
    """Selects keys along one axis.

    Forms: ``all``; ``keys`` (one or more exact keys); ``prefix`` (keys
    starting with a string, written ``'al*'``); ``range`` (inclusive lexical
    range, ``'alice : bob'``); ``positions`` (1-based inclusive positions in
    the sorted key list).
    """

    kind: str
    keys: tuple = ()
    low: object = None
    high: object = None

    @classmethod
    def all(cls):
        return cls("all")

    @classmethod
    def of(cls, *keys):
        return cls("keys", tuple(keys))

    @classmethod
    def prefix(cls, p: str):
        return cls("prefix", low=p)

    @classmethod
    def between(cls, low, high):
        if low > high:
            raise ValidationError(f"key range {low!r} : {high!r} is empty (low > high)")
        return cls("range", low=low, high=high)

    @classmethod
    def positions(cls, i: int, j: int):
        if i < 1 or j < i:
            raise OutOfBoundsError(f"positional range {i}:{j} is invalid")
        return cls("positions", low=i, high=j)

    @classmethod
    def parse(cls, spec) -> KeySelector:
        """Build a selector from the string shorthand.

        ``':'`` all, ``'alice'`` one key, ``'alice bob'`` several keys,
        ``'al*'`` prefix, ``'alice : bob'`` lexical range. Integers and lists
        select exact keys; a :class:`range` holds 1-based positions, so
        ``range(1, 3)`` selects the first two keys.
        """
        if isinstance(spec, KeySelector):
            return spec
        if isinstance(spec, slice):
            if spec == slice(None):
                return cls.all()
            raise ValidationError("use KeySelector.positions for positional ranges")
        if isinstance(spec, range):
            if spec.step != 1 or not spec:
                raise ValidationError(f"positional range {spec} must be non-empty with step 1")
            return cls.positions(spec.start, spec.stop - 1)
        if isinstance(spec, str):
            s = spec.strip()
            if s == ":":
                return cls.all()
            if ":" in s:
                lo, hi = (p.strip() for p in s.split(":", 1))
                return cls.between(lo, hi)
            parts = s.split()
            if len(parts) == 1 and parts[0].endswith("*"):
                return cls.prefix(parts[0][:-1])
            return cls.of(*parts)
        if isinstance(spec, (list, tuple)):
            return cls.of(*spec)
        return cls.of(spec)

    def indices(self, keys: Sequence) -> list[int]:
        """Positions in sorted ``keys`` selected by this selector."""
        n = len(keys)
        if self.kind == "all":
            return list(range(n))
        if self.kind == "keys":
            out = []
            for k in self.keys:
                i = bisect.bisect_left(keys, k) if _comparable(keys, k) else n
                if i < n and keys[i] == k:
                    out.append(i)
            return sorted(set(out))
        if self.kind == "prefix":
            if n and not isinstance(keys[0], str):
                raise TypeError("prefix selectors need string keys")
            i = bisect.bisect_left(keys, self.low)
            out = []
            while i < n and keys[i].startswith(self.low):
                out.append(i)
                i += 1
            return out
        if self.kind == "range":
            if not _comparable(keys, self.low):
                return []
            return list(range(bisect.bisect_left(keys, self.low),
                              bisect.bisect_right(keys, self.high)))
        if self.kind == "positions":
            if self.high > n:
                raise OutOfBoundsError(f"position {self.high} exceeds key count {n}")
            return list(range(self.low - 1, self.high))
        raise ValidationError(f"unknown selector kind {self.kind!r}")


def _comparable(keys, k) -> bool:
    return not keys or isinstance(keys[0], str) == isinstance(k, str)


class AssocArray:
    """Immutable sparse associative array.

    Build one with :meth:`from_triples`. Entries are held as parallel arrays
    of row index, column index and value, sorted row-major.
    """

    __slots__ = ("rows", "cols", "_r", "_c", "_v", "kind")

    def __init__(self, rows, cols, r, c, v, kind):
        self.rows = tuple(rows)
        self.cols = tuple(cols)
        self._r, self._c, self._v = r, c, v
        self.kind = kind  # "numeric" or "string"

    # -- construction ------------------------------------------------------

    @classmethod
    def from_triples(cls, triples: Iterable[tuple]) -> AssocArray:
        """Build from ``(row, col, value)`` triples.

        Duplicate (row, col) pairs collapse: numeric values are summed,
        string values keep the last occurrence.
        """
        triples = list(triples)
        if not triples:
            return cls.empty()
        vals = [t[2] for t in triples]
        if all(isinstance(v, str) for v in vals):
            kind = "string"
        elif all(_is_number(v) for v in vals):
            kind = "numeric"
        else:
            raise TypeError("triples mix string and numeric values")
        rk = [t[0] for t in triples]
        ck = [t[1] for t in triples]
        _check_keys(rk, "row")
        _check_keys(ck, "column")
        rows = sorted(set(rk))
        cols = sorted(set(ck))
        rpos = {k: i for i, k in enumerate(rows)}
        cpos = {k: i for i, k in enumerate(cols)}
        r = np.fromiter((rpos[k] for k in rk), np.int64, len(rk))
        c = np.fromiter((cpos[k] for k in ck), np.int64, len(ck))
        if kind == "numeric":
            is_int = all(isinstance(v, (numbers.Integral, np.integer)) for v in vals)
            v = np.asarray(vals, dtype=np.int64 if is_int else np.float64)
            lin = r * len(cols) + c
            uniq, inv = np.unique(lin, return_inverse=True)
            acc = np.zeros(len(uniq), dtype=v.dtype)
            np.add.at(acc, inv, v)
            return cls(rows, cols, uniq // len(cols), uniq % len(cols), acc, kind)
        v = np.empty(len(vals), dtype=object)
        v[:] = vals
        lin = r * len(cols) + c
        uniq, idx = np.unique(lin[::-1], return_index=True)
        return cls(rows, cols, uniq // len(cols), uniq % len(cols), v[::-1][idx], kind)

    @classmethod
    def empty(cls) -> AssocArray:
        return cls((), (), np.empty(0, np.int64), np.empty(0, np.int64),
                   np.empty(0, np.float64), "numeric")

    @classmethod
    def _from_parts(cls, rows, cols, r, c, v, kind) -> AssocArray:
        """Sort entries row-major and drop keys that no longer have entries."""
        if len(v) == 0:
            out = cls.empty()
            out.kind = kind
            return out
        used_r = np.unique(r)
        used_c = np.unique(c)
        rmap = np.full(len(rows), -1, np.int64)
        rmap[used_r] = np.arange(len(used_r))
        cmap = np.full(len(cols), -1, np.int64)
        cmap[used_c] = np.arange(len(used_c))
        nr, nc = rmap[r], cmap[c]
        order = np.lexsort((nc, nr))
        return cls([rows[i] for i in used_r], [cols[i] for i in used_c],
                   nr[order], nc[order], v[order], kind)

    # -- basic views -------------------------------------------------------

    @property
    def nnz(self) -> int:
        return len(self._v)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.rows), len(self.cols)

    def __len__(self):
        return self.nnz

    def __repr__(self):
        return f"AssocArray({self.shape[0]}x{self.shape[1]}, nnz={self.nnz}, {self.kind})"

    def to_triples(self) -> list[tuple]:
        vals = self._v.tolist()
        return [(self.rows[i], self.cols[j], x)
                for i, j, x in zip(self._r.tolist(), self._c.tolist(), vals)]

    def to_dict(self) -> dict:
        return {(r, c): v for r, c, v in self.to_triples()}

    def get(self, row, col, default=None):
        return self.to_dict().get((row, col), default)

    def pattern(self) -> set[tuple]:
        return {(r, c) for r, c, _ in self.to_triples()}

    def transpose(self) -> AssocArray:
        return AssocArray._from_parts(self.cols, self.rows, self._c, self._r, self._v, self.kind)

    def check_invariants(self) -> None:
        """Raise AssertionError if keys are unsorted, duplicated or orphaned."""
        for keys in (self.rows, self.cols):
            assert all(a < b for a, b in zip(keys, keys[1:])), "keys not sorted/unique"
        assert set(self._r.tolist()) == set(range(len(self.rows))), "orphan row key"
        assert set(self._c.tolist()) == set(range(len(self.cols))), "orphan column key"
        lin = self._r * max(len(self.cols), 1) + self._c
        assert np.all(np.diff(lin) > 0), "entries not sorted or duplicated"

    # -- indexing and filtering -------------------------------------------

    def __getitem__(self, key) -> AssocArray:
        rows, cols = key
        return self.index(KeySelector.parse(rows), KeySelector.parse(cols))

    def index(self, rows: KeySelector, cols: KeySelector = KeySelector.all()) -> AssocArray:
        ri = np.asarray(rows.indices(self.rows), dtype=np.int64)
        ci = np.asarray(cols.indices(self.cols), dtype=np.int64)
        keep = np.isin(self._r, ri) & np.isin(self._c, ci)
        return AssocArray._from_parts(self.rows, self.cols, self._r[keep], self._c[keep],
                                      self._v[keep], self.kind)

    def filter(self, op: str, value) -> AssocArray:
        """Entries whose value satisfies ``value_of_entry <op> value``."""
        if op not in _COMPARE:
            raise ValidationError(f"unknown comparison {op!r}")
        if self.nnz and (isinstance(value, str) != (self.kind == "string")):
            raise TypeError(f"cannot compare {self.kind} values with {type(value).__name__}")
        if not isinstance(value, str) and not _is_number(value):
            raise TypeError(f"unsupported constant {value!r}")
        if self.kind == "string":
            keep = np.fromiter((_COMPARE[op](x, value) for x in self._v), bool, self.nnz)
        else:
            keep = _COMPARE[op](self._v, value)
        return AssocArray._from_parts(self.rows, self.cols, self._r[keep], self._c[keep],
                                      self._v[keep], self.kind)

    # -- algebra -----------------------------------------------------------

    def _require_numeric(self, other, what):
        for a in (self, other):
            if a.kind != "numeric" and a.nnz:
                raise TypeError(f"{what} needs numeric associative arrays")

    def _aligned(self, other):
        """Both operands as scipy matrices over the union of their keys."""
        rows = sorted(set(self.rows) | set(other.rows))
        cols = sorted(set(self.cols) | set(other.cols))
        rpos = {k: i for i, k in enumerate(rows)}
        cpos = {k: i for i, k in enumerate(cols)}

        def lift(a):
            rm = np.asarray([rpos[k] for k in a.rows], np.int64)
            cm = np.asarray([cpos[k] for k in a.cols], np.int64)
            r = rm[a._r] if a.nnz else a._r
            c = cm[a._c] if a.nnz else a._c
            return r, c

        return rows, cols, lift(self), lift(other)

    def _arith(self, other, sign) -> AssocArray:
        self._require_numeric(other, "+ and -")
        rows, cols, (ar, ac), (br, bc) = self._aligned(other)
        if not rows or not cols:
            return AssocArray.empty()
        dtype = np.result_type(self._v.dtype, other._v.dtype)
        shape = (len(rows), len(cols))
        A = sp.csr_matrix((self._v.astype(dtype), (ar, ac)), shape=shape)
        B = sp.csr_matrix((other._v.astype(dtype), (br, bc)), shape=shape)
        C = (A + B if sign > 0 else A - B).tocoo()
        keep = C.data != 0
        return AssocArray._from_parts(rows, cols, C.row[keep].astype(np.int64),
                                      C.col[keep].astype(np.int64), C.data[keep], "numeric")

    def __add__(self, other: AssocArray) -> AssocArray:
        return self._arith(other, +1)

    def __sub__(self, other: AssocArray) -> AssocArray:
        return self._arith(other, -1)

    def _combine(self, other, both: bool) -> AssocArray:
        if self.nnz and other.nnz and self.kind != other.kind:
            raise TypeError("cannot combine numeric and string associative arrays")
        kind = self.kind if self.nnz else other.kind
        rows, cols, (ar, ac), (br, bc) = self._aligned(other)
        ncol = max(len(cols), 1)
        la, lb = ar * ncol + ac, br * ncol + bc
        if both:
            common, ia, ib = np.intersect1d(la, lb, assume_unique=True, return_indices=True)
            va, vb = self._v[ia], other._v[ib]
            if kind == "numeric":
                v = np.minimum(va.astype(np.result_type(va, vb)), vb)
            else:
                v = va
            lin = common
        else:
            only_b = ~np.isin(lb, la)
            lin = np.concatenate([la, lb[only_b]])
            if kind == "numeric":
                dt = np.result_type(self._v.dtype, other._v.dtype)
                v = np.concatenate([self._v.astype(dt), other._v[only_b].astype(dt)])
            else:
                v = np.concatenate([self._v, other._v[only_b]])
        return AssocArray._from_parts(rows, cols, lin // ncol, lin % ncol, v, kind)

    def __and__(self, other: AssocArray) -> AssocArray:
        """Entries present in both; value is the minimum (numeric) or the left value."""
        return self._combine(other, both=True)

    def __or__(self, other: AssocArray) -> AssocArray:
        """Entries present in either; where both hold a value the left one is kept."""
        return self._combine(other, both=False)

    def __mul__(self, other: AssocArray) -> AssocArray:
        return self.matmul(other)

    def __matmul__(self, other: AssocArray) -> AssocArray:
        return self.matmul(other)

    def matmul(self, other: AssocArray) -> AssocArray:
        """Sparse product joining this array's column keys to ``other``'s row keys."""
        self._require_numeric(other, "matmul")
        inner = sorted(set(self.cols) & set(other.rows))
        if not inner or not self.nnz or not other.nnz:
            return AssocArray.empty()
        ipos = {k: i for i, k in enumerate(inner)}
        a_map = np.asarray([ipos.get(k, -1) for k in self.cols], np.int64)
        b_map = np.asarray([ipos.get(k, -1) for k in other.rows], np.int64)
        ak, bk = a_map[self._c], b_map[other._r]
        am, bm = ak >= 0, bk >= 0
        dtype = np.result_type(self._v.dtype, other._v.dtype)
        A = sp.csr_matrix((self._v[am].astype(dtype), (self._r[am], ak[am])),
                          shape=(len(self.rows), len(inner)))
        B = sp.csr_matrix((other._v[bm].astype(dtype), (bk[bm], other._c[bm])),
                          shape=(len(inner), len(other.cols)))
        C = (A @ B).tocoo()
        keep = C.data != 0
        return AssocArray._from_parts(self.rows, other.cols, C.row[keep].astype(np.int64),
                                      C.col[keep].astype(np.int64), C.data[keep], "numeric")

    # -- dense helpers -----------------------------------------------------

    def to_dense(self, rows=None, cols=None) -> np.ndarray:
        rows = self.rows if rows is None else rows
        cols = self.cols if cols is None else cols
        rpos = {k: i for i, k in enumerate(rows)}
        cpos = {k: i for i, k in enumerate(cols)}
        out = np.zeros((len(rows), len(cols)), dtype=self._v.dtype if self.nnz else float)
        for r, c, v in self.to_triples():
            out[rpos[r], cpos[c]] = v
        return out


def neighbors(adjacency: AssocArray, vertices: Iterable) -> set:
    """One breadth-first-search step as a vector-matrix product.

    The indicator row vector of ``vertices`` times ``adjacency`` has a
    nonzero exactly at every out-neighbor of the input set.
    """
    v = AssocArray.from_triples([("_", k, 1) for k in vertices])
    return set((v @ adjacency).cols)


# --------------------------------------------------------------------------
# triple text format


def write_triples(a: AssocArray, dest) -> None:
    """Tab-separated ``row<TAB>col<TAB>value`` lines, UTF-8."""
    text = "".join(f"{r}\t{c}\t{v}\n" for r, c, v in a.to_triples())
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text, encoding="utf-8")
    else:
        dest.write(text)


def read_triples(src) -> AssocArray:
    """Inverse of :func:`write_triples`.

    Keys are read as strings. Values are numeric when every value in the
    file parses as a number, strings otherwise.
    """
    if isinstance(src, (str, Path)) and Path(src).exists():
        text = Path(src).read_text(encoding="utf-8")
    elif isinstance(src, io.IOBase) or hasattr(src, "read"):
        text = src.read()
    else:
        text = str(src)
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"line {lineno}: expected 3 tab-separated fields")
        rows.append(parts)
    vals = [p[2] for p in rows]
    try:
        nums = [int(v) for v in vals]
    except ValueError:
        try:
            nums = [float(v) for v in vals]
        except ValueError:
            nums = None
    if nums is not None:
        return AssocArray.from_triples([(r, c, v) for (r, c, _), v in zip(rows, nums)])
    return AssocArray.from_triples([tuple(p) for p in rows])


# --------------------------------------------------------------------------
# database binding


class DbTable:
    """An engine array seen through the associative-array interface.

    Bound to the latest version by default; :meth:`pin` fixes a version.
    """

    def __init__(self, engine: Engine, array: str, version=None):
        self.engine = engine
        self.handle = engine.handle(array)
        self.version = version

    @classmethod
    def open(cls, engine: Engine, schema_text: str) -> DbTable:
        """Bind to the array named in ``schema_text``, creating it if needed."""
        from arraydb.schema import parse_schema

        name, schema = parse_schema(schema_text)
        if name in engine.arrays():
            if engine.handle(name).schema != schema:
                raise ValidationError(f"array {name!r} exists with a different schema")
        else:
            engine.create_array(name, schema)
        return cls(engine, name)

    @property
    def schema(self):
        return self.handle.schema

    def pin(self, version=None) -> DbTable:
        v = self.engine.latest(self.handle.name) if version is None else version
        return DbTable(self.engine, self.handle.name, v)

    def put_triple(self, coords, values) -> DbTable:
        """Insert one batch (one coordinate tuple per value) and return the updated table."""
        coords = np.asarray(coords, dtype=np.int64)
        values = np.asarray(values).reshape(-1)
        n = coords.shape[0] if coords.ndim == 2 else coords.size
        if n != len(values):
            raise ValidationError(f"{n} coordinates but {len(values)} values")
        self.engine.insert(self.handle.name, coords, values)
        return DbTable(self.engine, self.handle.name, None if self.version is None else
                       self.engine.latest(self.handle.name))

    def subvolume(self, *ranges) -> tuple[np.ndarray, tuple[int, ...]]:
        """Dense block over one inclusive ``(lo, hi)`` range per dimension.

        Missing cells are the attribute's zero. Returns ``(block, origin)``
        where ``origin`` is the coordinate of ``block[0, 0, ...]``.
        """
        if len(ranges) != self.schema.ndim:
            raise ValidationError(
                f"{len(ranges)} ranges given for a {self.schema.ndim}-dimensional array")
        box = CellBox(tuple(r[0] for r in ranges), tuple(r[1] for r in ranges))
        block, _ = self.engine.fetch_dense(self.handle.name, box, self.version)
        return block, box.low
