"""Independent reference implementations used as test oracles.

Nothing here calls into the arraydb algebra; the oracles work on plain dicts
and dense numpy matrices so a bug in the library cannot hide in both places.
"""

import numpy as np
from hypothesis import strategies as st

KEYS = ["al", "alice", "alina", "bob", "bobby", "carl", "dave", "eve", "zed", "Zoe",
        "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"]


@st.composite
def numeric_triples(draw, max_keys=20, ints=None):
    rows = draw(st.lists(st.sampled_from(KEYS), min_size=0, max_size=max_keys, unique=True))
    cols = draw(st.lists(st.sampled_from(KEYS), min_size=0, max_size=max_keys, unique=True))
    if not rows or not cols:
        return []
    use_ints = draw(st.booleans()) if ints is None else ints
    values = st.integers(-50, 50) if use_ints else st.floats(-100, 100, allow_nan=False)
    n = draw(st.integers(0, 40))
    return [(draw(st.sampled_from(rows)), draw(st.sampled_from(cols)), draw(values))
            for _ in range(n)]


def collide(triples):
    """Sum numeric duplicates, last-wins for strings; returns {(r, c): v}."""
    out = {}
    for r, c, v in triples:
        if isinstance(v, str):
            out[(r, c)] = v
        else:
            out[(r, c)] = out.get((r, c), 0) + v
    return out


def dense(d, rows, cols):
    m = np.zeros((len(rows), len(cols)))
    for (r, c), v in d.items():
        m[rows.index(r), cols.index(c)] = v
    return m


def undense(m, rows, cols):
    return {(rows[i], cols[j]): m[i, j] for i, j in zip(*np.nonzero(m))}


def axes(*ds):
    rows = sorted({r for d in ds for r, _ in d})
    cols = sorted({c for d in ds for _, c in d})
    return rows, cols


def oracle_add(a, b, sign=1):
    rows, cols = axes(a, b)
    return undense(dense(a, rows, cols) + sign * dense(b, rows, cols), rows, cols)


def oracle_and(a, b):
    return {k: min(a[k], b[k]) for k in a.keys() & b.keys()}


def oracle_or(a, b):
    out = dict(b)
    out.update(a)
    return out


def oracle_matmul(a, b):
    """Triple loop over the joined inner keys."""
    out = {}
    for (i, k1), x in a.items():
        for (k2, j), y in b.items():
            if k1 == k2:
                out[(i, j)] = out.get((i, j), 0) + x * y
    return {k: v for k, v in out.items() if v != 0}


def close(got, want, tol=1e-9):
    """Exact for ints, elementwise tolerance for floats; key sets must match exactly."""
    if got.keys() != want.keys():
        return False
    for k, v in want.items():
        g = got[k]
        if isinstance(v, (int, np.integer)) and isinstance(g, (int, np.integer)):
            if g != v:
                return False
        elif abs(g - v) > tol * max(1.0, abs(v)):
            return False
    return True


def select_oracle(keys, form, arg):
    """Brute-force predicate for each selector form over sorted ``keys``."""
    if form == "all":
        return list(keys)
    if form == "key":
        return [k for k in keys if k == arg]
    if form == "keys":
        return [k for k in keys if k in arg]
    if form == "prefix":
        return [k for k in keys if k[:len(arg)] == arg]
    if form == "range":
        lo, hi = arg
        return [k for k in keys if lo.encode() <= k.encode() <= hi.encode()]
    if form == "positions":
        i, j = arg
        return [k for n, k in enumerate(keys, 1) if i <= n <= j]
    raise ValueError(form)
