"""Raw volume files and deterministic synthetic image data.

File layout (little-endian)::

    b"VVOL" | u16 version | u8 ndims | u32 extent * ndims | u8 value type | payload

The payload is the full array in row-major order, so the last axis (the
slice axis) varies fastest. Slice ``k`` of a synthetic volume is drawn from
its own PCG64 stream, ``SeedSequence(seed, spawn_key=(k,))``, so any process
can regenerate any slice without shared state.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from arraydb.errors import ValidationError

log = logging.getLogger(__name__)

MAGIC = b"VVOL"
VERSION = 1
TYPE_TAGS = {"uint8": 0, "int64": 1, "float64": 2}
TAG_TYPES = {v: k for k, v in TYPE_TAGS.items()}
DTYPES = {"uint8": np.dtype("<u1"), "int64": np.dtype("<i8"), "float64": np.dtype("<f8")}

# files above this size are accepted but reported as beyond desk scale
DESK_SCALE_BYTES = 4 * 2**30


def header_size(ndims: int) -> int:
    return 4 + 2 + 1 + 4 * ndims + 1


def volume_nbytes(extents, value_type: str = "uint8") -> int:
    return math.prod(extents) * DTYPES[value_type].itemsize


def is_desk_scale(extents, value_type: str = "uint8") -> bool:
    return volume_nbytes(extents, value_type) <= DESK_SCALE_BYTES


def _check_extents(extents):
    extents = tuple(int(e) for e in extents)
    if not extents or any(e < 1 for e in extents):
        raise ValidationError(f"extents must be positive, got {extents}")
    if any(e >= 2**32 for e in extents):
        raise ValidationError(f"extents {extents} overflow the u32 header fields")
    if len(extents) > 255:
        raise ValidationError("too many dimensions for the u8 header field")
    return extents


def pack_header(extents, value_type: str = "uint8") -> bytes:
    extents = _check_extents(extents)
    return struct.pack(f"<4sHB{len(extents)}IB", MAGIC, VERSION, len(extents), *extents,
                       TYPE_TAGS[value_type])


def slice_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(k,))))


def synthetic_slice(extents, seed: int, k: int) -> np.ndarray:
    """Slice ``k`` (0-based along the last axis) of the synthetic uint8 volume."""
    return slice_rng(seed, k).integers(0, 256, size=tuple(extents[:-1]), dtype=np.uint8)


@dataclass(frozen=True)
class VolumeInfo:
    path: Path
    extents: tuple[int, ...]
    value_type: str
    nbytes: int
    desk_scale: bool


def generate_volume(extents, seed: int, out, *, dry_run: bool = False) -> VolumeInfo:
    """Write a seeded uniform-uint8 volume. Same ``(extents, seed)`` gives the same bytes."""
    extents = _check_extents(extents)
    nbytes = volume_nbytes(extents)
    info = VolumeInfo(Path(out), extents, "uint8", nbytes, nbytes <= DESK_SCALE_BYTES)
    if not info.desk_scale:
        log.warning("volume %s is %.1f GB, beyond desk scale", "x".join(map(str, extents)),
                    nbytes / 1e9)
    if dry_run:
        return info
    hdr = pack_header(extents)
    path = Path(out)
    with open(path, "wb") as fh:
        fh.write(hdr)
        fh.truncate(len(hdr) + nbytes)
    mm = np.memmap(path, dtype=np.uint8, mode="r+", offset=len(hdr), shape=extents)
    for k in range(extents[-1]):
        mm[..., k] = synthetic_slice(extents, seed, k)
    mm.flush()
    del mm
    return info


def write_volume(path, array: np.ndarray) -> None:
    vt = {np.dtype("uint8"): "uint8", np.dtype("int64"): "int64",
          np.dtype("float64"): "float64"}.get(array.dtype)
    if vt is None:
        raise ValidationError(f"unsupported volume dtype {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(pack_header(array.shape, vt))
        fh.write(np.ascontiguousarray(array, dtype=DTYPES[vt]).tobytes())


def read_header(path) -> tuple[tuple[int, ...], str, int]:
    with open(path, "rb") as fh:
        head = fh.read(7)
        if len(head) < 7 or head[:4] != MAGIC:
            raise ValidationError(f"{path} is not a volume file")
        version, ndims = struct.unpack("<HB", head[4:])
        if version != VERSION:
            raise ValidationError(f"unsupported volume version {version}")
        rest = fh.read(4 * ndims + 1)
    extents = struct.unpack(f"<{ndims}I", rest[:-1])
    return extents, TAG_TYPES[rest[-1]], header_size(ndims)


def open_volume(path) -> np.ndarray:
    """Memory-map a volume file read-only."""
    extents, vt, off = read_header(path)
    expected = off + volume_nbytes(extents, vt)
    actual = Path(path).stat().st_size
    if actual != expected:
        raise ValidationError(f"{path}: size {actual} != expected {expected}")
    return np.memmap(path, dtype=DTYPES[vt], mode="r", offset=off, shape=extents)


class FileVolume:
    """Ingest data source backed by a volume file."""

    def __init__(self, path):
        self.path = Path(path)
        self.array = open_volume(path)
        self.extents = tuple(self.array.shape)

    def slice(self, k: int) -> np.ndarray:
        return np.ascontiguousarray(self.array[..., k])


class SyntheticVolume:
    """Ingest data source that regenerates slices on demand from a seed."""

    def __init__(self, extents, seed: int):
        self.extents = _check_extents(extents)
        self.seed = seed

    def slice(self, k: int) -> np.ndarray:
        return synthetic_slice(self.extents, self.seed, k)

    @property
    def array(self) -> np.ndarray:
        return np.stack([self.slice(k) for k in range(self.extents[-1])], axis=-1)


class ArrayVolume:
    """Ingest data source wrapping an in-memory array."""

    def __init__(self, array: np.ndarray):
        self.array = array
        self.extents = tuple(array.shape)

    def slice(self, k: int) -> np.ndarray:
        return np.ascontiguousarray(self.array[..., k])
