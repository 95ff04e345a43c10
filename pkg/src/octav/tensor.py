"""Tensor container, scaling-group views, deterministic sums and OCTV file I/O.

OCTV layout (little-endian, no padding)::

    b"OCTV" | u16 version (=1) | u8 dtype (1=f32, 2=f64) | u8 rank
    | rank x u64 dims | row-major payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OCTV"
FORMAT_VERSION = 1
_DTYPE_CODES = {1: "<f4", 2: "<f8"}
_STORAGE_CODES = {"f32": 1, "f64": 2}
_HEADER = struct.Struct("<4sHBB")


class OctvFormatError(ValueError):
    """Raised when a tensor file does not conform to the OCTV layout."""


def _check_values(values: np.ndarray) -> None:
    if values.size == 0:
        raise ValueError("empty tensor")
    if any(d <= 0 for d in values.shape):
        raise ValueError("empty tensor")
    finite = np.isfinite(values)
    if not finite.all():
        i = int(np.flatnonzero(~finite.ravel())[0])
        raise ValueError(f"non-finite value at index {i}")


@dataclass(frozen=True)
class Tensor:
    """Immutable float64 tensor that remembers the dtype it is stored with.

    Values are always held in float64. With ``storage="f32"`` they are first
    rounded to float32, so saving and reloading is bit-exact.
    """

    values: np.ndarray
    storage: str = "f64"

    def __post_init__(self):
        if self.storage not in _STORAGE_CODES:
            raise ValueError(f"unsupported storage dtype {self.storage!r}")
        v = np.asarray(self.values)
        if v.ndim == 0:
            v = v.reshape(1)
        if self.storage == "f32":
            v = v.astype(np.float32)
        v = np.array(v, dtype=np.float64, order="C", copy=True)
        _check_values(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.storage == other.storage
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


def as_array(t) -> np.ndarray:
    """float64 ndarray view of a Tensor or array-like."""
    return np.asarray(t, dtype=np.float64)


def save_tensor(t, path) -> None:
    """Write ``t`` to ``path`` in OCTV format.

    Plain arrays are stored as f64; a Tensor keeps its storage dtype.
    """
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t, dtype=np.float64))
    code = _STORAGE_CODES[t.storage]
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, code, len(t.shape))
    dims = struct.pack(f"<{len(t.shape)}Q", *t.shape)
    payload = t.values.astype(_DTYPE_CODES[code]).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header + dims + payload)


def load_tensor(path) -> Tensor:
    """Read an OCTV file. Rejects malformed headers, empty and non-finite data."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise OctvFormatError("malformed header: file too short")
    magic, version, code, rank = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise OctvFormatError(f"malformed header: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise OctvFormatError(f"malformed header: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise OctvFormatError(f"unsupported dtype code {code}")
    if rank == 0:
        raise OctvFormatError("malformed header: rank 0")
    off = _HEADER.size
    if len(raw) < off + 8 * rank:
        raise OctvFormatError("malformed header: truncated dimensions")
    shape = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    if 0 in shape:
        raise ValueError("empty tensor")
    dtype = np.dtype(_DTYPE_CODES[code])
    n = int(np.prod(shape, dtype=np.uint64))
    expected = n * dtype.itemsize
    if len(raw) - off < expected:
        raise OctvFormatError(
            f"truncated payload: expected {expected} bytes, got {len(raw) - off}"
        )
    if len(raw) - off > expected:
        raise OctvFormatError("malformed file: trailing bytes after payload")
    values = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
    storage = "f32" if code == 1 else "f64"
    return Tensor(values, storage=storage)


@dataclass(frozen=True)
class GroupView:
    """Partition of a tensor into scaling groups.

    ``axis=None`` is per-tensor scaling (one group). ``axis=k`` gives one group
    per index along ``k``; a (K, C, R, S) conv weight with ``axis=0`` becomes K
    rows of C*R*S elements (per-output-channel / per-output-feature scaling).
    """

    shape: tuple[int, ...]
    axis: int | None = None
    group_count: int = field(init=False)
    group_size: int = field(init=False)

    def __post_init__(self):
        total = int(np.prod(self.shape))
        if self.axis is None:
            count = 1
        else:
            count = self.shape[self.axis]
        object.__setattr__(self, "group_count", count)
        object.__setattr__(self, "group_size", total // count)

    @property
    def per_tensor(self) -> bool:
        return self.axis is None

    def split(self, x) -> np.ndarray:
        """Reshape ``x`` into (group_count, group_size) rows."""
        x = as_array(x)
        if x.shape != tuple(self.shape):
            raise ValueError(f"shape {x.shape} does not match view {self.shape}")
        if self.axis is None:
            return x.reshape(1, -1)
        return np.moveaxis(x, self.axis, 0).reshape(self.group_count, -1)

    def merge(self, rows: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`split`."""
        if self.axis is None:
            return rows.reshape(self.shape)
        moved = (self.shape[self.axis],) + tuple(
            d for i, d in enumerate(self.shape) if i != self.axis
        )
        return np.moveaxis(rows.reshape(moved), 0, self.axis)

    def group_indices(self, g: int) -> np.ndarray:
        """Flat (row-major) element indices belonging to group ``g``."""
        idx = np.arange(int(np.prod(self.shape))).reshape(self.shape)
        return self.split(idx)[g].astype(np.int64)


def group_view(t, axis: int | None = None) -> GroupView:
    """Build a :class:`GroupView` for ``t`` (a tensor, array or shape tuple)."""
    if isinstance(t, tuple):
        shape = t
    else:
        shape = as_array(t).shape
    if axis is not None:
        rank = len(shape)
        if not -rank <= axis < rank:
            raise ValueError(f"axis {axis} out of range for rank {rank}")
        axis = axis % rank
    return GroupView(tuple(int(d) for d in shape), axis)


def reduce_sum(values, axis: int = -1, *, overwrite: bool = False):
    """Sum along ``axis`` with a fixed pairwise tree.

    The array is repeatedly folded in half (first half + second half, the odd
    element carried), so the association order depends only on the length.
    Results are bit-identical across calls and thread counts. With
    ``overwrite=True`` a float64 input buffer is used as scratch space.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 0:
        return float(a)
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    if n == 0:
        out = np.zeros(a.shape[:-1])
        return float(out) if out.ndim == 0 else out
    owned = overwrite and isinstance(values, np.ndarray) and values.dtype == np.float64
    src = a if owned else a.copy()
    # ping-pong between two buffers; in-place folds trigger overlap copies
    dst = np.empty(a.shape[:-1] + ((n + 1) // 2,))
    while n > 1:
        half = n // 2
        np.add(src[..., :half], src[..., half : 2 * half], out=dst[..., :half])
        if n % 2:
            dst[..., half] = src[..., 2 * half]
        n = half + n % 2
        src, dst = dst, src
    out = src[..., 0]
    return float(out) if out.ndim == 0 else out.copy()
