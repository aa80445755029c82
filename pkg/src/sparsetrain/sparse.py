"""Compressed sparse row weight storage and the kernels built on it.

A layer's weights are an ``rows x cols`` matrix (fan-in by fan-out) of which
only existing connections are stored. Structure arrays (``row_ptr``,
``col_idx``) are never modified after construction; every structural edit
returns a new :class:`SparseWeights`. ``values`` may be rebound by the
optimizer but is not mutated in place once shared, which is what lets a
snapshot be handed to another thread without copying.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import BinaryIO, Iterable

import numpy as np

from . import _kernels
from .errors import CheckpointError, ShapeError, StructuralEditError

INDEX_DTYPE = np.int64
COL_DTYPE = np.int32

SPW_MAGIC = b"SPW1"
_SPW_HEADER = struct.Struct("<4sQQQ")


@dataclass(eq=False)
class SparseWeights:
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / float(self.rows * self.cols)

    @cached_property
    def row_of(self) -> np.ndarray:
        """Row index of every stored entry (expanded ``row_ptr``)."""
        return np.repeat(np.arange(self.rows, dtype=INDEX_DTYPE), np.diff(self.row_ptr))

    @cached_property
    def keys(self) -> np.ndarray:
        """Row-major linear position of every entry; sorted ascending."""
        return self.row_of * self.cols + self.col_idx.astype(INDEX_DTYPE)

    # -- construction -----------------------------------------------------

    @classmethod
    def empty(cls, rows: int, cols: int, dtype=np.float32) -> "SparseWeights":
        return cls(
            rows,
            cols,
            np.zeros(rows + 1, dtype=INDEX_DTYPE),
            np.zeros(0, dtype=COL_DTYPE),
            np.zeros(0, dtype=dtype),
        )

    @classmethod
    def from_keys(cls, rows: int, cols: int, keys, values) -> "SparseWeights":
        """Build from row-major linear positions; ``keys`` must be sorted unique."""
        keys = np.asarray(keys, dtype=INDEX_DTYPE)
        values = np.asarray(values)
        r = keys // cols
        counts = np.bincount(r, minlength=rows) if keys.size else np.zeros(rows, INDEX_DTYPE)
        row_ptr = np.zeros(rows + 1, dtype=INDEX_DTYPE)
        np.cumsum(counts, out=row_ptr[1:])
        return cls(rows, cols, row_ptr, (keys % cols).astype(COL_DTYPE), values.copy())

    @classmethod
    def from_coo(cls, rows, cols, r, c, v, dtype=None) -> "SparseWeights":
        r = np.asarray(r, dtype=INDEX_DTYPE)
        c = np.asarray(c, dtype=INDEX_DTYPE)
        v = np.asarray(v, dtype=dtype) if dtype is not None else np.asarray(v)
        if r.size and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise ShapeError(f"coordinates out of bounds for a {rows}x{cols} matrix")
        keys = r * cols + c
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if keys.size > 1 and np.any(keys[1:] == keys[:-1]):
            dup = int(keys[1:][keys[1:] == keys[:-1]][0])
            raise StructuralEditError("duplicate position", (dup // cols, dup % cols))
        return cls.from_keys(rows, cols, keys, v[order])

    @classmethod
    def from_dense(cls, dense, dtype=None) -> "SparseWeights":
        dense = np.asarray(dense, dtype=dtype)
        r, c = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=self.values.dtype)
        out[self.row_of, self.col_idx] = self.values
        return out

    def with_values(self, values) -> "SparseWeights":
        """Same structure (shared arrays), new values."""
        values = np.asarray(values)
        if values.shape != (self.nnz,):
            raise ShapeError(f"expected {self.nnz} values, got shape {values.shape}")
        w = SparseWeights(self.rows, self.cols, self.row_ptr, self.col_idx, values)
        _share_cache(self, w)
        return w

    def copy(self) -> "SparseWeights":
        return SparseWeights(
            self.rows, self.cols, self.row_ptr.copy(), self.col_idx.copy(), self.values.copy()
        )

    def astype(self, dtype) -> "SparseWeights":
        return self.with_values(self.values.astype(dtype))

    def positions(self) -> set[tuple[int, int]]:
        return set(zip(self.row_of.tolist(), self.col_idx.tolist()))

    def same_structure(self, other: "SparseWeights") -> bool:
        if self.row_ptr is other.row_ptr and self.col_idx is other.col_idx:
            return True
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )

    def validate(self) -> None:
        """Full structural check; raises :class:`StructuralEditError`."""
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.rows + 1,):
            raise StructuralEditError(f"row_ptr has length {rp.shape[0]}, expected {self.rows + 1}")
        if rp[0] != 0 or rp[-1] != ci.shape[0] or ci.shape[0] != self.values.shape[0]:
            raise StructuralEditError("row_ptr endpoints do not match nnz")
        if np.any(np.diff(rp) < 0):
            raise StructuralEditError("row_ptr is not non-decreasing")
        if ci.size:
            if ci.min() < 0 or ci.max() >= self.cols:
                raise StructuralEditError("column index out of bounds")
            k = self.keys
            bad = np.flatnonzero(k[1:] <= k[:-1])
            if bad.size:
                key = int(k[bad[0] + 1])
                raise StructuralEditError(
                    "columns not strictly increasing within a row", (key // self.cols, key % self.cols)
                )

    # -- serialization ----------------------------------------------------

    def write(self, fh: BinaryIO) -> None:
        fh.write(_SPW_HEADER.pack(SPW_MAGIC, self.rows, self.cols, self.nnz))
        fh.write(self.row_ptr.astype("<u8").tobytes())
        fh.write(self.col_idx.astype("<u4").tobytes())
        fh.write(self.values.astype("<f4").tobytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    @classmethod
    def read(cls, fh: BinaryIO, dtype=np.float32) -> "SparseWeights":
        head = _read_exact(fh, _SPW_HEADER.size)
        magic, rows, cols, nnz = _SPW_HEADER.unpack(head)
        if magic != SPW_MAGIC:
            raise CheckpointError(f"bad layer magic {magic!r}")
        row_ptr = np.frombuffer(_read_exact(fh, 8 * (rows + 1)), dtype="<u8").astype(INDEX_DTYPE)
        col_idx = np.frombuffer(_read_exact(fh, 4 * nnz), dtype="<u4").astype(COL_DTYPE)
        values = np.frombuffer(_read_exact(fh, 4 * nnz), dtype="<f4").astype(dtype)
        w = cls(int(rows), int(cols), row_ptr, col_idx, values)
        try:
            w.validate()
        except StructuralEditError as exc:
            raise CheckpointError(f"corrupt layer block: {exc}") from exc
        return w

    @classmethod
    def from_bytes(cls, data: bytes, dtype=np.float32) -> "SparseWeights":
        return cls.read(io.BytesIO(data), dtype=dtype)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated data: wanted {n} bytes, got {len(data)}")
    return data


def _share_cache(src: SparseWeights, dst: SparseWeights) -> None:
    for name in ("row_of", "keys"):
        if name in src.__dict__:
            dst.__dict__[name] = src.__dict__[name]


@dataclass
class GradientUpdate:
    """Per-layer gradients aligned to the supports of one topology version.

    ``supports`` holds the layers the gradient was computed against (shared
    references, no copies) so a receiver on a newer topology can re-index
    it by position.
    """

    layer_grads: list
    bias_grads: list
    timestamp: int
    sample_count: int
    topology_version: int = 0
    supports: list | None = None
    loss_sum: float = 0.0
    correct: int = 0

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")
        if self.supports is not None:
            for i, (g, w) in enumerate(zip(self.layer_grads, self.supports)):
                if g.shape != (w.nnz,):
                    raise ShapeError(f"layer {i}: gradient length {g.shape[0]} != nnz {w.nnz}")


@dataclass
class SupportDelta:
    """Positions to drop and ``(row, col, value)`` entries to add."""

    removals: set = field(default_factory=set)
    additions: list = field(default_factory=list)

    @classmethod
    def from_arrays(cls, rem_rows=(), rem_cols=(), add_rows=(), add_cols=(), add_vals=()):
        removals = set(zip(np.asarray(rem_rows).tolist(), np.asarray(rem_cols).tolist()))
        additions = list(
            zip(np.asarray(add_rows).tolist(), np.asarray(add_cols).tolist(), np.asarray(add_vals).tolist())
        )
        return cls(removals, additions)

    def inverse(self, w: SparseWeights) -> "SupportDelta":
        """The delta undoing this one when applied to ``apply_support_delta(w, self)``."""
        lookup = dict(zip(zip(w.row_of.tolist(), w.col_idx.tolist()), w.values.tolist()))
        return SupportDelta(
            removals={(r, c) for r, c, _ in self.additions},
            additions=[(r, c, lookup[(r, c)]) for r, c in sorted(self.removals)],
        )

    def is_empty(self) -> bool:
        return not self.removals and not self.additions


def _check_dims(batch: np.ndarray, w: SparseWeights, layer: str | int | None) -> None:
    if batch.ndim != 2 or batch.shape[1] != w.rows:
        name = f"layer {layer}" if layer is not None else "layer"
        raise ShapeError(f"{name}: input has shape {batch.shape}, expected (B, {w.rows})")


def spmm_forward(batch, w: SparseWeights, bias, layer=None) -> np.ndarray:
    """``batch @ W + bias`` touching only stored connections."""
    batch = np.ascontiguousarray(batch, dtype=w.dtype)
    bias = np.asarray(bias, dtype=w.dtype)
    _check_dims(batch, w, layer)
    if bias.shape != (w.cols,):
        raise ShapeError(f"layer {layer}: bias has shape {bias.shape}, expected ({w.cols},)")
    return _kernels.forward(batch, w, bias)


def backward_support_gradient(batch, upstream, w: SparseWeights, need_input=True, layer=None):
    """Gradients of a batch-mean loss w.r.t. the stored weights, bias and input.

    ``upstream`` holds per-sample output gradients; weight and bias gradients
    are averaged over the batch, the input gradient is per sample.
    """
    batch = np.ascontiguousarray(batch, dtype=w.dtype)
    upstream = np.ascontiguousarray(upstream, dtype=w.dtype)
    _check_dims(batch, w, layer)
    if upstream.shape != (batch.shape[0], w.cols):
        raise ShapeError(
            f"layer {layer}: upstream has shape {upstream.shape}, expected ({batch.shape[0]}, {w.cols})"
        )
    return _kernels.backward(batch, upstream, w, need_input)


def align_values(src: SparseWeights, src_vals, dst: SparseWeights):
    """Re-index an array aligned to ``src``'s support onto ``dst``'s support."""
    if src.shape != dst.shape:
        raise ShapeError(f"cannot align {src.shape} onto {dst.shape}")
    return _kernels.align(src, np.asarray(src_vals), dst)


def lookup(sorted_keys: np.ndarray, query: np.ndarray):
    """Positions of ``query`` in ``sorted_keys`` and a found-mask."""
    pos = np.searchsorted(sorted_keys, query)
    if sorted_keys.size == 0:
        return pos, np.zeros(query.shape, dtype=bool)
    safe = np.minimum(pos, sorted_keys.size - 1)
    return safe, (pos < sorted_keys.size) & (sorted_keys[safe] == query)


def _keys_of(positions: Iterable, cols: int) -> np.ndarray:
    arr = np.asarray(list(positions), dtype=INDEX_DTYPE).reshape(-1, 2)
    return arr[:, 0] * cols + arr[:, 1]


def apply_support_delta(w: SparseWeights, delta: SupportDelta) -> SparseWeights:
    """Drop ``delta.removals`` and insert ``delta.additions``.

    Surviving entries keep their values; surviving explicit zeros are dropped.
    """
    if delta.is_empty():
        return w
    cols = w.cols
    for r, c in delta.removals:
        if not (0 <= r < w.rows and 0 <= c < cols):
            raise StructuralEditError(f"removal ({r}, {c}) out of bounds", (r, c))
    rem = np.sort(_keys_of(delta.removals, cols))
    keep = np.ones(w.nnz, dtype=bool)
    if rem.size:
        pos, found = lookup(w.keys, rem)
        if not np.all(found):
            bad = int(rem[~found][0])
            raise StructuralEditError(
                f"removal of non-existing {(bad // cols, bad % cols)}", (bad // cols, bad % cols)
            )
        keep[pos] = False
    keep &= w.values != 0

    if delta.additions:
        add = np.asarray([(r, c) for r, c, _ in delta.additions], dtype=INDEX_DTYPE)
        add_vals = np.asarray([v for _, _, v in delta.additions], dtype=w.dtype)
        outside = (add[:, 0] < 0) | (add[:, 0] >= w.rows) | (add[:, 1] < 0) | (add[:, 1] >= cols)
        if np.any(outside):
            r, c = (int(v) for v in add[np.flatnonzero(outside)[0]])
            raise StructuralEditError(f"addition {(r, c)} out of bounds", (r, c))
        add_keys = add[:, 0] * cols + add[:, 1]
    else:
        add_keys = np.zeros(0, dtype=INDEX_DTYPE)
        add_vals = np.zeros(0, dtype=w.dtype)
    return _merge(w, keep, add_keys, add_vals)


def _merge(w: SparseWeights, keep: np.ndarray, add_keys: np.ndarray, add_vals: np.ndarray) -> SparseWeights:
    cols = w.cols
    order = np.argsort(add_keys, kind="stable")
    add_keys, add_vals = add_keys[order], add_vals[order]
    if add_keys.size > 1:
        dup = np.flatnonzero(add_keys[1:] == add_keys[:-1])
        if dup.size:
            k = int(add_keys[dup[0]])
            raise StructuralEditError(f"duplicate addition {(k // cols, k % cols)}", (k // cols, k % cols))
    if np.any(add_vals == 0):
        k = int(add_keys[np.flatnonzero(add_vals == 0)[0]])
        raise StructuralEditError(f"addition {(k // cols, k % cols)} has zero value", (k // cols, k % cols))
    kept_keys = w.keys[keep]
    if add_keys.size:
        _, clash = lookup(kept_keys, add_keys)
        if np.any(clash):
            k = int(add_keys[clash][0])
            raise StructuralEditError(f"addition of existing {(k // cols, k % cols)}", (k // cols, k % cols))
    all_keys = np.concatenate([kept_keys, add_keys])
    all_vals = np.concatenate([w.values[keep], add_vals])
    order = np.argsort(all_keys, kind="stable")
    return SparseWeights.from_keys(w.rows, cols, all_keys[order], all_vals[order])


def insert_entries(w: SparseWeights, keep: np.ndarray, add_keys, add_vals) -> SparseWeights:
    """Vectorised structural edit: keep entries where ``keep`` and add new keys."""
    return _merge(
        w,
        np.asarray(keep, dtype=bool) & (w.values != 0),
        np.asarray(add_keys, dtype=INDEX_DTYPE),
        np.asarray(add_vals, dtype=w.dtype),
    )


def removal_order(w: SparseWeights, values=None) -> np.ndarray:
    """Entry indices sorted by ``|value|`` then row then column."""
    v = w.values if values is None else values
    return np.lexsort((w.col_idx, w.row_of, np.abs(v)))


def magnitude_prune_to_count(w: SparseWeights, target_nnz: int) -> SparseWeights:
    """Keep the ``target_nnz`` largest-magnitude entries."""
    target_nnz = int(target_nnz)
    if target_nnz < 0 or target_nnz > w.nnz:
        raise ValueError(f"target_nnz={target_nnz} outside [0, {w.nnz}]")
    if target_nnz == w.nnz:
        return w
    drop = removal_order(w)[: w.nnz - target_nnz]
    keep = np.ones(w.nnz, dtype=bool)
    keep[drop] = False
    return SparseWeights.from_keys(w.rows, w.cols, w.keys[keep], w.values[keep])
