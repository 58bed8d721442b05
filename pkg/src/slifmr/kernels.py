"""Sparse row-compressed kernels with a compiled fast path.

The compiled module ``slifmr._kernels`` is used when it imports; otherwise the
numpy implementations below are used. Set ``SLIFMR_KERNELS=python`` to force
the fallback (the benchmark and the kernel tests do this to compare both).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

try:  # pragma: no cover - depends on build
    if os.environ.get("SLIFMR_KERNELS", "").lower() == "python":
        raise ImportError("compiled kernels disabled by SLIFMR_KERNELS")
    from slifmr import _kernels as _ext
except ImportError:  # pragma: no cover
    _ext = None

BACKEND = "cython" if _ext is not None else "python"


@dataclass
class CSRPattern:
    """Row-compressed sparsity pattern (no values).

    Duplicate column ids inside a row are allowed here; the knowledge-graph
    triple index relies on that.
    """

    num_rows: int
    num_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    _transpose: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.row_offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        if self.row_offsets.shape != (self.num_rows + 1,):
            raise ValueError("row_offsets must have num_rows + 1 entries")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != len(self.col_indices):
            raise ValueError("row_offsets inconsistent with col_indices")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if len(self.col_indices) and (
            self.col_indices.min() < 0 or self.col_indices.max() >= self.num_cols
        ):
            raise ValueError("column index out of range")

    @property
    def nnz(self) -> int:
        return len(self.col_indices)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_rows, dtype=np.int64), np.diff(self.row_offsets))

    @classmethod
    def from_coo(cls, num_rows, num_cols, rows, cols):
        """Build from coordinate lists; returns (pattern, order) where ``order``
        maps pattern positions back to the input positions."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        order = np.lexsort((cols, rows))
        counts = np.bincount(rows, minlength=num_rows) if len(rows) else np.zeros(num_rows, np.int64)
        offsets = np.zeros(num_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(num_rows, num_cols, offsets, cols[order]), order

    def transpose_plan(self):
        """(transposed pattern, perm) with transposed_weights = weights[perm]."""
        if self._transpose is None:
            rows = self.row_ids()
            t, order = CSRPattern.from_coo(self.num_cols, self.num_rows, self.col_indices, rows)
            self._transpose = (t, order)
        return self._transpose


def _py_spmm(offsets, cols, weights, x):
    n_rows = len(offsets) - 1
    out = np.zeros((n_rows, x.shape[1]), dtype=np.result_type(weights, x))
    if len(cols) == 0:
        return out
    contrib = weights[:, None] * x[cols]
    nonempty = np.flatnonzero(np.diff(offsets))
    out[nonempty] = np.add.reduceat(contrib, offsets[nonempty], axis=0)
    return out


def _py_edge_dot(offsets, cols, a, b):
    rows = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    return np.einsum("ij,ij->i", a[rows], b[cols])


def _py_segment_softmax(offsets, scores):
    out = np.empty_like(scores)
    if len(scores) == 0:
        return out
    nonempty = np.flatnonzero(np.diff(offsets))
    starts = offsets[nonempty]
    seg = np.repeat(np.arange(len(nonempty)), np.diff(offsets)[nonempty])
    m = np.maximum.reduceat(scores, starts)
    e = np.exp(scores - m[seg])
    out[:] = e / np.add.reduceat(e, starts)[seg]
    return out


def _py_segment_sum(offsets, values):
    out = np.zeros(len(offsets) - 1, dtype=values.dtype)
    nonempty = np.flatnonzero(np.diff(offsets))
    if len(nonempty):
        out[nonempty] = np.add.reduceat(values, offsets[nonempty])
    return out


def _same_float(*arrays):
    dt = np.result_type(*arrays)
    if dt not in (np.float32, np.float64):
        dt = np.float64
    return [np.ascontiguousarray(a, dtype=dt) for a in arrays]


def spmm(pattern: CSRPattern, weights, x, backend: str | None = None) -> np.ndarray:
    """Sparse (pattern, weights) times dense ``x``."""
    w, x = _same_float(weights, x)
    if x.ndim != 2 or x.shape[0] != pattern.num_cols:
        raise ValueError(f"spmm shape mismatch: pattern {pattern.num_rows}x{pattern.num_cols}, x {x.shape}")
    if len(w) != pattern.nnz:
        raise ValueError("spmm: one weight per stored entry required")
    if _use_ext(backend):
        return _ext.spmm(pattern.row_offsets, pattern.col_indices, w, x)
    return _py_spmm(pattern.row_offsets, pattern.col_indices, w, x)


def spmm_transpose(pattern: CSRPattern, weights, x, backend: str | None = None) -> np.ndarray:
    t, perm = pattern.transpose_plan()
    return spmm(t, np.asarray(weights)[perm], x, backend)


def edge_dot(pattern: CSRPattern, a, b, backend: str | None = None) -> np.ndarray:
    a, b = _same_float(a, b)
    if _use_ext(backend):
        return _ext.edge_dot(pattern.row_offsets, pattern.col_indices, a, b)
    return _py_edge_dot(pattern.row_offsets, pattern.col_indices, a, b)


def segment_softmax(offsets, scores, backend: str | None = None) -> np.ndarray:
    (scores,) = _same_float(scores)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if _use_ext(backend):
        return _ext.segment_softmax(offsets, scores)
    return _py_segment_softmax(offsets, scores)


def segment_sum(offsets, values, backend: str | None = None) -> np.ndarray:
    (values,) = _same_float(values)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if _use_ext(backend):
        return _ext.segment_sum(offsets, values)
    return _py_segment_sum(offsets, values)


def _use_ext(backend):
    if backend is None:
        return _ext is not None
    if backend == "cython":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available")
        return True
    if backend == "python":
        return False
    raise ValueError(f"unknown kernel backend {backend!r}")
