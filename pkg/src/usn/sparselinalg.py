"""CSR kernels for sparse layers: SpMM, transposed SpMM, and SDDMM.

Dense operands are feature-major, ``(features, batch)``, so each CSR edge
touches one contiguous batch row. All sums accumulate in float64 whatever the
storage dtype, and every output row is reduced in a fixed order by a single
worker, so results do not depend on the thread count.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np

from usn.topology import SparsityPattern

# the default probe warns about an old TBB on some hosts; OpenMP is always present
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"


@dataclass
class SparseMatrix:
    """Values on a fixed pattern; pattern rows index the matrix rows.

    For a layer weight matrix the rows are output neurons and the columns
    input neurons, i.e. the pattern is the transpose of the layer topology.
    """

    pattern: SparsityPattern
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.pattern.n_edges,):
            raise ValueError(
                f"expected {self.pattern.n_edges} values, got shape {self.values.shape}"
            )

    @property
    def shape(self):
        return self.pattern.shape

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        out[self.pattern.row_ids(), self.pattern.col_indices] = self.values
        return out


@numba.njit(parallel=True, cache=True)
def _spmm_kernel(offsets, cols, vals, x, out):
    n_rows = offsets.shape[0] - 1
    batch = x.shape[1]
    for i in numba.prange(n_rows):
        acc = np.zeros(batch, dtype=np.float64)
        for k in range(offsets[i], offsets[i + 1]):
            w = np.float64(vals[k])
            j = cols[k]
            for b in range(batch):
                acc[b] += w * x[j, b]
        for b in range(batch):
            out[i, b] = acc[b]


@numba.njit(cache=True)
def _spmm_t_kernel(offsets, cols, vals, g, acc):
    n_rows = offsets.shape[0] - 1
    batch = g.shape[1]
    for i in range(n_rows):
        for k in range(offsets[i], offsets[i + 1]):
            w = np.float64(vals[k])
            j = cols[k]
            for b in range(batch):
                acc[j, b] += w * g[i, b]


@numba.njit(parallel=True, cache=True)
def _sddmm_kernel(offsets, cols, g, x, out):
    n_rows = offsets.shape[0] - 1
    batch = g.shape[1]
    for i in numba.prange(n_rows):
        for k in range(offsets[i], offsets[i + 1]):
            j = cols[k]
            s = 0.0
            for b in range(batch):
                s += np.float64(g[i, b]) * x[j, b]
            out[k] = s


def _dense(a, name):
    a = np.ascontiguousarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def spmm(w: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """``W @ X`` for ``W`` of shape (m, n) and ``X`` of shape (n, batch)."""
    x = _dense(x, "X")
    m, n = w.shape
    if x.shape[0] != n:
        raise ValueError(f"shape mismatch: W is {m}x{n}, X is {x.shape[0]}x{x.shape[1]}")
    out = np.empty((m, x.shape[1]), dtype=np.result_type(w.values, x))
    p = w.pattern
    _spmm_kernel(p.row_offsets, p.col_indices, w.values, x, out)
    return out


def spmm_transpose(w: SparseMatrix, g: np.ndarray) -> np.ndarray:
    """``W.T @ G`` by scattered accumulation over the same CSR rows."""
    g = _dense(g, "G")
    m, n = w.shape
    if g.shape[0] != m:
        raise ValueError(f"shape mismatch: W is {m}x{n}, G is {g.shape[0]}x{g.shape[1]}")
    acc = np.zeros((n, g.shape[1]), dtype=np.float64)
    p = w.pattern
    _spmm_t_kernel(p.row_offsets, p.col_indices, w.values, g, acc)
    return acc.astype(np.result_type(w.values, g), copy=False)


def sddmm(g: np.ndarray, x: np.ndarray, pattern: SparsityPattern) -> np.ndarray:
    """``(G @ X.T)`` sampled at the pattern's edges, in CSR edge order."""
    g = _dense(g, "G")
    x = _dense(x, "X")
    m, n = pattern.shape
    if g.shape[0] != m or x.shape[0] != n or g.shape[1] != x.shape[1]:
        raise ValueError(
            f"shape mismatch: pattern {m}x{n}, G {g.shape}, X {x.shape}"
        )
    out = np.empty(pattern.n_edges, dtype=np.result_type(g, x))
    _sddmm_kernel(pattern.row_offsets, pattern.col_indices, g, x, out)
    return out


def set_num_threads(n: int) -> None:
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
