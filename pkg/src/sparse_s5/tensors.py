"""Dense, CSR and mask primitives plus the event-driven sparse mat-vec.

Dense matrices are plain 2-D numpy arrays in (out, in) orientation; complex
vectors are numpy complex arrays. Only the sparse carriers get their own
types because they have invariants worth guarding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionError",
    "Mask",
    "SparseMatrix",
    "mask_apply",
    "to_csr",
    "spmv_event_driven",
    "dense_matvec",
]


class DimensionError(ValueError):
    """Operand shapes do not line up."""


@dataclass(frozen=True)
class Mask:
    """Packed boolean keep-mask for a (rows, cols) weight matrix."""

    rows: int
    cols: int
    bits: np.ndarray  # uint8, little bit order, ceil(rows*cols / 8) bytes

    def __post_init__(self):
        need = (self.rows * self.cols + 7) // 8
        if self.bits.dtype != np.uint8 or self.bits.shape != (need,):
            raise DimensionError(f"mask payload must be {need} uint8 bytes for {self.rows}x{self.cols}")

    @classmethod
    def from_bool(cls, keep: np.ndarray) -> "Mask":
        keep = np.asarray(keep, dtype=bool)
        if keep.ndim != 2:
            raise DimensionError("mask must be 2-D")
        return cls(keep.shape[0], keep.shape[1], np.packbits(keep.ravel(), bitorder="little"))

    @classmethod
    def ones(cls, rows: int, cols: int) -> "Mask":
        return cls.from_bool(np.ones((rows, cols), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def to_bool(self) -> np.ndarray:
        n = self.rows * self.cols
        return np.unpackbits(self.bits, count=n, bitorder="little").astype(bool).reshape(self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(np.unpackbits(self.bits, count=self.rows * self.cols, bitorder="little").sum())

    @property
    def density(self) -> float:
        size = self.rows * self.cols
        return self.nnz / size if size else 1.0

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class SparseMatrix:
    """Compressed sparse row matrix, float or integer valued."""

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _entry_rows: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", np.asarray(self.row_offsets, dtype=np.int64))
        object.__setattr__(self, "col_indices", np.asarray(self.col_indices, dtype=np.int64))
        self.validate()
        object.__setattr__(
            self, "_entry_rows", np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.row_offsets))
        )

    def validate(self) -> None:
        """Raise ValueError if any CSR invariant is broken."""
        ro, ci = self.row_offsets, self.col_indices
        if ro.shape != (self.rows + 1,):
            raise ValueError("row_offsets must have rows+1 entries")
        if ro[0] != 0:
            raise ValueError("row_offsets[0] must be 0")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        nnz = int(ro[-1])
        if ci.shape != (nnz,) or self.values.shape != (nnz,):
            raise ValueError("last row offset must equal nnz == len(values) == len(col_indices)")
        if nnz and (ci.min() < 0 or ci.max() >= self.cols):
            raise ValueError("column index out of range")
        if nnz > 1:
            step = np.diff(ci)
            # a row boundary may restart the column sequence; inside a row it must increase
            inside = np.ones(nnz - 1, dtype=bool)
            starts = ro[1:-1]
            starts = starts[(starts > 0) & (starts < nnz)]
            inside[starts - 1] = False
            if np.any(step[inside] <= 0):
                raise ValueError("column indices must be strictly increasing within a row")
        if np.issubdtype(self.values.dtype, np.floating) and not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite value in float CSR")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def density(self) -> float:
        size = self.rows * self.cols
        return self.nnz / size if size else 1.0

    @classmethod
    def from_dense(cls, W: np.ndarray) -> "SparseMatrix":
        W = np.asarray(W)
        if W.ndim != 2:
            raise DimensionError("expected a 2-D matrix")
        r, c = np.nonzero(W)  # row-major order: ascending column inside each row
        offsets = np.zeros(W.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=W.shape[0]), out=offsets[1:])
        return cls(W.shape[0], W.shape[1], offsets, c, W[r, c].copy())

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=self.values.dtype)
        out[self._entry_rows, self.col_indices] = self.values
        return out

    def column_nnz(self) -> np.ndarray:
        """Stored entries per column (the work one nonzero input triggers)."""
        return np.bincount(self.col_indices, minlength=self.cols)

    def astype(self, dtype) -> "SparseMatrix":
        return SparseMatrix(self.rows, self.cols, self.row_offsets, self.col_indices, self.values.astype(dtype))

    def matvec(self, x: np.ndarray) -> tuple[np.ndarray, int]:
        return spmv_event_driven(self, x)


def to_csr(W: np.ndarray) -> SparseMatrix:
    return SparseMatrix.from_dense(W)


def mask_apply(W: np.ndarray, M: Mask) -> np.ndarray:
    """Zero every weight whose mask bit is clear."""
    W = np.asarray(W)
    if W.shape != M.shape:
        raise DimensionError(f"weight shape {W.shape} != mask shape {M.shape}")
    return np.where(M.to_bool(), W, np.zeros((), dtype=W.dtype))


def spmv_event_driven(W: SparseMatrix, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Compute ``W @ x`` touching only stored entries whose input is nonzero.

    Returns the product and the number of multiply-accumulates executed.
    Integer CSR accumulates exactly in int64 (callers narrow to 32 bit under
    their overflow policy); float CSR accumulates in float64 in ascending
    column order within each row.
    """
    x = np.asarray(x)
    if x.shape != (W.cols,):
        raise DimensionError(f"vector of length {x.shape} does not match {W.cols} columns")
    xv = x[W.col_indices]
    sel = np.flatnonzero(xv)
    macs = int(sel.size)
    if np.issubdtype(W.values.dtype, np.integer):
        if not np.issubdtype(x.dtype, np.integer):
            raise TypeError("integer CSR needs an integer input vector")
        contrib = np.zeros(W.nnz + 1, dtype=np.int64)
        contrib[sel + 1] = W.values[sel].astype(np.int64) * xv[sel].astype(np.int64)
        csum = np.cumsum(contrib)
        return csum[W.row_offsets[1:]] - csum[W.row_offsets[:-1]], macs
    prod = W.values[sel].astype(np.float64) * xv[sel].astype(np.float64)
    y = np.bincount(W._entry_rows[sel], weights=prod, minlength=W.rows)
    return y, macs


def dense_matvec(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reference dense product (int64 for integer operands, float64 otherwise)."""
    W = np.asarray(W)
    x = np.asarray(x)
    if np.issubdtype(W.dtype, np.integer) and np.issubdtype(x.dtype, np.integer):
        return W.astype(np.int64) @ x.astype(np.int64)
    return W.astype(np.float64) @ x.astype(np.float64)
