"""Dense float64 kernels used by the forward pass and the steering math.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float64. The
functions here add shape checking and operation counting on top of numpy so
that benchmarks can report work done independently of wall-clock time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class OpCounter:
    """Running totals of arithmetic work for one inference session."""

    fused_multiply_adds: int = 0
    softmax_rows: int = 0

    def reset(self) -> None:
        self.fused_multiply_adds = 0
        self.softmax_rows = 0

    def snapshot(self) -> dict[str, int]:
        return {
            "fused_multiply_adds": self.fused_multiply_adds,
            "softmax_rows": self.softmax_rows,
        }


def as_tensor(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float64 matrix, optionally checking its shape."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Matrix product ``a @ b`` with FMA accounting.

    Raises:
        ShapeError: if ``a.cols != b.rows``; the message carries both shapes.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if counter is not None:
        counter.fused_multiply_adds += a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


def row_softmax(
    a: np.ndarray,
    causal_mask: bool = False,
    row_offset: int = 0,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Numerically stabilized softmax over each row.

    With ``causal_mask`` set, entry ``(i, j)`` is masked when
    ``j > i + row_offset``. ``row_offset`` lets a block of query rows sit at
    absolute positions ``row_offset .. row_offset + rows - 1`` over a key axis
    of length ``row_offset + rows`` (the decode case); with the default of 0
    the input must be square. Masked entries come out as exact zeros.

    Entries equal to ``-inf`` in the input are treated as masked as well.

    Raises:
        ShapeError: on a shape inconsistent with the causal layout.
        ValueError: if some row has every entry masked.
    """
    if a.ndim != 2:
        raise ShapeError(f"row_softmax expects a 2-D tensor, got {a.shape}")
    n_rows, n_cols = a.shape
    x = np.array(a, dtype=DTYPE, copy=True)
    if causal_mask:
        if n_cols != n_rows + row_offset:
            raise ShapeError(
                f"causal softmax needs cols == rows + row_offset, got {a.shape} "
                f"with row_offset={row_offset}"
            )
        masked = np.triu(np.ones((n_rows, n_cols), dtype=bool), k=1 + row_offset)
        x[masked] = -np.inf
    row_max = x.max(axis=1, keepdims=True) if n_cols else np.zeros((n_rows, 1))
    if n_rows and (n_cols == 0 or not np.all(np.isfinite(row_max))):
        raise ValueError("row_softmax: a row has every entry masked and cannot be normalized")
    e = np.exp(x - row_max)
    out = e / e.sum(axis=1, keepdims=True)
    if counter is not None:
        counter.softmax_rows += n_rows
    return out


def rms_norm(x: np.ndarray, gain: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Scale each row by ``1 / sqrt(mean(row**2) + epsilon)`` then by ``gain``."""
    gain = np.asarray(gain, dtype=DTYPE)
    if x.ndim != 2 or gain.shape != (x.shape[1],):
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match input {x.shape}")
    ms = np.mean(x * x, axis=1, keepdims=True)
    denom = np.sqrt(ms + epsilon)
    # epsilon=0 on a zero row: 0/0, defined here as 0.
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, x / np.where(denom > 0, denom, 1.0), 0.0)
    return out * gain


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x
