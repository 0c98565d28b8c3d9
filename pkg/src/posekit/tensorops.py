"""Dense-array kernels with a fixed, reproducible reduction order.

These are the primitives everything else is built on: matrix product,
row softmax, scaled dot-product attention, and a central-difference
gradient oracle. Reductions accumulate strictly left to right over the
contracted axis (no BLAS, no pairwise reassociation), so identical inputs
produce bit-identical outputs across runs and platforms. Gradient-check
paths must run in float64; float32 is fine for sampling.

The module also owns the binary tensor file format used for checkpoints
and CLI outputs: magic "PATN", then rank and dimensions as unsigned
32-bit little-endian integers, then row-major float32 data.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, FormatError

PATN_MAGIC = b"PATN"
_MAX_RANK = 32


def require_finite(name: str, a: np.ndarray) -> None:
    """Raise DomainError if the array contains NaN or Inf."""
    if not np.isfinite(a).all():
        raise DomainError(f"{name} contains non-finite values")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m, k) by b (k, n).

    Accumulates over k strictly left to right, one rank-1 update per inner
    index, which pins the floating-point result independent of BLAS or
    thread count.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    require_finite("matmul lhs", a)
    require_finite("matmul rhs", b)
    dtype = np.result_type(a.dtype, b.dtype, np.float32)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=dtype)
    tmp = np.empty((m, n), dtype=dtype)
    for i in range(k):
        np.multiply(a[:, i, None], b[None, i, :], out=tmp)
        out += tmp
    require_finite("matmul result", out)
    return out


def softmax_rows(t: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-subtracted for stability.

    Internally computed in float64 (row sums land within 1e-12 of 1.0);
    the result is cast back to the input dtype. Row sums use a cumulative
    scan so the summation order is fixed.
    """
    t = np.asarray(t)
    if t.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D array, got shape {t.shape}")
    if t.shape[1] == 0:
        raise DimensionError("softmax over an empty row")
    require_finite("softmax input", t)
    if t.shape[0] == 0:
        return t.astype(t.dtype, copy=True)
    work = t.astype(np.float64, copy=False)
    shifted = work - work.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = np.cumsum(e, axis=1)[:, -1:]
    return (e / denom).astype(t.dtype, copy=False)


def scaled_dot_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Single-head attention; returns (output, weights).

    weights = softmax_rows(q @ k.T / sqrt(d)), output = weights @ v. The
    weight matrix is always returned because downstream part matching
    consumes it directly.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention operands must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key/value count mismatch: {k.shape} vs {v.shape}")
    if q.shape[1] < 1 or k.shape[0] < 1:
        raise DimensionError("attention needs at least one key and width >= 1")
    scale = 1.0 / np.sqrt(float(q.shape[1]))
    scores = matmul(q, k.T) * scale
    weights = softmax_rows(scores)
    out = matmul(weights, v)
    return out, weights


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of a scalar function at x.

    Evaluates (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps) per coordinate.
    This is the independent oracle used to check analytic backward passes;
    run it in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    if eps <= 0:
        raise DomainError("eps must be positive")
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += eps
        fp = float(f(xp))
        xm = x.copy()
        xm[idx] -= eps
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"function returned a non-finite value near index {idx}")
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def save_tensor(path: str | Path, a: np.ndarray) -> None:
    """Write an array to the binary tensor format (float32, little-endian)."""
    a = np.asarray(a)
    if a.ndim < 1 or a.ndim > _MAX_RANK:
        raise DimensionError(f"tensor rank {a.ndim} outside supported range")
    data = np.ascontiguousarray(a, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PATN_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        for dim in a.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(data.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    """Read an array from the binary tensor format."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != PATN_MAGIC:
        raise FormatError(f"{path}: missing tensor magic bytes")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank < 1 or rank > _MAX_RANK:
        raise FormatError(f"{path}: implausible tensor rank {rank}")
    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(shape, dtype=np.int64))
    expected = header_end + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size {len(raw) - header_end} does not match shape {shape}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=header_end, count=count)
    return flat.reshape(shape).astype(np.float32)
