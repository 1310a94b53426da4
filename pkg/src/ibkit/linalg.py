"""Dense kernels with exact analytic gradients.

Everything here is double precision and deterministic: matmul accumulates in a
fixed row-major loop order so results are bit-reproducible across runs and
platforms, and GELU uses the exact normal CDF rather than the tanh
approximation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import ndtr

__all__ = [
    "DimensionError",
    "NumericError",
    "ParamSlot",
    "matmul",
    "gelu",
    "gelu_grad",
    "layer_norm",
    "activate",
    "sigmoid",
    "softmax_rows",
    "finite_diff_gradcheck",
    "save_matrix",
    "load_matrix",
    "as_matrix",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

IBMAT_MAGIC = b"IBMAT\x00\x00\x00"


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite data."""


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array, checking finiteness."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")
    return m


@njit(cache=True)
def _matmul_kernel(a, b):
    # (i, p, j) loop order: each out[i, j] still accumulates over p in
    # ascending order (bit-identical to the naive triple loop) while the
    # contiguous inner loop vectorizes
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


def fast_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """matmul without validation, for hot loops whose shapes are pre-checked."""
    return _matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with fixed accumulation order (ascending inner index)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _matmul_kernel(a, b)


def gelu(x):
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def gelu_grad(x):
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Per-row normalization (population variance) followed by an affine map."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return gamma * xhat + beta


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def activate(kind: str, x) -> np.ndarray:
    """Elementwise sigmoid/tanh or row-wise softmax with max-subtraction."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(np.asarray(x, dtype=np.float64))
    if kind == "softmax_rows":
        return softmax_rows(x)
    raise ValueError(f"unknown activation kind {kind!r}")


@dataclass
class ParamSlot:
    """A named parameter with paired gradient storage of identical shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.atleast_2d(np.asarray(self.value, dtype=np.float64))
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.atleast_2d(np.asarray(self.grad, dtype=np.float64))
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"slot {self.name!r}: grad shape {self.grad.shape} != "
                f"value shape {self.value.shape}"
            )

    def zero_grad(self):
        self.grad[...] = 0.0

    @property
    def scalar(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"slot {self.name!r} is not scalar")
        return float(self.value.reshape(-1)[0])


def finite_diff_gradcheck(loss_fn, slots, h: float = 1e-5) -> dict:
    """Compare analytic gradients stored in each slot against central differences.

    ``loss_fn`` must be a deterministic scalar function of the current slot
    values.  The analytic gradients are expected to already be in ``slot.grad``
    (i.e. the caller has run its backward pass at the unperturbed point).
    Returns ``{slot name: max relative error}`` where the relative error is
    ``max|g_analytic - g_fd| / max(1, max|g_fd|)``.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    report = {}
    for slot in slots:
        flat = slot.value.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn())
            flat[i] = orig - h
            f_minus = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    f"non-finite loss while perturbing slot {slot.name!r} entry {i}"
                )
            fd[i] = (f_plus - f_minus) / (2.0 * h)
        fd = fd.reshape(slot.value.shape)
        denom = max(1.0, float(np.abs(fd).max(initial=0.0)))
        report[slot.name] = float(np.abs(slot.grad - fd).max(initial=0.0)) / denom
    return report


def save_matrix(path, m: np.ndarray) -> None:
    """Write a matrix in the IBMAT binary format (magic, u64 dims, f64 data, LE)."""
    m = as_matrix(m)
    with open(path, "wb") as fh:
        fh.write(matrix_to_bytes(m))


def matrix_to_bytes(m: np.ndarray) -> bytes:
    m = as_matrix(m)
    header = IBMAT_MAGIC + struct.pack("<QQ", m.shape[0], m.shape[1])
    return header + np.ascontiguousarray(m).astype("<f8").tobytes()


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 24 or buf[:8] != IBMAT_MAGIC:
        raise ValueError("not an IBMAT block (bad magic)")
    rows, cols = struct.unpack("<QQ", buf[8:24])
    expect = 24 + rows * cols * 8
    if len(buf) < expect:
        raise ValueError(f"IBMAT block truncated: need {expect} bytes, have {len(buf)}")
    data = np.frombuffer(buf[24:expect], dtype="<f8").astype(np.float64)
    return data.reshape(rows, cols)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return matrix_from_bytes(fh.read())
