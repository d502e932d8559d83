"""Dense double-precision vector/matrix primitives.

Everything downstream works on plain float64 numpy arrays: a vector is a 1-D
array, a matrix is a 2-D row-major array. numpy supplies the arithmetic; this
module adds the strict shape contracts (no silent broadcasting) and the
numerically stable nonlinearities the recurrent layers rely on. Batched
variants treat the leading axis as independent rows and keep the same
contracts per row.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

Vector = np.ndarray  # shape (d,), float64
Matrix = np.ndarray  # shape (r, c), float64


def vector(data) -> Vector:
    """Coerce to a 1-D float64 array."""
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got array of shape {v.shape}")
    return v


def matrix(data) -> Matrix:
    """Coerce to a 2-D float64 array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {m.shape}")
    return m


def matvec(m: Matrix, v: Vector) -> Vector:
    if m.ndim != 2 or v.ndim != 1:
        raise ShapeError(f"matvec needs matrix and vector, got shapes {m.shape} and {v.shape}")
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: matrix is {m.shape[0]}x{m.shape[1]} but vector has dim {v.shape[0]}")
    return m @ v


def matmat(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmat: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def tanh_vec(v: np.ndarray) -> np.ndarray:
    return np.tanh(v)


def sigmoid_vec(v: np.ndarray) -> np.ndarray:
    """Logistic function, stable for large |v| (no overflow in exp)."""
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softmax(v: Vector) -> Vector:
    """Softmax with max-subtraction; output sums to 1 and every entry is in (0, 1]."""
    if v.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {v.shape}")
    e = np.exp(v - np.max(v))
    return e / np.sum(e)


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax for a (batch, k) matrix."""
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {m.shape}")
    e = np.exp(m - np.max(m, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def concat(a: Vector, b: Vector) -> Vector:
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"concat expects vectors, got shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b])


def axpy(alpha: float, x: Vector, y: Vector) -> Vector:
    if x.shape != y.shape:
        raise ShapeError(f"axpy: x has shape {x.shape} but y has shape {y.shape}")
    return alpha * x + y


def outer(a: Vector, b: Vector) -> Matrix:
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer expects vectors, got shapes {a.shape} and {b.shape}")
    return np.outer(a, b)


def identity(d: int) -> Matrix:
    return np.eye(d, dtype=np.float64)


def zeros(*shape: int) -> np.ndarray:
    return np.zeros(shape, dtype=np.float64)


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; identical seed gives identical draws on one machine.
    Accepts an int or a tuple of ints (for derived per-epoch/per-batch streams)."""
    if isinstance(seed, tuple):
        seed = np.random.SeedSequence(list(seed))
    return np.random.Generator(np.random.PCG64(seed))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], a: float) -> np.ndarray:
    """Uniform(-a, a) initialization used for all weight tensors."""
    return rng.uniform(-a, a, size=shape).astype(np.float64)
