"""Recurrent cell functions with exact analytic backward passes.

The cell consumes a temporal input ``s`` where a conventional RNN would use
the previous hidden state; nothing else changes. States are (batch, dim)
row-major arrays; a single sequence is just batch size 1.

Gate layout for the LSTM is row-stacked [input, forget, candidate, output],
so U is (4H, Nx), R is (4H, H) and b is (4H,).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TapeMismatchError
from .numerics import sigmoid_vec, uniform_init

VANILLA = "vanilla"
LSTM = "lstm"
CELL_KINDS = (VANILLA, LSTM)


@dataclass
class CellParams:
    kind: str
    U: np.ndarray  # input weights, (H, Nx) or (4H, Nx)
    R: np.ndarray  # recurrent weights applied to the temporal input s
    b: np.ndarray

    @property
    def n_h(self) -> int:
        return self.R.shape[1]

    @property
    def n_x(self) -> int:
        return self.U.shape[1]

    def named(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        return [(prefix + "U", self.U), (prefix + "R", self.R), (prefix + "b", self.b)]


@dataclass
class CellCache:
    """Forward intermediates needed by the backward pass."""

    kind: str
    s: np.ndarray
    x: np.ndarray
    h: np.ndarray
    # lstm only
    gates: tuple[np.ndarray, ...] = ()
    c_prev: np.ndarray | None = None
    c: np.ndarray | None = None
    tanh_c: np.ndarray | None = None


def init_cell_params(kind: str, n_h: int, n_x: int, rng: np.random.Generator) -> CellParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights; LSTM forget bias starts at 1."""
    if kind not in CELL_KINDS:
        raise ValueError(f"unknown cell kind {kind!r}")
    a = 1.0 / np.sqrt(n_h)
    g = 4 if kind == LSTM else 1
    p = CellParams(
        kind=kind,
        U=uniform_init(rng, (g * n_h, n_x), a),
        R=uniform_init(rng, (g * n_h, n_h), a),
        b=np.zeros(g * n_h),
    )
    if kind == LSTM:
        p.b[n_h : 2 * n_h] = 1.0
    return p


def _check_dims(p: CellParams, s: np.ndarray, x: np.ndarray) -> None:
    if s.ndim != 2 or x.ndim != 2 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"cell inputs must be (batch, dim) with equal batch, got {s.shape} and {x.shape}")
    if s.shape[1] != p.n_h:
        raise ShapeError(f"temporal input dim {s.shape[1]} != cell hidden dim {p.n_h}")
    if x.shape[1] != p.n_x:
        raise ShapeError(f"cell input dim {x.shape[1]} != expected {p.n_x}")


def cell_forward(
    p: CellParams, s: np.ndarray, x: np.ndarray, c_prev: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None, CellCache]:
    """One application of the cell: returns (h, c, cache).

    vanilla: h = tanh(U x + R s + b), c is None.
    lstm:    standard gate equations with s in place of the previous hidden
             state; c_prev carries the cell state sequentially.
    """
    _check_dims(p, s, x)
    z = x @ p.U.T + s @ p.R.T + p.b
    if p.kind == VANILLA:
        h = np.tanh(z)
        return h, None, CellCache(kind=VANILLA, s=s, x=x, h=h)

    H = p.n_h
    if c_prev is None:
        c_prev = np.zeros((s.shape[0], H))
    i = sigmoid_vec(z[:, 0:H])
    f = sigmoid_vec(z[:, H : 2 * H])
    g = np.tanh(z[:, 2 * H : 3 * H])
    o = sigmoid_vec(z[:, 3 * H : 4 * H])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = CellCache(kind=LSTM, s=s, x=x, h=h, gates=(i, f, g, o), c_prev=c_prev, c=c, tanh_c=tc)
    return h, c, cache


@dataclass
class CellGrads:
    U: np.ndarray
    R: np.ndarray
    b: np.ndarray

    def add_(self, other: "CellGrads") -> None:
        self.U += other.U
        self.R += other.R
        self.b += other.b


def zero_cell_grads(p: CellParams) -> CellGrads:
    return CellGrads(U=np.zeros_like(p.U), R=np.zeros_like(p.R), b=np.zeros_like(p.b))


def cell_backward(
    p: CellParams,
    cache: CellCache,
    grad_h: np.ndarray,
    grad_c_next: np.ndarray | None = None,
) -> tuple[CellGrads, np.ndarray, np.ndarray, np.ndarray | None]:
    """Exact reverse of cell_forward.

    Returns (param grads, grad_s, grad_x, grad_c_prev); grad_c_prev is None
    for the vanilla cell. grad_c_next is the cell-state gradient arriving
    from step t + 1.
    """
    if cache.kind != p.kind:
        raise TapeMismatchError(f"cache is for a {cache.kind} cell, params are {p.kind}")
    if p.kind == VANILLA:
        dz = grad_h * (1.0 - cache.h * cache.h)
        grads = CellGrads(U=dz.T @ cache.x, R=dz.T @ cache.s, b=dz.sum(axis=0))
        return grads, dz @ p.R, dz @ p.U, None

    i, f, g, o = cache.gates
    dc = grad_h * o * (1.0 - cache.tanh_c * cache.tanh_c)
    if grad_c_next is not None:
        dc = dc + grad_c_next
    dzo = (grad_h * cache.tanh_c) * o * (1.0 - o)
    dzi = (dc * g) * i * (1.0 - i)
    dzf = (dc * cache.c_prev) * f * (1.0 - f)
    dzg = (dc * i) * (1.0 - g * g)
    dz = np.concatenate([dzi, dzf, dzg, dzo], axis=1)
    grads = CellGrads(U=dz.T @ cache.x, R=dz.T @ cache.s, b=dz.sum(axis=0))
    return grads, dz @ p.R, dz @ p.U, dc * f
