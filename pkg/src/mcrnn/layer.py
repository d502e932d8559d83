"""One multi-channel recurrent layer.

K = n - 1 channels run the same cell over staggered block schedules. At step
t, channel k averages its in-block predecessor hidden states through
distance-indexed mixing matrices (W_j for edges spanning j steps, shared by
every channel and position), feeds the result to the cell, and a per-step
softmax attention over the K channel outputs produces the layer output
h_att. h_att is strictly an upward output: channel recurrences only ever see
their own channel's hidden states.

States are (batch, dim) arrays. The backward pass is exact reverse-mode over
the whole channel DAG, including the attention module. Channel computations
within a step are data-independent: they may run in any order or on a thread
pool, and all accumulation into shared buffers happens afterwards in a fixed
channel order so results are bit-identical regardless of worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cells import CellCache, CellGrads, CellParams, LSTM, cell_backward, cell_forward, init_cell_params, zero_cell_grads
from .errors import ShapeError, TapeMismatchError
from .numerics import concat, matvec, softmax, softmax_rows, uniform_init
from .topology import Topology, in_degree


@dataclass
class LayerParams:
    topo: Topology
    cell: CellParams  # one instance shared by all channels
    mix: list[np.ndarray]  # W_1..W_{n-1}, each (H, H); index = predecessor distance - 1
    attn_r: np.ndarray  # (H,)
    attn_V: np.ndarray  # (H, H + Nx)
    mix_cell_state: bool = False  # ablation: also average the LSTM cell state through W_j
    freeze_mix: bool = False  # baseline mode: keep W_j fixed (identity)

    @property
    def n_h(self) -> int:
        return self.cell.n_h

    @property
    def n_x(self) -> int:
        return self.cell.n_x

    @property
    def channels(self) -> int:
        return self.topo.channels

    def named(self, prefix: str = "") -> list[tuple[str, np.ndarray, bool]]:
        """(name, array, trainable) triples. Attention is inert when K == 1."""
        out = [(prefix + n, a, True) for n, a in self.cell.named()]
        for j, w in enumerate(self.mix, start=1):
            out.append((f"{prefix}mix.{j}", w, not self.freeze_mix))
        attn_live = self.channels > 1
        out.append((prefix + "attn_r", self.attn_r, attn_live))
        out.append((prefix + "attn_V", self.attn_V, attn_live))
        return out


@dataclass
class LayerGrads:
    cell: CellGrads
    mix: list[np.ndarray]
    attn_r: np.ndarray
    attn_V: np.ndarray

    def named(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + "U", self.cell.U), (prefix + "R", self.cell.R), (prefix + "b", self.cell.b)]
        for j, w in enumerate(self.mix, start=1):
            out.append((f"{prefix}mix.{j}", w))
        out.append((prefix + "attn_r", self.attn_r))
        out.append((prefix + "attn_V", self.attn_V))
        return out


def init_layer_params(
    topo: Topology,
    cell_kind: str,
    n_h: int,
    n_x: int,
    rng: np.random.Generator,
    identity_mix: bool = False,
    mix_cell_state: bool = False,
    freeze_mix: bool = False,
) -> LayerParams:
    """Mixing starts at (or near) the identity so training begins close to a
    conventional RNN; attention weights are uniform(-1/sqrt(H), 1/sqrt(H))."""
    cell = init_cell_params(cell_kind, n_h, n_x, rng)
    mix = []
    for _ in range(topo.n - 1):
        w = np.eye(n_h)
        if not identity_mix:
            w = w + uniform_init(rng, (n_h, n_h), 0.01)
        mix.append(w)
    a = 1.0 / np.sqrt(n_h)
    return LayerParams(
        topo=topo,
        cell=cell,
        mix=mix,
        attn_r=uniform_init(rng, (n_h,), a),
        attn_V=uniform_init(rng, (n_h, n_h + n_x), a),
        mix_cell_state=mix_cell_state,
        freeze_mix=freeze_mix,
    )


def zero_layer_grads(lp: LayerParams) -> LayerGrads:
    return LayerGrads(
        cell=zero_cell_grads(lp.cell),
        mix=[np.zeros_like(w) for w in lp.mix],
        attn_r=np.zeros_like(lp.attn_r),
        attn_V=np.zeros_like(lp.attn_V),
    )


@dataclass
class LayerCarry:
    """Trailing states carried across TBPTT windows (newest first, per channel).

    Up to n - 1 hidden states per channel can be referenced by the next
    window; cell states need the same depth only when they are mixed.
    Gradients never flow back through a carry (windows are detached).
    """

    h: list[list[np.ndarray]]
    c: list[list[np.ndarray]]


class _History:
    """Hidden/cell state lookup across the local window, the carry, and the
    zero padding for steps <= 0."""

    def __init__(self, channels: int, carry: LayerCarry | None, zero: np.ndarray):
        self.local_h: list[list[np.ndarray]] = [[] for _ in range(channels)]
        self.local_c: list[list[np.ndarray]] = [[] for _ in range(channels)]
        self.carry = carry
        self.zero = zero

    def h_at(self, k: int, step: int) -> np.ndarray:
        """State of channel k at local step (1-based); step <= 0 reads the
        carry, then the zero pad."""
        if step >= 1:
            return self.local_h[k - 1][step - 1]
        if self.carry is not None:
            back = -step  # 0 -> newest carried state
            if back < len(self.carry.h[k - 1]):
                return self.carry.h[k - 1][back]
        return self.zero

    def c_at(self, k: int, step: int) -> np.ndarray:
        if step >= 1:
            return self.local_c[k - 1][step - 1]
        if self.carry is not None:
            back = -step
            if back < len(self.carry.c[k - 1]):
                return self.carry.c[k - 1][back]
        return self.zero


@dataclass
class LayerTape:
    """Per-step, per-channel record of the forward pass."""

    t0: int
    xs: list[np.ndarray]
    caches: list[list[CellCache]]  # [t][k]
    attn_u: list[list[np.ndarray] | None]  # tanh(V [h;x]) per channel, None when K == 1
    alpha: list[np.ndarray]  # (B, K) per step
    h_att: list[np.ndarray]
    hist: _History
    batch: int


def temporal_input(lp: LayerParams, hist: _History, k: int, t_abs: int, t_local: int) -> np.ndarray:
    """Eq. of the temporal input: the 1/m-scaled sum of W_j h_{t-j} over the
    in-block predecessors; zero-padded steps contribute zero but still count
    toward m."""
    m = in_degree(lp.topo, k, t_abs)
    s = None
    for j in range(1, m + 1):
        hv = hist.h_at(k, t_local - j)
        if hv is hist.zero:
            continue
        term = hv @ lp.mix[j - 1].T
        s = term if s is None else s + term
    if s is None:
        s = np.zeros((hist.zero.shape[0], lp.n_h))
    return s / m


def attention_logit(lp: LayerParams, h_k: np.ndarray, x: np.ndarray) -> float:
    """Scalar channel logit r . tanh(V [h; x]) for single vectors."""
    if h_k.ndim != 1 or x.ndim != 1:
        raise ShapeError("attention_logit takes single vectors; the layer uses the batched path")
    return float(lp.attn_r @ np.tanh(matvec(lp.attn_V, concat(h_k, x))))


def aggregate(lp: LayerParams, hs: list[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-weighted combination of the K channel states (single vectors)."""
    e = np.array([attention_logit(lp, h, x) for h in hs])
    alpha = softmax(e)
    h_att = sum(a * h for a, h in zip(alpha, hs))
    return h_att, alpha


def make_carry(lp: LayerParams, batch: int) -> LayerCarry:
    return LayerCarry(h=[[] for _ in range(lp.channels)], c=[[] for _ in range(lp.channels)])


def _channel_step(lp, hist, x, k, t_abs, t_local):
    """Pure per-channel work for one forward step."""
    s = temporal_input(lp, hist, k, t_abs, t_local)
    c_prev = None
    if lp.cell.kind == LSTM:
        if lp.mix_cell_state:
            m = in_degree(lp.topo, k, t_abs)
            c_prev = np.zeros((x.shape[0], lp.n_h))
            for j in range(1, m + 1):
                cv = hist.c_at(k, t_local - j)
                if cv is not hist.zero:
                    c_prev += cv @ lp.mix[j - 1].T
            c_prev /= m
        else:
            c_prev = hist.c_at(k, t_local - 1)
            if c_prev is hist.zero:
                c_prev = np.zeros((x.shape[0], lp.n_h))
    return cell_forward(lp.cell, s, x, c_prev)


def layer_forward(
    lp: LayerParams,
    xs: list[np.ndarray],
    t0: int = 0,
    carry: LayerCarry | None = None,
    workers: int = 1,
    channel_order: list[int] | None = None,
) -> tuple[list[np.ndarray], LayerTape]:
    """Run the layer over T steps at absolute positions t0+1 .. t0+T.

    Returns the per-step attention-aggregated outputs and the tape for the
    backward pass. `carry` supplies trailing states from the previous window.
    """
    if not xs:
        raise ShapeError("layer_forward needs at least one step")
    B = xs[0].shape[0]
    for x in xs:
        if x.ndim != 2 or x.shape != (B, lp.n_x):
            raise ShapeError(f"layer input must be ({B}, {lp.n_x}), got {x.shape}")
    K = lp.channels
    order = channel_order if channel_order is not None else list(range(1, K + 1))
    hist = _History(K, carry, np.zeros((B, lp.n_h)))
    tape = LayerTape(t0=t0, xs=xs, caches=[], attn_u=[], alpha=[], h_att=[], hist=hist, batch=B)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for ti in range(1, len(xs) + 1):
            t_abs = t0 + ti
            x = xs[ti - 1]
            results: dict[int, tuple] = {}
            if pool is not None:
                futs = {k: pool.submit(_channel_step, lp, hist, x, k, t_abs, ti) for k in order}
                for k in order:
                    results[k] = futs[k].result()
            else:
                for k in order:
                    results[k] = _channel_step(lp, hist, x, k, t_abs, ti)
            caches_t = []
            for k in range(1, K + 1):
                h, c, cache = results[k]
                hist.local_h[k - 1].append(h)
                hist.local_c[k - 1].append(c if c is not None else hist.zero)
                caches_t.append(cache)
            tape.caches.append(caches_t)

            if K == 1:
                # softmax over one logit is exactly 1; skip the inert module
                tape.attn_u.append(None)
                tape.alpha.append(np.ones((B, 1)))
                tape.h_att.append(caches_t[0].h)
            else:
                us = []
                e = np.empty((B, K))
                for k in range(1, K + 1):
                    z = np.concatenate([caches_t[k - 1].h, x], axis=1)
                    u = np.tanh(z @ lp.attn_V.T)
                    us.append(u)
                    e[:, k - 1] = u @ lp.attn_r
                alpha = softmax_rows(e)
                h_att = np.zeros((B, lp.n_h))
                for k in range(K):
                    h_att += alpha[:, k : k + 1] * caches_t[k].h
                tape.attn_u.append(us)
                tape.alpha.append(alpha)
                tape.h_att.append(h_att)
    finally:
        if pool is not None:
            pool.shutdown()
    return tape.h_att, tape


def carry_out(lp: LayerParams, tape: LayerTape) -> LayerCarry:
    """Trailing states of this window, for the next window's lead-in."""
    depth = lp.topo.n - 1
    T = len(tape.xs)
    carry = make_carry(lp, tape.batch)
    for k in range(1, lp.channels + 1):
        for back in range(depth):
            step = T - back
            hv = tape.hist.h_at(k, step)
            cv = tape.hist.c_at(k, step)
            carry.h[k - 1].append(np.array(hv, copy=True))
            carry.c[k - 1].append(np.array(cv, copy=True))
    return carry


def _channel_back(lp, tape, k, ti, dh_total, dc_next):
    """Pure per-channel work for one backward step; returns everything the
    canonical-order accumulation loop needs."""
    cache = tape.caches[ti - 1][k - 1]
    cgrads, ds, dx_c, dc_prev = cell_backward(lp.cell, cache, dh_total, dc_next)
    return cgrads, ds, dx_c, dc_prev


def layer_backward(
    lp: LayerParams,
    tape: LayerTape,
    grad_h_att: list[np.ndarray],
    workers: int = 1,
    channel_order: list[int] | None = None,
    edge_log: list[tuple[int, int, int]] | None = None,
) -> tuple[LayerGrads, list[np.ndarray]]:
    """Exact gradients of the layer given upstream gradients on each h_att.

    Every h_{t-j} accumulates attention and cell gradients from its own step
    plus (1/m_{t'}) W_{j'}^T ds_{t'} from each successor t'. Gradients into
    the carry or the zero padding are dropped (windows are detached). If
    `edge_log` is given, every in-window recurrent accumulation appends
    (channel, absolute target step, distance).
    """
    T = len(tape.xs)
    if len(grad_h_att) != T:
        raise TapeMismatchError(f"got {len(grad_h_att)} upstream gradients for a {T}-step tape")
    K = lp.channels
    B = tape.batch
    H = lp.n_h
    order = channel_order if channel_order is not None else list(range(1, K + 1))
    is_lstm = lp.cell.kind == LSTM

    grads = zero_layer_grads(lp)
    dH = [[np.zeros((B, H)) for _ in range(T)] for _ in range(K)]
    dC = [[np.zeros((B, H)) for _ in range(T)] for _ in range(K)] if is_lstm else None
    dxs = [np.zeros((B, lp.n_x)) for _ in range(T)]

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for ti in range(T, 0, -1):
            t_abs = tape.t0 + ti
            g_att = grad_h_att[ti - 1]
            x = tape.xs[ti - 1]
            caches_t = tape.caches[ti - 1]

            # attention backward -> per-channel upstream dh, plus r/V/x grads
            if K == 1:
                dh_att_k = [g_att]
            else:
                alpha = tape.alpha[ti - 1]
                us = tape.attn_u[ti - 1]
                dalpha = np.empty((B, K))
                for k in range(K):
                    dalpha[:, k] = np.sum(g_att * caches_t[k].h, axis=1)
                de = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
                dh_att_k = []
                for k in range(K):
                    u = us[k]
                    grads.attn_r += u.T @ de[:, k]
                    dpre = (de[:, k : k + 1] * lp.attn_r) * (1.0 - u * u)
                    z = np.concatenate([caches_t[k].h, x], axis=1)
                    grads.attn_V += dpre.T @ z
                    dz = dpre @ lp.attn_V
                    dh_att_k.append(alpha[:, k : k + 1] * g_att + dz[:, :H])
                    dxs[ti - 1] += dz[:, H:]

            results: dict[int, tuple] = {}
            if pool is not None:
                futs = {
                    k: pool.submit(
                        _channel_back, lp, tape, k, ti,
                        dH[k - 1][ti - 1] + dh_att_k[k - 1],
                        dC[k - 1][ti - 1] if is_lstm else None,
                    )
                    for k in order
                }
                for k in order:
                    results[k] = futs[k].result()
            else:
                for k in order:
                    results[k] = _channel_back(
                        lp, tape, k, ti,
                        dH[k - 1][ti - 1] + dh_att_k[k - 1],
                        dC[k - 1][ti - 1] if is_lstm else None,
                    )

            # accumulate in fixed channel order for bit-reproducibility
            for k in range(1, K + 1):
                cgrads, ds, dx_c, dc_prev = results[k]
                grads.cell.add_(cgrads)
                dxs[ti - 1] += dx_c
                m = in_degree(lp.topo, k, t_abs)
                scale = 1.0 / m
                for j in range(1, m + 1):
                    src = ti - j
                    h_src = tape.hist.h_at(k, src)
                    if h_src is not tape.hist.zero:
                        grads.mix[j - 1] += scale * (ds.T @ h_src)
                    if src >= 1:
                        dH[k - 1][src - 1] += scale * (ds @ lp.mix[j - 1])
                        if edge_log is not None:
                            edge_log.append((k, t_abs, j))
                if is_lstm and dc_prev is not None:
                    if lp.mix_cell_state:
                        for j in range(1, m + 1):
                            src = ti - j
                            c_src = tape.hist.c_at(k, src)
                            if c_src is not tape.hist.zero:
                                grads.mix[j - 1] += scale * (dc_prev.T @ c_src)
                            if src >= 1:
                                dC[k - 1][src - 1] += scale * (dc_prev @ lp.mix[j - 1])
                    elif ti - 1 >= 1:
                        dC[k - 1][ti - 2] += dc_prev
    finally:
        if pool is not None:
            pool.shutdown()
    return grads, dxs
