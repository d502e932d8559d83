"""Multi-channel layer: temporal input arithmetic, attention simplex,
worker/order invariance, and the n=2 degenerate equivalence against
textbook single-chain implementations written out in this file."""

import numpy as np
import pytest

from mcrnn.errors import ShapeError, TapeMismatchError
from mcrnn.layer import (
    LayerCarry,
    _History,
    aggregate,
    attention_logit,
    carry_out,
    init_layer_params,
    layer_backward,
    layer_forward,
    make_carry,
    temporal_input,
)
from mcrnn.numerics import make_rng, sigmoid_vec, softmax_rows
from mcrnn.topology import Topology


def small_layer(n=3, kind="vanilla", H=3, Nx=2, seed=0, **kw):
    return init_layer_params(Topology(n), kind, H, Nx, make_rng(seed), **kw)


def run_loss(lp, xs, ws, carry=None, workers=1, order=None):
    """Scalar probe loss sum_t w_t . h_att_t and its layer gradients."""
    outs, tape = layer_forward(lp, xs, carry=carry, workers=workers, channel_order=order)
    loss = sum(float(np.sum(w * h)) for w, h in zip(ws, outs))
    grads, dxs = layer_backward(lp, tape, [w.copy() for w in ws], workers=workers, channel_order=order)
    return loss, grads, dxs, tape


class TestTemporalInput:
    def test_two_predecessor_average(self):
        lp = small_layer(n=3, H=2, Nx=1)
        lp.mix[0] = np.eye(2)
        lp.mix[1] = np.array([[0.0, 1.0], [1.0, 0.0]])
        hist = _History(2, None, np.zeros((1, 2)))
        hist.local_h[0] = [np.array([[2.0, 4.0]]), np.array([[1.0, 3.0]])]
        # channel 1, step 3 has m=2: (W1 h2 + W2 h1) / 2 = ([1,3] + [4,2]) / 2
        s = temporal_input(lp, hist, k=1, t_abs=3, t_local=3)
        np.testing.assert_allclose(s, [[2.5, 2.5]], atol=1e-15)

    def test_padding_counts_toward_m(self):
        lp = small_layer(n=3, H=2, Nx=1)
        lp.mix[0] = np.eye(2)
        hist = _History(2, None, np.zeros((1, 2)))
        hist.local_h[1] = [np.array([[2.0, 2.0]])]
        # channel 2, step 2 has m=2 but one predecessor is the zero pad:
        # the sum has a single term yet is still divided by 2
        s = temporal_input(lp, hist, k=2, t_abs=2, t_local=2)
        np.testing.assert_allclose(s, [[1.0, 1.0]], atol=1e-15)

    def test_all_padding_is_zero(self):
        lp = small_layer(n=3, H=2, Nx=1)
        hist = _History(2, None, np.zeros((1, 2)))
        s = temporal_input(lp, hist, k=1, t_abs=1, t_local=1)
        np.testing.assert_array_equal(s, np.zeros((1, 2)))


class TestAttention:
    def test_alpha_is_on_the_simplex(self):
        rng = make_rng(5)
        for n in (3, 4, 5):
            lp = small_layer(n=n, H=4, Nx=3, seed=n)
            xs = [rng.normal(size=(2, 3)) for _ in range(6)]
            _, tape = layer_forward(lp, xs)
            for alpha in tape.alpha:
                assert alpha.shape == (2, n - 1)
                np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
                assert np.all(alpha > 0.0) and np.all(alpha < 1.0)

    def test_logit_shift_invariance(self):
        lp = small_layer(n=4, H=4, Nx=3, seed=9)
        rng = make_rng(6)
        xs = [rng.normal(size=(2, 3)) for _ in range(4)]
        _, tape = layer_forward(lp, xs)
        for ti, x in enumerate(xs):
            e = np.empty((2, 3))
            for k in range(3):
                z = np.concatenate([tape.caches[ti][k].h, x], axis=1)
                e[:, k] = np.tanh(z @ lp.attn_V.T) @ lp.attn_r
            np.testing.assert_allclose(softmax_rows(e + 7.3), tape.alpha[ti], atol=1e-12)

    def test_aggregate_matches_layer_path(self):
        lp = small_layer(n=4, H=4, Nx=3, seed=2)
        rng = make_rng(7)
        xs = [rng.normal(size=(1, 3)) for _ in range(3)]
        outs, tape = layer_forward(lp, xs)
        for ti, x in enumerate(xs):
            hs = [tape.caches[ti][k].h[0] for k in range(3)]
            h_ref, a_ref = aggregate(lp, hs, x[0])
            np.testing.assert_allclose(h_ref, outs[ti][0], atol=1e-14)
            np.testing.assert_allclose(a_ref, tape.alpha[ti][0], atol=1e-14)

    def test_logit_rejects_batched_input(self):
        lp = small_layer()
        with pytest.raises(ShapeError):
            attention_logit(lp, np.zeros((2, 3)), np.zeros(2))

    def test_single_channel_shortcut(self):
        lp = small_layer(n=2, H=3, Nx=2)
        xs = [make_rng(1).normal(size=(2, 2)) for _ in range(3)]
        outs, tape = layer_forward(lp, xs)
        for ti in range(3):
            assert tape.attn_u[ti] is None
            np.testing.assert_array_equal(tape.alpha[ti], 1.0)
            assert outs[ti] is tape.caches[ti][0].h

    def test_attention_marked_inert_for_single_channel(self):
        flags = {name: t for name, _, t in small_layer(n=2).named()}
        assert flags["attn_r"] is False and flags["attn_V"] is False
        flags = {name: t for name, _, t in small_layer(n=3).named()}
        assert flags["attn_r"] is True and flags["attn_V"] is True


class TestOrderInvariance:
    def test_workers_and_channel_order_are_bitwise_neutral(self):
        lp = small_layer(n=4, kind="lstm", H=5, Nx=3, seed=4)
        rng = make_rng(8)
        xs = [rng.normal(size=(3, 3)) for _ in range(6)]
        ws = [rng.normal(size=(3, 5)) for _ in range(6)]
        ref_loss, ref_grads, ref_dxs, _ = run_loss(lp, xs, ws)
        for workers, order in [(3, None), (1, [3, 1, 2]), (2, [2, 3, 1])]:
            loss, grads, dxs, _ = run_loss(lp, xs, ws, workers=workers, order=order)
            assert loss == ref_loss
            for (na, a), (nb, b) in zip(ref_grads.named(), grads.named()):
                assert na == nb
                np.testing.assert_array_equal(a, b, err_msg=na)
            for a, b in zip(ref_dxs, dxs):
                np.testing.assert_array_equal(a, b)


class TestWindowing:
    def test_two_windows_with_carry_match_full_forward(self):
        lp = small_layer(n=4, kind="lstm", H=4, Nx=2, seed=3)
        rng = make_rng(9)
        xs = [rng.normal(size=(2, 2)) for _ in range(8)]
        full, _ = layer_forward(lp, xs)
        out1, tape1 = layer_forward(lp, xs[:4], t0=0)
        carry = carry_out(lp, tape1)
        out2, _ = layer_forward(lp, xs[4:], t0=4, carry=carry)
        for a, b in zip(full, out1 + out2):
            np.testing.assert_array_equal(a, b)

    def test_carry_depth_covers_shorter_windows(self):
        # a window shorter than n-1 must chain through the previous carry
        lp = small_layer(n=4, H=3, Nx=2, seed=6)
        rng = make_rng(10)
        xs = [rng.normal(size=(1, 2)) for _ in range(9)]
        full, _ = layer_forward(lp, xs)
        outs = []
        carry = None
        t0 = 0
        for piece in (xs[:2], xs[2:4], xs[4:6], xs[6:]):
            o, tape = layer_forward(lp, piece, t0=t0, carry=carry)
            carry = carry_out(lp, tape)
            outs.extend(o)
            t0 += len(piece)
        for a, b in zip(full, outs):
            np.testing.assert_array_equal(a, b)

    def test_empty_input_rejected(self):
        with pytest.raises(ShapeError):
            layer_forward(small_layer(), [])

    def test_backward_length_mismatch(self):
        lp = small_layer()
        xs = [np.zeros((1, 2)) for _ in range(3)]
        _, tape = layer_forward(lp, xs)
        with pytest.raises(TapeMismatchError):
            layer_backward(lp, tape, [np.zeros((1, 3))] * 2)


class TestEdgeLocality:
    def test_recurrent_edges_respect_block_schedule(self):
        lp = small_layer(n=4, H=3, Nx=2, seed=1)
        rng = make_rng(11)
        xs = [rng.normal(size=(1, 2)) for _ in range(7)]
        ws = [rng.normal(size=(1, 3)) for _ in range(7)]
        _, tape = layer_forward(lp, xs)
        log: list = []
        layer_backward(lp, tape, ws, edge_log=log)
        assert log
        from mcrnn.topology import in_degree
        for k, t_abs, j in log:
            assert 1 <= j <= 3
            assert j <= in_degree(lp.topo, k, t_abs)
            assert t_abs - j >= 1  # only in-window sources are logged


# --- n=2 degenerate equivalence ------------------------------------------
# Reference implementations live in refs.py: plain single-chain recurrences
# with their standard BPTT, sharing no code with the layer under test.

from refs import ref_lstm, ref_vanilla  # noqa: E402


@pytest.mark.parametrize("kind", ["vanilla", "lstm"])
@pytest.mark.parametrize("seed", range(5))
def test_degenerate_n2_matches_conventional(kind, seed):
    """n=2 with identity W_1 is a conventional net: forward 1e-12, grads 1e-10."""
    rng = make_rng((seed, 40))
    H, Nx, T = 5, 3, 7
    lp = init_layer_params(Topology(2), kind, H, Nx, rng, identity_mix=True, freeze_mix=True)
    xs = [rng.normal(size=(1, Nx)) for _ in range(T)]
    ws = [rng.normal(size=(1, H)) for _ in range(T)]
    loss, grads, dxs, _ = run_loss(lp, xs, ws)

    ref = ref_vanilla if kind == "vanilla" else ref_lstm
    ref_loss, ref_grads, ref_dxs = ref(lp.cell.U, lp.cell.R, lp.cell.b, [x[0] for x in xs], [w[0] for w in ws])

    outs, _ = layer_forward(lp, xs)
    hs_ref = []
    h = np.zeros(H)
    c = np.zeros(H)
    for x in xs:
        if kind == "vanilla":
            h = np.tanh(lp.cell.U @ x[0] + lp.cell.R @ h + lp.cell.b)
        else:
            z = lp.cell.U @ x[0] + lp.cell.R @ h + lp.cell.b
            i, f = sigmoid_vec(z[:H]), sigmoid_vec(z[H : 2 * H])
            g, o = np.tanh(z[2 * H : 3 * H]), sigmoid_vec(z[3 * H :])
            c = f * c + i * g
            h = o * np.tanh(c)
        hs_ref.append(h)
    for got, want in zip(outs, hs_ref):
        np.testing.assert_allclose(got[0], want, atol=1e-12)

    assert loss == pytest.approx(ref_loss, abs=1e-12)
    for name in ("U", "R", "b"):
        got = dict(grads.named())[name]
        np.testing.assert_allclose(got, ref_grads[name], atol=1e-10, err_msg=name)
    for got, want in zip(dxs, ref_dxs):
        np.testing.assert_allclose(got[0], want, atol=1e-10)


def test_cell_state_mixing_gradients_match_finite_differences():
    """The optional c-state mixing path stays exact under FD at 1e-6."""
    lp = small_layer(n=3, kind="lstm", H=3, Nx=2, seed=12, mix_cell_state=True)
    rng = make_rng(13)
    xs = [rng.normal(size=(1, 2)) for _ in range(5)]
    ws = [rng.normal(size=(1, 3)) for _ in range(5)]
    _, grads, _, _ = run_loss(lp, xs, ws)

    def loss():
        outs, _ = layer_forward(lp, xs)
        return sum(float(np.sum(w * h)) for w, h in zip(ws, outs))

    h = 1e-6
    for name, arr, _ in lp.named():
        analytic = dict(grads.named())[name]
        numeric = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = arr[idx]
            arr[idx] = keep + h
            up = loss()
            arr[idx] = keep - h
            dn = loss()
            arr[idx] = keep
            numeric[idx] = (up - dn) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, atol=2e-6, err_msg=name)


def test_make_carry_shapes():
    lp = small_layer(n=4)
    carry = make_carry(lp, 2)
    assert isinstance(carry, LayerCarry)
    assert len(carry.h) == 3 and all(c == [] for c in carry.h)
