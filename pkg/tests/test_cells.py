"""Cell forward arithmetic against hand-computed values, backward against
central differences. The frozen constants were produced with stdlib math on
paper-sized inputs, independent of this package."""

import numpy as np
import pytest

from mcrnn.cells import (
    CellParams,
    cell_backward,
    cell_forward,
    init_cell_params,
    zero_cell_grads,
)
from mcrnn.errors import ShapeError, TapeMismatchError
from mcrnn.numerics import make_rng


def fd_grad(f, arr, h=1e-6):
    """Central-difference gradient of scalar f wrt every entry of arr."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        keep = arr[idx]
        arr[idx] = keep + h
        up = f()
        arr[idx] = keep - h
        dn = f()
        arr[idx] = keep
        g[idx] = (up - dn) / (2.0 * h)
    return g


def test_vanilla_forward_hand_case():
    p = CellParams(kind="vanilla", U=np.array([[0.5, -1.0]]), R=np.array([[0.25, 0.75]]), b=np.array([-0.1]))
    h, c, cache = cell_forward(p, s=np.array([[0.4, -0.6]]), x=np.array([[0.2, 0.3]]))
    assert c is None
    assert h[0, 0] == pytest.approx(-0.5716699660851172, abs=1e-15)
    assert cache.h is h


def test_lstm_forward_hand_case():
    # gate rows stacked [input, forget, candidate, output], H = 1
    p = CellParams(
        kind="lstm",
        U=np.array([[0.5], [-0.25], [1.0], [0.75]]),
        R=np.array([[1.0], [2.0], [-1.0], [0.5]]),
        b=np.array([0.1, 1.0, -0.2, 0.3]),
    )
    h, c, cache = cell_forward(p, s=np.array([[0.4]]), x=np.array([[-0.3]]), c_prev=np.array([[0.2]]))
    i, f, g, o = (a[0, 0] for a in cache.gates)
    assert i == pytest.approx(0.586617578917330, abs=1e-14)
    assert f == pytest.approx(0.867035759802171, abs=1e-14)
    assert g == pytest.approx(-0.716297870199024, abs=1e-14)
    assert o == pytest.approx(0.568319983478248, abs=1e-14)
    assert c[0, 0] == pytest.approx(-0.246785770439358, abs=1e-14)
    assert h[0, 0] == pytest.approx(-0.137473687895121, abs=1e-14)


def test_lstm_missing_cell_state_defaults_to_zero():
    rng = make_rng(0)
    p = init_cell_params("lstm", 3, 2, rng)
    s = rng.normal(size=(2, 3))
    x = rng.normal(size=(2, 2))
    h1, c1, _ = cell_forward(p, s, x)
    h2, c2, _ = cell_forward(p, s, x, c_prev=np.zeros((2, 3)))
    np.testing.assert_array_equal(h1, h2)
    np.testing.assert_array_equal(c1, c2)


class TestInit:
    def test_lstm_forget_bias_is_one(self):
        p = init_cell_params("lstm", 4, 3, make_rng(1))
        np.testing.assert_array_equal(p.b[4:8], 1.0)
        np.testing.assert_array_equal(p.b[:4], 0.0)
        np.testing.assert_array_equal(p.b[8:], 0.0)

    def test_shapes_and_scale(self):
        p = init_cell_params("vanilla", 5, 7, make_rng(2))
        assert p.U.shape == (5, 7)
        assert p.R.shape == (5, 5)
        assert np.all(np.abs(p.U) <= 1.0 / np.sqrt(5))
        assert p.n_h == 5 and p.n_x == 7

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            init_cell_params("gru", 4, 4, make_rng(0))


class TestShapeChecks:
    def test_batch_mismatch(self):
        p = init_cell_params("vanilla", 3, 2, make_rng(0))
        with pytest.raises(ShapeError):
            cell_forward(p, np.zeros((2, 3)), np.zeros((3, 2)))

    def test_wrong_hidden_dim(self):
        p = init_cell_params("vanilla", 3, 2, make_rng(0))
        with pytest.raises(ShapeError):
            cell_forward(p, np.zeros((1, 4)), np.zeros((1, 2)))

    def test_tape_kind_mismatch(self):
        pv = init_cell_params("vanilla", 3, 2, make_rng(0))
        pl = init_cell_params("lstm", 3, 2, make_rng(0))
        _, _, cache = cell_forward(pv, np.zeros((1, 3)), np.zeros((1, 2)))
        with pytest.raises(TapeMismatchError):
            cell_backward(pl, cache, np.zeros((1, 3)))


@pytest.mark.parametrize("kind", ["vanilla", "lstm"])
def test_backward_matches_central_differences(kind):
    """Isolated cell gradients agree with finite differences to 1e-6."""
    rng = make_rng(11)
    H, Nx, B = 4, 3, 2
    p = init_cell_params(kind, H, Nx, rng)
    s = rng.normal(size=(B, H))
    x = rng.normal(size=(B, Nx))
    c_prev = rng.normal(size=(B, H)) if kind == "lstm" else None
    w_h = rng.normal(size=(B, H))
    w_c = rng.normal(size=(B, H)) if kind == "lstm" else None

    def loss():
        h, c, _ = cell_forward(p, s, x, None if c_prev is None else c_prev.copy())
        val = float(np.sum(h * w_h))
        if w_c is not None:
            val += float(np.sum(c * w_c))
        return val

    h, c, cache = cell_forward(p, s, x, None if c_prev is None else c_prev.copy())
    grads, grad_s, grad_x, grad_c_prev = cell_backward(p, cache, grad_h=w_h, grad_c_next=w_c)

    for name, analytic, arr in [
        ("U", grads.U, p.U),
        ("R", grads.R, p.R),
        ("b", grads.b, p.b),
        ("s", grad_s, s),
        ("x", grad_x, x),
    ]:
        numeric = fd_grad(loss, arr)
        np.testing.assert_allclose(analytic, numeric, atol=1e-6, err_msg=name)
    if kind == "lstm":
        numeric = fd_grad(loss, c_prev)
        np.testing.assert_allclose(grad_c_prev, numeric, atol=1e-6, err_msg="c_prev")


def test_zero_grads_and_accumulate():
    p = init_cell_params("vanilla", 2, 2, make_rng(3))
    g = zero_cell_grads(p)
    assert not g.U.any() and not g.R.any() and not g.b.any()
    g2 = zero_cell_grads(p)
    g2.U += 1.0
    g.add_(g2)
    np.testing.assert_array_equal(g.U, np.ones_like(p.U))
