"""Model stack: loss heads, masking, tying, checkpoints, size matching."""

import numpy as np
import pytest

from mcrnn.errors import DataError, ShapeError
from mcrnn.model import (
    AddingBatch,
    Batch,
    Model,
    load_checkpoint,
    matched_hidden_size,
    perplexity,
    save_checkpoint,
)
from mcrnn.numerics import make_rng


def lm_model(seed=0, V=11, H=6, n=3, layers=1, tie=False, dropout=0.0, cell="vanilla"):
    return Model.create(
        head="softmax", n=n, cell_kind=cell, n_layers=layers, n_h=H,
        n_e=H if tie else 4, vocab_size=V, seed=seed, tie_weights=tie, dropout_p=dropout,
    )


def token_batch(seed=0, B=3, T=5, V=11, mask=None):
    rng = make_rng((seed, 99))
    return Batch(
        inputs=rng.integers(0, V, size=(B, T)),
        targets=rng.integers(0, V, size=(B, T)),
        mask=mask,
    )


class TestPerplexity:
    def test_zero_loss(self):
        assert perplexity(0.0) == 1.0

    def test_ln2(self):
        assert perplexity(np.log(2.0)) == pytest.approx(2.0, abs=1e-15)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            perplexity(-0.1)


def test_all_zero_parameters_predict_uniformly():
    """With every tensor zeroed the softmax is uniform: loss = ln V, ppl = V."""
    m = lm_model(V=13)
    for _, a, _ in m.named_params():
        a[...] = 0.0
    loss, _ = m.forward_loss(token_batch(V=13), mode="eval")
    assert loss == pytest.approx(np.log(13.0), abs=1e-12)
    assert perplexity(loss) == pytest.approx(13.0, abs=1e-9)


def test_mse_head_zero_model_oracle():
    m = Model.create(head="mse", n=4, cell_kind="lstm", n_layers=1, n_h=5,
                     n_e=None, vocab_size=None, seed=1, in_dim=2)
    for _, a, _ in m.named_params():
        a[...] = 0.0
    rng = make_rng(2)
    batch = AddingBatch(features=rng.normal(size=(4, 6, 2)), targets=np.array([1.0, 2.0, 3.0, 4.0]))
    loss, tape = m.forward_loss(batch, mode="eval")
    assert loss == pytest.approx(np.mean(batch.targets ** 2), abs=1e-12)
    grads = m.backward(tape)
    # d/d out_b of mean (b - y)^2 at b = 0 is -2 mean(y)
    assert grads["out_b"][0] == pytest.approx(-2.0 * batch.targets.mean(), abs=1e-12)


class TestMasking:
    def test_zero_masked_targets_are_inert(self):
        m = lm_model(seed=3)
        mask = np.ones((3, 5))
        mask[:, 2] = 0.0
        b1 = token_batch(seed=4, mask=mask)
        b2 = Batch(inputs=b1.inputs.copy(), targets=b1.targets.copy(), mask=mask)
        b2.targets[:, 2] = 0  # garbage under the zero mask
        l1, t1 = m.forward_loss(b1, mode="eval")
        l2, t2 = m.forward_loss(b2, mode="eval")
        assert l1 == l2
        g1 = m.backward(t1)
        g2 = m.backward(t2)
        for name in g1:
            np.testing.assert_array_equal(g1[name], g2[name], err_msg=name)

    def test_duplicated_batch_keeps_mean_loss_and_grads(self):
        m = lm_model(seed=5)
        b = token_batch(seed=6)
        double = Batch(
            inputs=np.concatenate([b.inputs, b.inputs]),
            targets=np.concatenate([b.targets, b.targets]),
        )
        l1, t1 = m.forward_loss(b, mode="eval")
        l2, t2 = m.forward_loss(double, mode="eval")
        assert l2 == pytest.approx(l1, abs=1e-12)
        g1 = m.backward(t1)
        g2 = m.backward(t2)
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], atol=1e-12, err_msg=name)

    def test_all_zero_mask_rejected(self):
        m = lm_model()
        with pytest.raises(DataError):
            m.forward_loss(token_batch(mask=np.zeros((3, 5))), mode="eval")


class TestValidation:
    def test_tying_needs_matching_dims(self):
        with pytest.raises(ValueError):
            Model.create(head="softmax", n=3, cell_kind="vanilla", n_layers=1,
                         n_h=6, n_e=4, vocab_size=9, seed=0, tie_weights=True)

    def test_unknown_head(self):
        with pytest.raises(ValueError):
            Model.create(head="argmax", n=3, cell_kind="vanilla", n_layers=1,
                         n_h=4, n_e=4, vocab_size=5, seed=0)

    def test_out_of_range_token(self):
        m = lm_model(V=7)
        bad = token_batch(V=7)
        bad.inputs[0, 0] = 7
        with pytest.raises(DataError):
            m.forward_loss(bad, mode="eval")

    def test_bad_input_rank(self):
        m = lm_model()
        with pytest.raises(ShapeError):
            m.forward_loss(Batch(inputs=np.zeros(5, dtype=int), targets=np.zeros(5, dtype=int)))

    def test_bad_feature_shape(self):
        m = Model.create(head="mse", n=2, cell_kind="vanilla", n_layers=1, n_h=4,
                         n_e=None, vocab_size=None, seed=0, in_dim=2)
        with pytest.raises(ShapeError):
            m.forward_loss(AddingBatch(features=np.zeros((2, 5, 3)), targets=np.zeros(2)))

    def test_dropout_needs_rng_in_train_mode(self):
        m = lm_model(layers=2, dropout=0.5)
        with pytest.raises(ValueError):
            m.forward_loss(token_batch(), mode="train")

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            lm_model().forward_loss(token_batch(), mode="test")


class TestDropout:
    def test_eval_ignores_dropout(self):
        m = lm_model(seed=7, layers=2, dropout=0.4)
        b = token_batch(seed=8)
        l1, _ = m.forward_loss(b, mode="eval")
        l2, _ = m.forward_loss(b, mode="eval", rng=make_rng(0))
        assert l1 == l2

    def test_train_mask_changes_loss_and_is_seeded(self):
        m = lm_model(seed=7, layers=2, dropout=0.4)
        b = token_batch(seed=8)
        le, _ = m.forward_loss(b, mode="eval")
        lt1, _ = m.forward_loss(b, mode="train", rng=make_rng(5))
        lt2, _ = m.forward_loss(b, mode="train", rng=make_rng(5))
        lt3, _ = m.forward_loss(b, mode="train", rng=make_rng(6))
        assert lt1 == lt2
        assert lt1 != le
        assert lt1 != lt3


class TestTying:
    def test_tied_model_has_no_separate_projection(self):
        m = lm_model(tie=True)
        names = [n for n, _, _ in m.named_params()]
        assert "out_w" not in names
        assert m.out_w is None

    def test_tied_embedding_gets_both_gradient_terms(self):
        # the tied tensor is used twice; its gradient must differ from the
        # pure-embedding gradient of an untied clone with equal weights
        mt = lm_model(seed=9, tie=True, H=6)
        mu = Model.create(head="softmax", n=3, cell_kind="vanilla", n_layers=1,
                          n_h=6, n_e=6, vocab_size=11, seed=9, tie_weights=False)
        mu.emb[...] = mt.emb
        mu.out_w[...] = mt.emb
        for (na, a, _), (nb, barr, _) in zip(
            [p for p in mu.named_params() if p[0].startswith("layers.")],
            [p for p in mt.named_params() if p[0].startswith("layers.")],
        ):
            a[...] = barr
        b = token_batch(seed=10)
        lt, tt = mt.forward_loss(b, mode="eval")
        lu, tu = mu.forward_loss(b, mode="eval")
        assert lt == pytest.approx(lu, abs=1e-14)
        gt = mt.backward(tt)
        gu = mu.backward(tu)
        np.testing.assert_allclose(gt["emb"], gu["emb"] + gu["out_w"], atol=1e-12)


class TestCarry:
    def test_carry_forward_advances_offset(self):
        m = lm_model(seed=11, n=4)
        b = token_batch(seed=12, T=5)
        carry = m.init_carry(3)
        assert carry.t0 == 0
        _, tape = m.forward_loss(b, mode="eval", carry=carry)
        nxt = m.carry_forward(tape, carry)
        assert nxt.t0 == 5
        assert len(nxt.layers) == 1

    def test_windowed_forward_matches_full(self):
        m = lm_model(seed=13, n=4, cell="lstm")
        full = token_batch(seed=14, T=8)
        lf, _ = m.forward_loss(full, mode="eval")
        carry = m.init_carry(3)
        losses = []
        for lo in (0, 4):
            part = Batch(inputs=full.inputs[:, lo : lo + 4], targets=full.targets[:, lo : lo + 4])
            l, tape = m.forward_loss(part, mode="eval", carry=carry)
            carry = m.carry_forward(tape, carry)
            losses.append(l)
        assert 0.5 * (losses[0] + losses[1]) == pytest.approx(lf, abs=1e-12)


class TestCheckpoint:
    def test_round_trip_is_exact_and_deterministic(self, tmp_path):
        m = lm_model(seed=15, n=4, tie=True, H=6)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(str(p1), m, extra_meta={"note": "x"})
        loaded, meta = load_checkpoint(str(p1))
        assert meta["note"] == "x"
        for (na, a, ta), (nb, barr, tb) in zip(m.named_params(), loaded.named_params()):
            assert na == nb and ta == tb
            np.testing.assert_array_equal(a, barr, err_msg=na)
        save_checkpoint(str(p2), loaded)
        save_again = tmp_path / "c.ckpt"
        save_checkpoint(str(save_again), m)
        assert p2.read_bytes() == save_again.read_bytes()

    def test_rejects_non_checkpoint(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"not a checkpoint at all")
        with pytest.raises(DataError):
            load_checkpoint(str(p))

    def test_loaded_model_reproduces_loss(self, tmp_path):
        m = lm_model(seed=16, cell="lstm")
        b = token_batch(seed=17)
        want, _ = m.forward_loss(b, mode="eval")
        p = tmp_path / "m.ckpt"
        save_checkpoint(str(p), m)
        loaded, _ = load_checkpoint(str(p))
        got, _ = loaded.forward_loss(b, mode="eval")
        assert got == want


class TestMatchedHiddenSize:
    def test_smallest_size_reaching_target(self):
        assert matched_hidden_size(lambda h: h * h, target=37) == 7
        assert matched_hidden_size(lambda h: h * h, target=36) == 6

    def test_unreachable_target(self):
        with pytest.raises(ValueError):
            matched_hidden_size(lambda h: h, target=10, lo=2, hi=5)


def test_trainable_param_count_excludes_frozen():
    m = Model.create(head="softmax", n=2, cell_kind="vanilla", n_layers=1, n_h=5,
                     n_e=4, vocab_size=9, seed=0, identity_mix=True, freeze_mix=True)
    total = sum(a.size for _, a, _ in m.named_params())
    trainable = m.trainable_param_count()
    frozen = {n: a for n, a, t in m.named_params() if not t}
    # frozen identity mix and the inert single-channel attention
    assert set(frozen) == {"layers.0.mix.1", "layers.0.attn_r", "layers.0.attn_V"}
    assert trainable == total - sum(a.size for a in frozen.values())
