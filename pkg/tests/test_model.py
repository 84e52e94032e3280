import math

import numpy as np
import pytest
import torch

from conftest import tiny_model
from mixspan.corpus import SpanExample, TaggedSequence, TokenVocab, pad_batch
from mixspan.errors import ConfigError, DataError, NumericError
from mixspan.mixda import interpolate_encodings
from mixspan.model import (
    CHECKPOINT_MAGIC,
    Model,
    ModelConfig,
    backward_and_step,
    brier,
    cross_entropy,
    finite_diff_check,
    init_params,
    load_checkpoint,
    load_into_model,
    make_optimizer,
    make_pooled_fn,
    one_hot,
    save_checkpoint,
)
from mixspan.sampling import RngStream


@pytest.fixture()
def batch(token_vocab, tagging_corpus):
    return pad_batch(tagging_corpus.examples[:3], 12, token_vocab)


class TestEncoder:
    def test_output_shape(self, tagging_model, batch):
        enc = tagging_model.encode(batch)
        assert enc.shape == (3, 12, tagging_model.config.d_model)

    def test_extra_padding_leaves_real_positions_unchanged(
        self, tagging_model, token_vocab, tagging_corpus
    ):
        short = pad_batch(tagging_corpus.examples[:3], 10, token_vocab)
        longer = pad_batch(tagging_corpus.examples[:3], 15, token_vocab)
        e_short = tagging_model.encode(short).tensor.detach().numpy()
        e_long = tagging_model.encode(longer).tensor.detach().numpy()
        mask = short.attention_mask.astype(bool)
        np.testing.assert_allclose(e_short[mask], e_long[:, :10][mask], atol=1e-12)

    def test_identical_sequences_identical_encodings(self, tagging_model, token_vocab, short_review):
        batch = pad_batch([short_review, short_review], 12, token_vocab)
        enc = tagging_model.encode(batch).tensor.detach().numpy()
        np.testing.assert_array_equal(enc[0], enc[1])

    def test_determinism_across_instances(self, token_vocab, vocab, batch):
        a = tiny_model("tagging", token_vocab, len(vocab), seed=3)
        b = tiny_model("tagging", token_vocab, len(vocab), seed=3)
        ea = a.encode(batch).tensor.detach().numpy()
        eb = b.encode(batch).tensor.detach().numpy()
        np.testing.assert_array_equal(ea, eb)

    def test_init_seed_changes_params(self, token_vocab, vocab):
        a = tiny_model("tagging", token_vocab, len(vocab), seed=3)
        b = tiny_model("tagging", token_vocab, len(vocab), seed=4)
        assert not torch.equal(a.encoder.tok_emb, b.encoder.tok_emb)

    def test_too_long_rejected(self, tagging_model, token_vocab):
        ex = TaggedSequence(tuple("a" for _ in range(30)), tuple([0] * 30))
        with pytest.raises(DataError):
            tagging_model.encode(pad_batch([ex], None, token_vocab))

    def test_span_marker_changes_encoding(self, token_vocab):
        m = tiny_model("spancls", token_vocab, 2)
        with torch.no_grad():
            m.encoder.span_emb += 1.0
        ex_a = SpanExample(tuple("The food was great .".split()), ((1, 1),), 0)
        ex_b = SpanExample(tuple("The food was great .".split()), ((3, 3),), 0)
        ea = m.encode(pad_batch([ex_a], 10, token_vocab)).tensor
        eb = m.encode(pad_batch([ex_b], 10, token_vocab)).tensor
        assert not torch.allclose(ea, eb)


class TestHeads:
    def test_tagging_rows_sum_to_one(self, tagging_model, batch):
        pred = tagging_model.predict(tagging_model.encode(batch))
        assert pred.shape == (3, 12, 5)
        sums = pred.sum(-1).detach().numpy()
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)
        assert (pred.detach().numpy() >= 0).all()

    def test_zero_weights_give_uniform(self, token_vocab, vocab, batch):
        m = tiny_model("tagging", token_vocab, len(vocab))
        with torch.no_grad():
            m.head.proj.weight.zero_()
            m.head.proj.bias.zero_()
        pred = m.predict(m.encode(batch)).detach().numpy()
        np.testing.assert_allclose(pred, 1.0 / len(vocab), atol=1e-12)

    def test_spancls_head_uses_position_zero(self, token_vocab):
        m = tiny_model("spancls", token_vocab, 3)
        ex = SpanExample(tuple("The food was great .".split()), ((1, 1),), 0)
        batch = pad_batch([ex], 10, token_vocab)
        enc = m.encode(batch)
        pred = m.predict(enc)
        assert pred.shape == (1, 3)
        # perturbing a non-pooled position must not change the prediction
        enc.tensor[0, 3, :] += 100.0
        pred2 = m.predict(enc)
        assert torch.allclose(pred, pred2)


class TestLosses:
    def test_uniform_vs_onehot(self):
        pred = torch.full((1, 3), 1.0 / 3.0, dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        mask = torch.ones(1, dtype=torch.bool)
        assert float(cross_entropy(pred, target, mask)) == pytest.approx(math.log(3))

    def test_perfect_prediction_zero(self):
        pred = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        target = pred.clone()
        assert float(cross_entropy(pred, target, torch.ones(1, dtype=torch.bool))) == 0.0

    def test_soft_target(self):
        pred = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        target = torch.tensor([[0.7, 0.3]], dtype=torch.float64)
        value = float(cross_entropy(pred, target, torch.ones(1, dtype=torch.bool)))
        assert value == pytest.approx(math.log(2))

    def test_mask_excludes_rows(self):
        pred = torch.tensor([[0.5, 0.5], [1.0, 0.0]], dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        mask = torch.tensor([True, False])
        assert float(cross_entropy(pred, target, mask)) == pytest.approx(math.log(2))

    def test_zero_prob_clamped_and_logged(self, caplog):
        import logging

        pred = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        with caplog.at_level(logging.WARNING):
            value = float(cross_entropy(pred, target, torch.ones(1, dtype=torch.bool)))
        assert value == pytest.approx(-math.log(1e-12))
        assert "clamped" in caplog.text

    def test_brier_zero_when_equal(self):
        p = torch.tensor([[0.3, 0.7]], dtype=torch.float64)
        assert float(brier(p, p.clone(), torch.ones(1, dtype=torch.bool), 2)) == 0.0

    def test_brier_worked_example(self):
        q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        p = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert float(brier(p, q, torch.ones(1, dtype=torch.bool), 2)) == pytest.approx(1.0)

    def test_brier_permutation_symmetry(self):
        q = torch.tensor([[0.8, 0.1, 0.1]], dtype=torch.float64)
        p = torch.tensor([[0.2, 0.3, 0.5]], dtype=torch.float64)
        mask = torch.ones(1, dtype=torch.bool)
        perm = [2, 0, 1]
        assert float(brier(p, q, mask, 3)) == pytest.approx(
            float(brier(p[:, perm], q[:, perm], mask, 3))
        )

    def test_one_hot_ignores_negative(self):
        out = one_hot(np.array([1, -1, 0]), 3)
        np.testing.assert_array_equal(out[1], np.zeros(3))
        np.testing.assert_array_equal(out[0], [0, 1, 0])

    def test_masked_positions_get_zero_gradient(self, tagging_model, batch):
        enc = tagging_model.encode(batch)
        enc.tensor.retain_grad()
        pred = tagging_model.predict(enc)
        n = tagging_model.config.n_labels
        target = torch.from_numpy(one_hot(batch.labels, n))
        mask = torch.from_numpy(batch.labels >= 0)
        cross_entropy(pred, target, mask).backward()
        grad = enc.tensor.grad
        dead = ~mask
        assert grad[dead].abs().max() == 0.0
        assert grad[mask].abs().max() > 0.0


class TestBackwardAndStep:
    def test_lambda_one_blocks_parent_two(self, tagging_model, batch):
        e1 = tagging_model.encode(batch)
        e2 = tagging_model.encode(batch)
        e1.tensor.retain_grad()
        e2.tensor.retain_grad()
        mixed = interpolate_encodings(e1, e2, 1.0)
        loss = tagging_model.predict(mixed).sum()
        loss.backward()
        assert e2.tensor.grad.abs().max() == 0.0
        assert e1.tensor.grad.abs().max() > 0.0

    def test_lambda_split_weights(self, tagging_model, batch):
        lam = 0.3
        e1 = tagging_model.encode(batch)
        e2 = tagging_model.encode(batch)
        e1.tensor.retain_grad()
        e2.tensor.retain_grad()
        mixed = interpolate_encodings(e1, e2, lam)
        tagging_model.predict(mixed).sum().backward()
        g1, g2 = e1.tensor.grad, e2.tensor.grad
        np.testing.assert_allclose(
            (g1 / lam).numpy(), (g2 / (1 - lam)).numpy(), rtol=1e-10
        )

    def test_half_mix_of_identical_parents_matches_plain(self, tagging_model, batch):
        def encoder_grads():
            return {
                n: p.grad.clone() for n, p in tagging_model.named_parameters() if p.grad is not None
            }

        tagging_model.zero_grad()
        plain = tagging_model.predict(tagging_model.encode(batch))
        plain.sum().backward()
        g_plain = encoder_grads()

        tagging_model.zero_grad()
        e1 = tagging_model.encode(batch)
        e2 = tagging_model.encode(batch)
        mixed = interpolate_encodings(e1, e2, 0.5)
        tagging_model.predict(mixed).sum().backward()
        g_mix = encoder_grads()

        for name, g in g_plain.items():
            np.testing.assert_allclose(g_mix[name].numpy(), g.numpy(), rtol=1e-9, atol=1e-12)

    def test_step_updates_params(self, tagging_model, batch):
        opt = make_optimizer(tagging_model, 1e-3)
        before = tagging_model.encoder.tok_emb.detach().clone()
        pred = tagging_model.predict(tagging_model.encode(batch))
        n = tagging_model.config.n_labels
        target = torch.from_numpy(one_hot(batch.labels, n))
        mask = torch.from_numpy(batch.labels >= 0)
        value = backward_and_step(cross_entropy(pred, target, mask), tagging_model, opt)
        assert value > 0
        assert not torch.equal(before, tagging_model.encoder.tok_emb)

    def test_nonfinite_loss_aborts(self, tagging_model):
        opt = make_optimizer(tagging_model, 1e-3)
        bad = tagging_model.encoder.tok_emb.sum() * float("nan")
        with pytest.raises(NumericError):
            backward_and_step(bad, tagging_model, opt)

    def test_nonfinite_gradient_aborts(self, tagging_model):
        opt = make_optimizer(tagging_model, 1e-3)
        with torch.no_grad():
            tagging_model.encoder.tok_emb[0, 0] = 0.0
        before = tagging_model.encoder.tok_emb.detach().clone()
        # sqrt has an infinite derivative at exactly zero
        loss = torch.sqrt(torch.abs(tagging_model.encoder.tok_emb)).sum()
        with pytest.raises(NumericError):
            backward_and_step(loss, tagging_model, opt)
        assert torch.equal(before, tagging_model.encoder.tok_emb)


class TestFiniteDiff:
    def test_quadratic_is_machine_exact(self, token_vocab, vocab):
        m = tiny_model("tagging", token_vocab, len(vocab), d_model=8, d_ff=8)

        def loss_fn():
            return sum((p ** 2).sum() for p in m.parameters())

        err = finite_diff_check(m, loss_fn, 20, RngStream(0))
        assert err < 1e-6

    def test_full_model_cross_entropy(self, token_vocab, vocab, tagging_corpus):
        m = tiny_model("tagging", token_vocab, len(vocab))
        batch = pad_batch(tagging_corpus.examples[:2], 12, token_vocab)
        n = m.config.n_labels
        target = torch.from_numpy(one_hot(batch.labels, n))
        mask = torch.from_numpy(batch.labels >= 0)

        def loss_fn():
            return cross_entropy(m.predict(m.encode(batch)), target, mask)

        err = finite_diff_check(m, loss_fn, 30, RngStream(1))
        assert err < 1e-3


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, token_vocab, vocab, batch):
        m = tiny_model("tagging", token_vocab, len(vocab), seed=5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, m, {"note": "test", "task": "tagging"})
        assert path.read_bytes()[:5] == CHECKPOINT_MAGIC

        tensors, echo = load_checkpoint(path)
        assert echo["note"] == "test"
        m2 = tiny_model("tagging", token_vocab, len(vocab), seed=99)
        load_into_model(m2, tensors)
        for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
            assert n1 == n2
            np.testing.assert_allclose(
                p2.detach().numpy(), p1.detach().numpy(), rtol=1e-6, atol=1e-7
            )
        p_before = m.predict(m.encode(batch)).detach().numpy()
        p_after = m2.predict(m2.encode(batch)).detach().numpy()
        np.testing.assert_allclose(p_after, p_before, atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTCK" + b"\x00" * 20)
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path, token_vocab, vocab):
        m = tiny_model("tagging", token_vocab, len(vocab))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, m, {})
        tensors, _ = load_checkpoint(path)
        other = tiny_model("tagging", token_vocab, len(vocab), d_model=8, d_ff=16)
        with pytest.raises(DataError):
            load_into_model(other, tensors)


class TestPooledFn:
    def test_shapes_and_determinism(self, token_vocab, vocab):
        m = tiny_model("tagging", token_vocab, len(vocab))
        pooled = make_pooled_fn(m, token_vocab)
        out = pooled([("food",), ("average", "at", "best")])
        assert out.shape == (2, m.config.d_model)
        again = pooled([("food",), ("average", "at", "best")])
        np.testing.assert_array_equal(out, again)


class TestModelConfig:
    def test_rejects_bad_task(self):
        with pytest.raises(ConfigError):
            ModelConfig(task="parsing", vocab_size=10, n_labels=3)

    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ConfigError):
            ModelConfig(task="tagging", vocab_size=10, n_labels=3, d_model=0)
