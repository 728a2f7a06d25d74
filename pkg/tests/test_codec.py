import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stegolab.codec import (CodecConfig, CodecModel, TrainingDiverged, accuracy_loss, decode, encode,
                            evaluate_codec, hard_decision, loss_components, objective_gradient, sample_message,
                            step_weights, train_codec, train_loss)
from stegolab.corpus import SyntheticSpec, generate_synthetic_corpus
from stegolab.tensor import Tape, Tensor, backward, gradient_check

TINY = dict(g_width=4, dec_width=4, critic_width=4)


def tiny_images(n=4, size=8, seed=0):
    return generate_synthetic_corpus(SyntheticSpec(height=size, width=size, seed=seed), max(n, 2)).images[:n]


class TestMessages:
    def test_fair_bits(self):
        m = sample_message(1000, 1000, 1, 0)
        assert set(np.unique(m)) == {0.0, 1.0}
        assert 0.498 <= m.mean() <= 0.502

    def test_seeded(self):
        np.testing.assert_array_equal(sample_message(8, 8, 2, 3), sample_message(8, 8, 2, 3))
        a, b = sample_message(64, 64, 1, 1), sample_message(64, 64, 1, 2)
        assert abs(np.mean(a != b) - 0.5) < 0.03

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            sample_message(0, 8, 1, 0)


class TestLosses:
    def test_half_probability_gives_ln2(self):
        m = sample_message(4, 4, 1, 0)
        x = np.zeros((4, 4, 1))
        assert loss_components(m, np.full_like(m, 0.5), x, x)[0] == pytest.approx(math.log(2))

    def test_quality_examples(self):
        m = np.zeros((4, 4, 1))
        x = np.zeros((4, 4, 1))
        assert loss_components(m, m + 0.5, x, x)[1] == 0.0
        assert loss_components(m, m + 0.5, x, x + 0.1)[1] == pytest.approx(0.01)

    def test_confident_bits_stay_finite(self):
        m = np.array([[[1.0]], [[0.0]]])
        l_acc = loss_components(m, 1 - m, np.zeros((2, 1, 1)), np.zeros((2, 1, 1)))[0]
        assert math.isfinite(l_acc) and l_acc == pytest.approx(-math.log(1e-7))

    def test_label_flip_symmetry(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((2, 4, 4, 1))
        m = sample_message(4, 4, 1, 1, batch=2)
        a = accuracy_loss(Tensor(z), m).item()
        b = accuracy_loss(Tensor(-z), 1 - m).item()
        assert a == pytest.approx(b, abs=1e-15)

    def test_weights_strictly_increasing(self):
        w = step_weights(4, 0.8)
        assert np.all(np.diff(w) > 0) and w[-1] == 1.0
        np.testing.assert_allclose(w, [0.8**3, 0.8**2, 0.8, 1.0])


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(step_size=0), dict(decay=0.0), dict(decay=1.5), dict(quality_weight=-1),
                                     dict(iterations=0), dict(payload=5)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            CodecConfig(**bad).validate()

    def test_defaults(self):
        c = CodecConfig()
        assert (c.iterations, c.step_size, c.decay, c.quality_weight, c.critic_weight) == (3, 1.0, 0.8, 10.0, 0.0)


class TestEncodeDecode:
    def test_untrained_encoder_is_identity(self):
        model = CodecModel(CodecConfig(**TINY))
        x = tiny_images(2)
        m = sample_message(8, 8, 1, 0, batch=2)
        res = encode(x, m, model)
        np.testing.assert_array_equal(res.stego.value, x)
        assert len(res.intermediates) == 3

    def test_stego_in_unit_range_and_shapes(self):
        model = CodecModel(CodecConfig(payload=2, **TINY))
        model.params["g3.w"].value[:] = np.random.default_rng(0).standard_normal(model.params["g3.w"].shape)
        x = tiny_images(2)
        m = sample_message(8, 8, 2, 0, batch=2)
        s = encode(x, m, model).stego.value
        assert s.shape == x.shape and s.min() >= 0 and s.max() <= 1
        p = decode(s, model)
        assert p.shape == m.shape and p.min() > 0 and p.max() < 1
        np.testing.assert_array_equal(p, decode(s, model))

    def test_single_image(self):
        model = CodecModel(CodecConfig(**TINY))
        x = tiny_images(1)[0]
        res = encode(x, sample_message(8, 8, 1, 0), model)
        assert res.stego.shape == x.shape
        assert decode(res.stego.value, model).shape == (8, 8, 1)

    def test_message_shape_mismatch(self):
        model = CodecModel(CodecConfig(**TINY))
        with pytest.raises(ValueError):
            encode(tiny_images(1), sample_message(4, 4, 1, 0, batch=1), model)

    def test_non_finite_decoder_rejected(self):
        model = CodecModel(CodecConfig(**TINY))
        model.params["d1.w"].value[:] = np.nan
        with pytest.raises(FloatingPointError):
            encode(tiny_images(1), sample_message(8, 8, 1, 0, batch=1), model)

    def test_feature_replay_matches(self):
        model = CodecModel(CodecConfig(**TINY))
        model.params["g3.w"].value[:] = 0.1
        x = tiny_images(2)
        m = sample_message(8, 8, 1, 0, batch=2)
        a = encode(x, m, model)
        b = encode(x, m, model, features=a.features)
        np.testing.assert_array_equal(a.stego.value, b.stego.value)

    def test_objective_gradient_against_finite_differences(self):
        model = CodecModel(CodecConfig(**TINY))
        x = 0.25 + 0.5 * tiny_images(1)
        m = sample_message(8, 8, 1, 4, batch=1)
        delta = np.random.default_rng(1).normal(0, 0.01, x.shape)
        g = objective_gradient(model, x, delta, m)
        from stegolab import ops as F

        def objective(d):
            s = F.clamp01_ste(Tensor(x) + d)
            acc = F.bce_with_logits(model.decoder_logits(s, frozen=True), Tensor(m)).mean()
            return (acc + F.mse(d, np.zeros_like(x)) * model.config.quality_weight) * 64.0

        assert gradient_check(objective, delta, step=1e-5) < 1e-6
        d = Tensor(delta.copy(), requires_grad=True)
        with Tape() as tape:
            loss = objective(d)
        np.testing.assert_allclose(g, backward(tape, loss)[d], rtol=1e-10, atol=1e-14)

    def test_pinned_messages(self):
        model = CodecModel(CodecConfig(**TINY))
        ev = evaluate_codec(model, tiny_images(3), seed=0, pin_message=True)
        assert np.array_equal(ev.messages[0], ev.messages[2])
        ev = evaluate_codec(model, tiny_images(3), seed=0)
        assert not np.array_equal(ev.messages[0], ev.messages[2])


class TestTraining:
    def test_single_term_when_one_iteration(self):
        cfg = CodecConfig(iterations=1, decay=1.0, **TINY)
        model = CodecModel(cfg)
        x = tiny_images(2)
        m = sample_message(8, 8, 1, 0, batch=2)
        loss, parts, s = train_loss(model, x, m)
        assert loss.item() == pytest.approx(parts["acc"] + cfg.quality_weight * parts["qua"], rel=1e-12)

    def test_deterministic(self):
        cfg = CodecConfig(epochs=2, batch_size=2, **TINY)
        x = tiny_images(4)
        a, la = train_codec(x, cfg)
        b, lb = train_codec(x, cfg)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].value, b.params[k].value)
        assert [e.error_rate for e in la.epochs] == [e.error_rate for e in lb.epochs]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self):
        model = CodecModel(CodecConfig(epochs=1, batch_size=2, **TINY))
        model.params["d3.b"].value[:] = np.inf
        with pytest.raises((TrainingDiverged, FloatingPointError)):
            train_codec(tiny_images(2), model.config, model=model)

    def test_learning_reduces_error(self):
        x = tiny_images(32, seed=1)
        cfg = CodecConfig(epochs=8, batch_size=8, g_width=8, dec_width=16, lr=3e-3)
        model, logbook = train_codec(x, cfg)
        assert logbook.epochs[-1].error_rate < logbook.epochs[0].error_rate
        assert logbook.epochs[-1].error_rate < 0.35

    def test_log_csv(self, tmp_path):
        _, logbook = train_codec(tiny_images(2), CodecConfig(epochs=1, batch_size=2, **TINY))
        logbook.write_csv(tmp_path / "log.csv")
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,L_acc,L_qua,L_crit,error_rate"

    def test_checkpoint_round_trip(self, tmp_path):
        model = CodecModel(CodecConfig(payload=3, seed=4, **TINY))
        model.save(tmp_path / "c.ckpt")
        back = CodecModel.load(tmp_path / "c.ckpt")
        assert back.config == model.config
        for k in model.params:
            np.testing.assert_array_equal(back.params[k].value, model.params[k].value)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_hard_decision_threshold(p, q):
    probs = np.array([p, q, 0.5])
    np.testing.assert_array_equal(hard_decision(probs), [p >= 0.5, q >= 0.5, 1.0])
