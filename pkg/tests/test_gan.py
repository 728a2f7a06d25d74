import numpy as np
import pytest

from oracles import truncated_normal_std
from stegolab.corpus import SyntheticSpec, generate_synthetic_corpus
from stegolab.gan import (Discriminator, GanConfig, Generator, load_gan, sample_latent, save_gan, train_gan)
from stegolab.tensor import Tape, Tensor, backward, gradient_check


class TestLatent:
    def test_truncated(self):
        z = sample_latent(128, 0.4, 0, batch=100)
        assert np.abs(z).max() <= 0.4

    def test_std_matches_integration_oracle(self):
        z = sample_latent(128, 0.4, 1, batch=800)  # ~10^5 draws
        oracle = truncated_normal_std(0.4)
        assert oracle == pytest.approx(0.2285, abs=1e-4)
        assert z.std() == pytest.approx(oracle, abs=0.003)
        assert abs(z.mean()) < 0.01

    def test_seeded(self):
        np.testing.assert_array_equal(sample_latent(32, 0.4, 5), sample_latent(32, 0.4, 5))

    def test_invalid(self):
        with pytest.raises(ValueError):
            sample_latent(8, 0.0, 0)


class TestGenerator:
    def setup_method(self):
        self.cfg = GanConfig(height=16, width=16, latent_dim=8, base=8, disc_width=4)
        self.g = Generator(self.cfg)

    def test_range_and_determinism(self):
        z = sample_latent(8, 0.4, 0, batch=3)
        a = self.g(z).value
        assert a.shape == (3, 16, 16, 1) and a.min() >= 0 and a.max() <= 1
        np.testing.assert_array_equal(a, self.g(z).value)
        assert self.g(z[0]).shape == (16, 16, 1)

    def test_gradient_wrt_latent(self):
        self.g.freeze()
        z = sample_latent(8, 0.4, 2)
        assert gradient_check(lambda v: self.g(v, frozen=True).mean(), z, step=1e-6) < 1e-5

    def test_gradient_finite_at_many_latents(self):
        zs = sample_latent(8, 0.4, 3, batch=1000)
        z = Tensor(zs, requires_grad=True)
        with Tape() as tape:
            loss = self.g(z, frozen=True).mean()
        g = backward(tape, loss)[z]
        assert np.all(np.isfinite(g))

    def test_latent_length_checked(self):
        with pytest.raises(ValueError):
            self.g(np.zeros(5))

    def test_discriminator_scalar_per_image(self):
        d = Discriminator(self.cfg)
        assert d(Tensor(np.zeros((4, 16, 16, 1)))).shape == (4,)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            Generator(GanConfig(height=12, width=12))


class TestTraining:
    def test_deterministic_and_checkpoint(self, tmp_path):
        imgs = generate_synthetic_corpus(SyntheticSpec(height=8, width=8), 16).images
        cfg = GanConfig(height=8, width=8, latent_dim=4, base=4, disc_width=4, epochs=1, batch_size=8)
        g1, d1, log1 = train_gan(imgs, cfg)
        g2, d2, log2 = train_gan(imgs, cfg)
        assert log1.d_loss == log2.d_loss
        save_gan(tmp_path / "gan.ckpt", g1, d1)
        g3, d3 = load_gan(tmp_path / "gan.ckpt")
        for k in g1.params:
            np.testing.assert_array_equal(g1.params[k].value, g2.params[k].value)
            np.testing.assert_array_equal(g1.params[k].value, g3.params[k].value)
        for k in d1.params:
            np.testing.assert_array_equal(d1.params[k].value, d3.params[k].value)
        log1.write_csv(tmp_path / "log.csv")
        assert (tmp_path / "log.csv").read_text().startswith("epoch,d_loss,g_loss,d_accuracy,batch_std")

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            train_gan(np.zeros((4, 8, 8, 1)), GanConfig(height=16, width=16))


@pytest.mark.slow
def test_trained_generator_matches_mean_field():
    corpus = generate_synthetic_corpus(SyntheticSpec(seed=1), 512)
    g, _, glog = train_gan(corpus.train, GanConfig(epochs=30))
    assert max(glog.d_accuracy[:5]) > 0.9
    fake = g(Tensor(np.random.default_rng(5).standard_normal((256, 32))), frozen=True).value
    r = np.corrcoef(fake.mean(axis=0).ravel(), corpus.mean_field.ravel())[0, 1]
    assert r > 0.8
