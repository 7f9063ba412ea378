import numpy as np
import pytest

from memaudit import autoencoder as ae
from memaudit import volumes as vol
from memaudit.numerics import ShapeError, Tensor, grad_check, l1_loss

TINY = ae.AutoencoderConfig(dims=(8, 8, 8), factor=2, latent_channels=2, widths=(3,), seed=1)


class TestConfig:
    def test_latent_shape(self):
        assert ae.AutoencoderConfig().latent_shape == (8, 4, 4, 4)

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            ae.AutoencoderConfig(dims=(16, 16, 10))

    def test_factor_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            ae.AutoencoderConfig(factor=3, widths=(4,))

    def test_parameter_report_stable(self):
        assert ae.parameter_report(ae.AutoencoderConfig()) == ae.parameter_report(ae.AutoencoderConfig())

    def test_dict_round_trip(self):
        c = ae.AutoencoderConfig(augment=True)
        assert ae.AutoencoderConfig.from_dict(c.to_dict()) == c


class TestShapes:
    def test_encode_shape(self, rng):
        p = ae.init_params(ae.AutoencoderConfig())
        z = ae.encode(p, rng.uniform(-1, 1, (16, 16, 16)))
        assert z.shape == (8, 4, 4, 4)

    def test_identical_inputs_identical_latents(self, rng):
        p = ae.init_params(ae.AutoencoderConfig())
        x = rng.uniform(-1, 1, (2, 1, 16, 16, 16)).astype(np.float32)
        x[1] = x[0]
        z = ae.encode(p, x)
        assert z[0].tobytes() == z[1].tobytes()

    def test_decode_range_and_round_trip_shape(self, rng):
        p = ae.init_params(ae.AutoencoderConfig())
        xhat = ae.decode(p, 5 * rng.standard_normal((3, 8, 4, 4, 4)))
        assert xhat.shape == (3, 1, 16, 16, 16)
        assert np.all(np.abs(xhat) < 1)
        x = rng.uniform(-1, 1, (1, 16, 16, 16))
        assert ae.decode(p, ae.encode(p, x)).shape == x.shape

    def test_wrong_dims_rejected(self, rng):
        p = ae.init_params(ae.AutoencoderConfig())
        with pytest.raises(ShapeError):
            ae.encode(p, rng.standard_normal((8, 8, 8)))
        with pytest.raises(ShapeError):
            ae.decode(p, rng.standard_normal((8, 2, 2, 2)))


class TestGradients:
    def test_full_network_grad_check(self, rng):
        params = ae.init_params(TINY, np.float64).arrays
        x = Tensor(rng.uniform(-1, 1, (2, 1, 8, 8, 8)))
        rep = grad_check(lambda p: ae.reconstruction_loss(p, x, TINY), params, max_entries=40)
        assert rep.max_rel_error < 1e-4, rep

    def test_loss_is_mean_l1(self, rng):
        params = ae.init_params(TINY, np.float64)
        x = rng.uniform(-1, 1, (3, 1, 8, 8, 8))
        from memaudit._training import leaves
        loss = ae.reconstruction_loss(leaves(params.arrays, False), Tensor(x), TINY).data
        xhat = ae.decode(params, ae.encode(params, x))
        assert loss == l1_loss(Tensor(x), Tensor(xhat)).data


class TestTraining:
    def test_loss_decreases(self, trained_ae):
        _, curve = trained_ae
        assert curve[0] > curve[-1]

    def test_heldout_reconstruction(self, trained_ae, heldout):
        assert ae.reconstruction_error(trained_ae[0], heldout) < 0.15

    def test_distinct_latents(self, corpus_latents):
        z = corpus_latents.reshape(len(corpus_latents), -1).astype(np.float64)
        d = np.sum((z[:, None] - z[None]) ** 2, axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 0

    def test_seeded_determinism(self, corpus64):
        cfg = ae.AutoencoderConfig(epochs=2, seed=3, augment=True)
        _, c1 = ae.train_autoencoder(cfg, corpus64[:8])
        _, c2 = ae.train_autoencoder(cfg, corpus64[:8])
        assert c1 == c2

    def test_single_volume_memorized(self, corpus64):
        cfg = ae.AutoencoderConfig(epochs=300, seed=0)
        params, _ = ae.train_autoencoder(cfg, corpus64[:1])
        assert ae.reconstruction_error(params, corpus64[:1]) < 0.05

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            ae.train_autoencoder(ae.AutoencoderConfig(epochs=1), [])

    def test_checkpoint_round_trip(self, tmp_path, trained_ae):
        ae.save(trained_ae[0], tmp_path / "a.ckpt")
        back = ae.load(tmp_path / "a.ckpt")
        assert back.config == trained_ae[0].config
        assert all(back.arrays[k].tobytes() == v.tobytes() for k, v in trained_ae[0].arrays.items())
