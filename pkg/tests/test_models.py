"""Model construction, encoding, and checkpoint tests."""

import numpy as np
import pytest

from activepool.autodiff import Tensor
from activepool.errors import ConfigurationError, ContractViolation, NumericFailure
from activepool.models import (
    TaskNet,
    build_models,
    encode,
    load_checkpoint,
    named_parameters,
    parameter_digest,
    save_checkpoint,
    softmax,
)
from activepool.rng import stream


@pytest.fixture
def models():
    return build_models(feature_dim=6, class_count=3, latent_dim=4, vae_hidden=8,
                        disc_hidden=8, task_hidden=(8,), seed=0)


class TestConstruction:
    def test_deterministic_init(self):
        a = build_models(6, 3, latent_dim=4, seed=9)
        b = build_models(6, 3, latent_dim=4, seed=9)
        c = build_models(6, 3, latent_dim=4, seed=10)
        assert parameter_digest(named_parameters(a)) == parameter_digest(named_parameters(b))
        assert parameter_digest(named_parameters(a)) != parameter_digest(named_parameters(c))

    def test_xavier_bounds(self, models):
        for p in named_parameters(models):
            if p.name.endswith(".weight"):
                fan_in, fan_out = p.data.shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                assert np.all(np.abs(p.data) <= limit)

    def test_discriminator_depth_and_range(self, models):
        assert len(models.discriminator.layers) == 5
        z = np.random.default_rng(0).normal(size=(32, 4))
        scores = models.discriminator.scores(z)
        assert np.all((scores > 0.0) & (scores < 1.0))

    def test_parameter_count_fixed(self, models):
        before = [p.data.shape for p in named_parameters(models)]
        x = np.random.default_rng(1).normal(size=(5, 6))
        encode(x, models, stream(0, "eps"))
        models.task.probs(x)
        assert [p.data.shape for p in named_parameters(models)] == before


class TestEncode:
    def test_zero_heads_give_prior_and_pure_noise(self, models):
        for p in models.encoder.mean_head.params + models.encoder.logvar_head.params:
            p.data = np.zeros_like(p.data)
        x = np.random.default_rng(2).normal(size=(7, 6))
        codes = encode(x, models, stream(3, "eps"))
        for code in codes:
            np.testing.assert_array_equal(code.mean, np.zeros(4))
            np.testing.assert_array_equal(code.log_variance, np.zeros(4))
            np.testing.assert_allclose(code.sample, code.noise)

    def test_batch_shapes(self):
        models = build_models(feature_dim=10, class_count=2, latent_dim=32, seed=1)
        x = np.random.default_rng(4).normal(size=(17, 10))
        codes = encode(x, models, stream(0, "eps"))
        assert len(codes) == 17
        assert all(code.mean.shape == (32,) for code in codes)

    def test_fixed_seed_identical_noise(self, models):
        x = np.random.default_rng(5).normal(size=(4, 6))
        a = encode(x, models, stream(11, "eps"))
        b = encode(x, models, stream(11, "eps"))
        for ca, cb in zip(a, b):
            np.testing.assert_array_equal(ca.noise, cb.noise)
            np.testing.assert_array_equal(ca.sample, cb.sample)

    def test_reparameterization_identity(self, models):
        x = np.random.default_rng(6).normal(size=(12, 6))
        for code in encode(x, models, stream(0, "eps")):
            np.testing.assert_allclose(
                code.sample, code.mean + np.exp(0.5 * code.log_variance) * code.noise)

    def test_nonfinite_input_reports_row(self, models):
        x = np.zeros((5, 6))
        x[3, 2] = np.nan
        with pytest.raises(NumericFailure) as err:
            encode(x, models, stream(0, "eps"))
        assert err.value.context["batch_index"] == 3

    def test_empty_batch_rejected(self, models):
        with pytest.raises(ContractViolation):
            encode(np.zeros((0, 6)), models, stream(0, "eps"))

    def test_wrong_width_rejected(self, models):
        with pytest.raises(ContractViolation):
            encode(np.zeros((3, 5)), models, stream(0, "eps"))


class TestTaskNet:
    def test_probs_are_distributions(self, models):
        x = np.random.default_rng(7).normal(size=(9, 6))
        probs = models.task.probs(x)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(9), atol=1e-12)
        assert np.all(probs >= 0)

    def test_penultimate_feature_shape(self, models):
        x = np.random.default_rng(8).normal(size=(9, 6))
        assert models.task.penultimate(x).shape == (9, 8)

    def test_dropout_needs_rng(self):
        task = TaskNet(4, (8,), 2, stream(0, "t"), dropout=0.5)
        with pytest.raises(ContractViolation):
            task.logits(Tensor(np.zeros((2, 4))), train=True)

    def test_dropout_rate_validation(self):
        with pytest.raises(ConfigurationError):
            TaskNet(4, (8,), 2, stream(0, "t"), dropout=1.0)

    def test_dropout_masks_reproducible(self):
        task = TaskNet(4, (8,), 2, stream(0, "t"), dropout=0.5)
        x = np.random.default_rng(9).normal(size=(6, 4))
        a = task.probs(x, rng=stream(1, "mask"), train=True)
        b = task.probs(x, rng=stream(1, "mask"), train=True)
        np.testing.assert_array_equal(a, b)

    def test_softmax_stability(self):
        logits = np.array([[1000.0, 1000.0], [-1000.0, 0.0]])
        probs = softmax(logits)
        assert np.all(np.isfinite(probs))
        np.testing.assert_allclose(probs.sum(axis=1), [1.0, 1.0])


class TestCheckpoint:
    def test_round_trip_bitwise(self, models, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(models, path)
        digest = parameter_digest(named_parameters(models))
        clone = build_models(feature_dim=6, class_count=3, latent_dim=4, vae_hidden=8,
                             disc_hidden=8, task_hidden=(8,), seed=99)
        assert parameter_digest(named_parameters(clone)) != digest
        load_checkpoint(clone, path)
        assert parameter_digest(named_parameters(clone)) == digest

    def test_shape_mismatch_rejected(self, models, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(models, path)
        other = build_models(feature_dim=6, class_count=3, latent_dim=5, vae_hidden=8,
                             disc_hidden=8, task_hidden=(8,), seed=0)
        with pytest.raises(ConfigurationError):
            load_checkpoint(other, path)

    def test_bad_magic_rejected(self, models, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"garbage")
        with pytest.raises(ConfigurationError):
            load_checkpoint(models, path)
