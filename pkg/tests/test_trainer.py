"""Optimizer recursion, training-loop wiring, and determinism tests."""

import dataclasses

import numpy as np
import pytest

from activepool.autodiff import Tensor, gradients, parameter
from activepool.errors import ConfigurationError, ContractViolation, NumericFailure
from activepool.losses import (
    discriminator_loss,
    kl_term,
    reconstruction_term,
    reparameterize,
    task_loss,
    total_vae_loss,
    vae_adversarial_loss,
)
from activepool.models import build_models, named_parameters, parameter_digest
from activepool.pool import OracleConfig, init_pools, make_gaussian_mixture
from activepool.rng import stream
from activepool.trainer import (
    AdamState,
    TrainConfig,
    _BatchCycler,
    optimizer_step,
    train,
    train_task_only,
)


@pytest.fixture(scope="module")
def dataset():
    return make_gaussian_mixture(classes=4, dim=6, per_class=32, seed=21, test_count=40)


def tiny_models(seed=0, feature_dim=6, class_count=4):
    return build_models(feature_dim, class_count, latent_dim=3, vae_hidden=8,
                        disc_hidden=8, task_hidden=(8,), seed=seed)


class TestOptimizer:
    def test_two_step_hand_recursion(self):
        alpha, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        w = parameter(np.array([1.0]), "w")
        state = AdamState.for_params([w])
        g1, g2 = np.array([0.3]), np.array([-0.5])

        optimizer_step([w], [g1], state, alpha, b1, b2, eps)
        m = (1 - b1) * g1
        v = (1 - b2) * g1**2
        expected = 1.0 - alpha * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        np.testing.assert_allclose(w.data, expected, rtol=1e-15)

        optimizer_step([w], [g2], state, alpha, b1, b2, eps)
        m = b1 * m + (1 - b1) * g2
        v = b2 * v + (1 - b2) * g2**2
        expected = expected - alpha * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
        np.testing.assert_allclose(w.data, expected, rtol=1e-15)

    def test_zero_gradient_keeps_params_and_decays_moments(self):
        w = parameter(np.array([2.0]), "w")
        state = AdamState(step=0, m=[np.array([0.4])], v=[np.array([0.9])])
        optimizer_step([w], [np.array([0.0])], state, alpha=0.0)
        np.testing.assert_allclose(w.data, [2.0])
        np.testing.assert_allclose(state.m[0], [0.36])
        np.testing.assert_allclose(state.v[0], [0.8991])

    def test_zero_learning_rate_is_identity_on_params(self):
        w = parameter(np.array([1.5, -2.5]), "w")
        state = AdamState.for_params([w])
        optimizer_step([w], [np.array([10.0, -3.0])], state, alpha=0.0)
        np.testing.assert_array_equal(w.data, [1.5, -2.5])

    def test_shape_mismatch_rejected(self):
        w = parameter(np.zeros((2, 2)), "w")
        state = AdamState.for_params([w])
        with pytest.raises(ContractViolation):
            optimizer_step([w], [np.zeros(3)], state, alpha=0.1)


class TestConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=0)

    def test_negative_rate_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(alpha2=-1e-4)

    def test_zero_rates_allowed_for_ablations(self):
        TrainConfig(alpha1=0.0, alpha2=0.0)


class TestLoopWiring:
    def test_single_iteration_matches_manual_replay(self, dataset):
        """One epoch over 64/64 pools is exactly one (VAE, D, T) update triple."""
        pool = init_pools(dataset, 0.5, seed=1)
        assert len(pool.labeled) == len(pool.unlabeled) == 64
        cfg = TrainConfig(epochs=1, batch_size=64, seed=33)
        trained = tiny_models(seed=3)
        train(pool, dataset, trained, cfg)

        manual = tiny_models(seed=3)
        features = dataset.features
        x_l = features[np.asarray(pool.labeled)]
        y_l = np.asarray([pool.acquired_labels[i] for i in pool.labeled])
        x_u = features[np.asarray(pool.unlabeled)]
        l_gen, u_gen = stream(33, "labeled-batches"), stream(33, "unlabeled-batches")
        reparam, dropout = stream(33, "reparam"), stream(33, "dropout")
        idx_l = _BatchCycler(64, 64, l_gen).next()
        idx_u = _BatchCycler(64, 64, u_gen).next()
        xl, yl, xu = x_l[idx_l], y_l[idx_l], x_u[idx_u]

        mean_l, logvar_l = manual.encoder.forward(Tensor(xl))
        z_l = reparameterize(mean_l, logvar_l, reparam)
        recon_l = reconstruction_term(xl, manual.decoder.forward(z_l))
        mean_u, logvar_u = manual.encoder.forward(Tensor(xu))
        z_u = reparameterize(mean_u, logvar_u, reparam)
        recon_u = reconstruction_term(xu, manual.decoder.forward(z_u))
        trd = recon_l + cfg.beta * kl_term(mean_l, logvar_l) \
            + recon_u + cfg.beta * kl_term(mean_u, logvar_u)
        vae_total = total_vae_loss(trd, vae_adversarial_loss(z_l, z_u, manual),
                                   cfg.lambda1, cfg.lambda2)
        optimizer_step(manual.vae_params, gradients(vae_total, manual.vae_params),
                       AdamState.for_params(manual.vae_params), cfg.alpha1)

        def draw(x):
            mean, logvar = manual.encoder.forward(Tensor(x))
            return mean.data + np.exp(0.5 * logvar.data) * reparam.standard_normal(mean.data.shape)

        d_loss = discriminator_loss(draw(xl), draw(xu), manual)
        optimizer_step(manual.disc_params, gradients(d_loss, manual.disc_params),
                       AdamState.for_params(manual.disc_params), cfg.alpha2)
        t_loss = task_loss(xl, yl, manual, rng=dropout, train=True)
        optimizer_step(manual.task_params, gradients(t_loss, manual.task_params),
                       AdamState.for_params(manual.task_params), cfg.alpha3)

        assert parameter_digest(named_parameters(trained)) == \
            parameter_digest(named_parameters(manual))

    def test_one_report_per_epoch(self, dataset):
        pool = init_pools(dataset, 0.25, seed=2)
        _, reports = train(pool, dataset, tiny_models(), TrainConfig(epochs=3, batch_size=32))
        assert [r.epoch for r in reports] == [0, 1, 2]
        for r in reports:
            assert 0.0 <= r.disc_probe_accuracy <= 1.0
            assert r.seconds > 0
            r.losses.check(1.0, 1.0, tol=1e-6)

    def test_empty_pool_rejected(self, dataset):
        with pytest.raises(ContractViolation):
            pool = init_pools(dataset, 0.25, seed=2)
            empty = dataclasses.replace(pool, labeled=(), unlabeled=pool.unlabeled,
                                        acquired_labels={})
            train(empty, dataset, tiny_models(), TrainConfig(epochs=1))

    def test_deterministic_replay(self, dataset):
        pool = init_pools(dataset, 0.25, seed=2)
        cfg = TrainConfig(epochs=2, batch_size=32, seed=44)
        a = tiny_models(seed=7)
        b = tiny_models(seed=7)
        train(pool, dataset, a, cfg)
        train(pool, dataset, b, cfg)
        assert parameter_digest(named_parameters(a)) == parameter_digest(named_parameters(b))
        c = tiny_models(seed=7)
        train(pool, dataset, c, dataclasses.replace(cfg, seed=45))
        assert parameter_digest(named_parameters(a)) != parameter_digest(named_parameters(c))

    def test_gradient_isolation_between_modules(self, dataset):
        """No loss leaks gradients into another module's parameters."""
        pool = init_pools(dataset, 0.25, seed=2)
        models = tiny_models(seed=5)
        x_l = dataset.features[np.asarray(pool.labeled[:8])]
        y_l = np.asarray([pool.acquired_labels[i] for i in pool.labeled[:8]])
        x_u = dataset.features[np.asarray(pool.unlabeled[:8])]

        mean_l, logvar_l = models.encoder.forward(Tensor(x_l))
        z_l = reparameterize(mean_l, logvar_l, stream(0, "eps"))
        recon = reconstruction_term(x_l, models.decoder.forward(z_l))
        vae_loss_node = recon + kl_term(mean_l, logvar_l)
        assert all(np.all(g == 0) for g in gradients(vae_loss_node, models.task_params))

        t_loss = task_loss(x_l, y_l, models)
        assert all(np.all(g == 0) for g in gradients(t_loss, models.vae_params))
        assert all(np.all(g == 0) for g in gradients(t_loss, models.disc_params))

        d_loss = discriminator_loss(z_l.data, x_u @ np.zeros((6, 3)), models)
        assert all(np.all(g == 0) for g in gradients(d_loss, models.vae_params))
        assert all(np.all(g == 0) for g in gradients(d_loss, models.task_params))

    def test_frozen_discriminator_ablation(self, dataset):
        pool = init_pools(dataset, 0.25, seed=2)
        models = tiny_models(seed=8)
        disc_before = parameter_digest(models.disc_params)
        vae_before = parameter_digest(models.vae_params)
        cfg = TrainConfig(epochs=2, batch_size=32, lambda2=0.0, alpha2=0.0, seed=9)
        train(pool, dataset, models, cfg)
        assert parameter_digest(models.disc_params) == disc_before
        assert parameter_digest(models.vae_params) != vae_before

    def test_task_trajectory_is_strategy_independent(self, dataset):
        """Full loop and task-only loop produce bitwise-identical task nets."""
        pool = init_pools(dataset, 0.25, seed=2)
        cfg = TrainConfig(epochs=2, batch_size=32, seed=10)
        full = tiny_models(seed=11)
        solo = tiny_models(seed=11)
        train(pool, dataset, full, cfg)
        train_task_only(pool, dataset, solo, cfg)
        assert parameter_digest(full.task_params) == parameter_digest(solo.task_params)

    def test_numeric_failure_carries_context(self, dataset):
        pool = init_pools(dataset, 0.25, seed=2)
        models = tiny_models(seed=12)
        models.encoder.l1.weight.data[0, 0] = np.nan
        with pytest.raises(NumericFailure) as err:
            train(pool, dataset, models, TrainConfig(epochs=1, batch_size=32))
        assert err.value.context["epoch"] == 0
        assert "iteration" in err.value.context

    def test_noisy_labels_reach_task_training(self):
        """The task learner trains on acquired (possibly wrong) labels."""
        ds = make_gaussian_mixture(classes=4, dim=4, per_class=24, seed=30,
                                   test_count=20, superclasses=2)
        oracle = OracleConfig(kind="noisy", noise_fraction=0.5, rng_seed=1)
        pool = init_pools(ds, 0.5, seed=3, oracle=oracle)
        wrong = sum(pool.acquired_labels[i] != ds.true_labels[i] for i in pool.labeled)
        assert wrong > 0


class TestBatchCycler:
    def test_wraps_with_reshuffle(self):
        cycler = _BatchCycler(10, 4, stream(0, "c"))
        seen = [cycler.next().tolist() for _ in range(6)]
        for batch in seen:
            assert len(batch) == 4
        first_epoch = seen[0] + seen[1]
        assert len(set(first_epoch)) == 8

    def test_batch_larger_than_pool_clamps(self):
        cycler = _BatchCycler(3, 10, stream(0, "c"))
        assert sorted(cycler.next().tolist()) == [0, 1, 2]
