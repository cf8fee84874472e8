"""Joint training loop for the VAE, discriminator, and task learner.

Each iteration draws one labeled and one unlabeled mini-batch and
performs three updates in order: VAE (transductive + adversarial,
learning rate alpha1), discriminator (alpha2), task learner (alpha3,
labeled batch only). An epoch is one pass over the larger pool; the
smaller pool cycles with a reshuffle at every wrap. A learning rate of
zero freezes the corresponding module bit-exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, gradients
from .errors import ConfigurationError, ContractViolation, NumericFailure
from .losses import (
    LossBreakdown,
    discriminator_loss,
    kl_term,
    reconstruction_term,
    reparameterize,
    task_loss,
    total_vae_loss,
    vae_adversarial_loss,
)
from .models import ModelTriple
from .pool import Dataset, PoolState
from .rng import stream


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lambda1: float = 1.0
    lambda2: float = 1.0
    beta: float = 1.0
    alpha1: float = 5e-4
    alpha2: float = 5e-4
    alpha3: float = 5e-4
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("alpha1", "alpha2", "alpha3"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigurationError("adam moment decays must lie in [0, 1)")


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter list."""

    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(step=0,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def optimizer_step(params, grads, state: AdamState, alpha: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One adaptive-moment update with bias correction; params updated in place."""
    if len(params) != len(grads):
        raise ContractViolation("one gradient per parameter required")
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ContractViolation(f"gradient shape {g.shape} does not match {p.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - beta1**t)
        v_hat = state.v[i] / (1.0 - beta2**t)
        p.data = p.data - alpha * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    losses: LossBreakdown
    disc_probe_accuracy: float
    seconds: float


class _BatchCycler:
    """Yields index batches; reshuffles whenever the pool wraps around."""

    def __init__(self, count: int, batch_size: int, gen: np.random.Generator):
        self.count = count
        self.batch_size = min(batch_size, count)
        self.gen = gen
        self.order = gen.permutation(count)
        self.cursor = 0

    def next(self) -> np.ndarray:
        if self.cursor + self.batch_size > self.count:
            self.order = self.gen.permutation(self.count)
            self.cursor = 0
        batch = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return batch


def _pool_arrays(pool: PoolState, dataset: Dataset):
    if not pool.labeled or not pool.unlabeled:
        raise ContractViolation("training requires nonempty labeled and unlabeled pools")
    features = dataset.features
    labeled_idx = np.asarray(pool.labeled, dtype=np.int64)
    x_l = features[labeled_idx]
    y_l = np.asarray([pool.acquired_labels[int(i)] for i in labeled_idx], dtype=np.int64)
    x_u = features[np.asarray(pool.unlabeled, dtype=np.int64)]
    return x_l, y_l, x_u


def _check_finite(value: float, what: str, epoch: int, iteration: int) -> float:
    if not math.isfinite(value):
        raise NumericFailure(f"non-finite {what} loss", epoch=epoch, iteration=iteration)
    return value


def probe_accuracy(models: ModelTriple, x_l: np.ndarray, x_u: np.ndarray,
                   gen: np.random.Generator, probe_size: int = 256) -> float:
    """Balanced discriminator accuracy on posterior means of both pools."""
    take_l = gen.choice(len(x_l), size=min(probe_size, len(x_l)), replace=False)
    take_u = gen.choice(len(x_u), size=min(probe_size, len(x_u)), replace=False)
    mu_l, _ = models.encoder.forward(Tensor(x_l[take_l]))
    mu_u, _ = models.encoder.forward(Tensor(x_u[take_u]))
    score_l = models.discriminator.scores(mu_l.data)
    score_u = models.discriminator.scores(mu_u.data)
    return float(((score_l > 0.5).mean() + (score_u <= 0.5).mean()) / 2.0)


def train(pool: PoolState, dataset: Dataset, models: ModelTriple,
          cfg: TrainConfig) -> tuple[ModelTriple, list[EpochReport]]:
    """Run the interleaved VAE / discriminator / task updates.

    Deterministic under (pool, dataset, models, cfg.seed): batch order,
    reparameterization noise, and dropout masks all come from named
    streams of the config seed.
    """
    x_l, y_l, x_u = _pool_arrays(pool, dataset)
    labeled_gen = stream(cfg.seed, "labeled-batches")
    unlabeled_gen = stream(cfg.seed, "unlabeled-batches")
    reparam_gen = stream(cfg.seed, "reparam")
    dropout_gen = stream(cfg.seed, "dropout")
    probe_gen = stream(cfg.seed, "probe")

    labeled_batches = _BatchCycler(len(x_l), cfg.batch_size, labeled_gen)
    unlabeled_batches = _BatchCycler(len(x_u), cfg.batch_size, unlabeled_gen)
    iters_per_epoch = math.ceil(max(len(x_l), len(x_u)) / cfg.batch_size)

    vae_state = AdamState.for_params(models.vae_params)
    disc_state = AdamState.for_params(models.disc_params)
    task_state = AdamState.for_params(models.task_params)

    update_vae = cfg.alpha1 > 0
    update_disc = cfg.alpha2 > 0
    reports: list[EpochReport] = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        sums = np.zeros(5)
        for iteration in range(iters_per_epoch):
            idx_l = labeled_batches.next()
            xl, yl = x_l[idx_l], y_l[idx_l]
            xu = x_u[unlabeled_batches.next()]

            # VAE update: transductive + adversarial objective
            mean_l, logvar_l = models.encoder.forward(Tensor(xl))
            z_l = reparameterize(mean_l, logvar_l, reparam_gen)
            recon_l = reconstruction_term(xl, models.decoder.forward(z_l))
            mean_u, logvar_u = models.encoder.forward(Tensor(xu))
            z_u = reparameterize(mean_u, logvar_u, reparam_gen)
            recon_u = reconstruction_term(xu, models.decoder.forward(z_u))
            trd = recon_l + cfg.beta * kl_term(mean_l, logvar_l) \
                + recon_u + cfg.beta * kl_term(mean_u, logvar_u)
            adv = vae_adversarial_loss(z_l, z_u, models)
            vae_total = total_vae_loss(trd, adv, cfg.lambda1, cfg.lambda2)
            trd_v = _check_finite(trd.item(), "transductive", epoch, iteration)
            adv_v = _check_finite(adv.item(), "adversarial", epoch, iteration)
            total_v = _check_finite(vae_total.item(), "vae", epoch, iteration)
            if update_vae:
                vae_grads = gradients(vae_total, models.vae_params)
                optimizer_step(models.vae_params, vae_grads, vae_state, cfg.alpha1,
                               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

            # discriminator update on detached draws from the updated encoder
            disc = discriminator_loss(_sample_latents(models, xl, reparam_gen),
                                      _sample_latents(models, xu, reparam_gen), models)
            disc_v = _check_finite(disc.item(), "discriminator", epoch, iteration)
            if update_disc:
                disc_grads = gradients(disc, models.disc_params)
                optimizer_step(models.disc_params, disc_grads, disc_state, cfg.alpha2,
                               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

            # task update on the labeled batch only
            t_loss = task_loss(xl, yl, models, rng=dropout_gen, train=True)
            task_v = _check_finite(t_loss.item(), "task", epoch, iteration)
            if cfg.alpha3 > 0:
                task_grads = gradients(t_loss, models.task_params)
                optimizer_step(models.task_params, task_grads, task_state, cfg.alpha3,
                               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

            sums += (trd_v, adv_v, total_v, disc_v, task_v)

        averages = [float(v) for v in sums / iters_per_epoch]
        breakdown = LossBreakdown(vae_trd=averages[0], vae_adv=averages[1],
                                  vae_total=averages[2], disc=averages[3], task=averages[4])
        reports.append(EpochReport(
            epoch=epoch,
            losses=breakdown,
            disc_probe_accuracy=probe_accuracy(models, x_l, x_u, probe_gen),
            seconds=time.perf_counter() - started,
        ))
    return models, reports


def _sample_latents(models: ModelTriple, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mean, logvar = models.encoder.forward(Tensor(x))
    noise = rng.standard_normal(mean.data.shape)
    return mean.data + np.exp(0.5 * logvar.data) * noise


def train_task_only(pool: PoolState, dataset: Dataset, models: ModelTriple,
                    cfg: TrainConfig) -> tuple[ModelTriple, list[EpochReport]]:
    """Task-learner-only training with the same batch schedule as :func:`train`.

    Used by strategies that never touch the VAE or discriminator; the
    labeled-batch stream matches the full loop's, so task trajectories
    are identical across strategies under one seed.
    """
    x_l, y_l, x_u = _pool_arrays(pool, dataset)
    labeled_gen = stream(cfg.seed, "labeled-batches")
    dropout_gen = stream(cfg.seed, "dropout")
    labeled_batches = _BatchCycler(len(x_l), cfg.batch_size, labeled_gen)
    iters_per_epoch = math.ceil(max(len(x_l), len(x_u)) / cfg.batch_size)
    task_state = AdamState.for_params(models.task_params)

    reports: list[EpochReport] = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        task_sum = 0.0
        for iteration in range(iters_per_epoch):
            idx = labeled_batches.next()
            t_loss = task_loss(x_l[idx], y_l[idx], models, rng=dropout_gen, train=True)
            task_sum += _check_finite(t_loss.item(), "task", epoch, iteration)
            if cfg.alpha3 > 0:
                task_grads = gradients(t_loss, models.task_params)
                optimizer_step(models.task_params, task_grads, task_state, cfg.alpha3,
                               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        breakdown = LossBreakdown(vae_trd=0.0, vae_adv=0.0, vae_total=0.0, disc=0.0,
                                  task=task_sum / iters_per_epoch)
        reports.append(EpochReport(epoch=epoch, losses=breakdown, disc_probe_accuracy=0.5,
                                   seconds=time.perf_counter() - started))
    return models, reports


def save_loss_trace(reports: list[EpochReport], path) -> None:
    """Loss-trace CSV: epoch, vae_trd, vae_adv, disc, task."""
    with open(path, "w") as fh:
        fh.write("epoch,vae_trd,vae_adv,disc,task\n")
        for r in reports:
            fh.write(f"{r.epoch},{r.losses.vae_trd!r},{r.losses.vae_adv!r},"
                     f"{r.losses.disc!r},{r.losses.task!r}\n")
