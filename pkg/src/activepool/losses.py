"""Loss terms for the adversarial latent-space active learner.

The VAE minimizes a transductive reconstruction+KL objective over both
pools plus an adversarial term that pushes the discriminator toward
predicting "labeled" for every latent code; the discriminator minimizes
the opposing binary cross-entropy. Reconstruction likelihood is a
fixed-variance Gaussian, so the term reduces to per-sample mean squared
error. Discriminator outputs are clamped to [CLAMP, 1-CLAMP] before any
log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cross_entropy
from .errors import ContractViolation, NumericFailure
from .models import LatentCode, ModelTriple

CLAMP = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss values for one iteration or epoch average."""

    vae_trd: float
    vae_adv: float
    vae_total: float
    disc: float
    task: float

    def check(self, lambda1: float, lambda2: float, tol: float = 1e-9) -> None:
        expected = lambda1 * self.vae_trd + lambda2 * self.vae_adv
        if abs(self.vae_total - expected) > tol * max(1.0, abs(expected)):
            raise ContractViolation("vae_total is not the weighted sum of its parts")


def kl_unit_gaussian(code: LatentCode) -> float:
    """Closed-form KL from a diagonal Gaussian to the unit Gaussian prior."""
    mean = np.asarray(code.mean, dtype=np.float64)
    logvar = np.asarray(code.log_variance, dtype=np.float64)
    if not (np.isfinite(mean).all() and np.isfinite(logvar).all()):
        raise NumericFailure("non-finite latent moments")
    # expm1 keeps exp(lv) - 1 - lv accurate near zero, where the naive
    # form cancels catastrophically and can dip below 0
    return max(0.0, float(0.5 * np.sum(np.expm1(logvar) - logvar + mean**2)))


def kl_term(mean: Tensor, log_variance: Tensor) -> Tensor:
    """Batch mean of per-sample KL(q || N(0, I)) as a graph node."""
    per_sample = (log_variance.exp() + mean * mean - 1.0 - log_variance).sum(axis=1) * 0.5
    return per_sample.mean()


def reconstruction_term(x: np.ndarray, x_hat: Tensor) -> Tensor:
    """Batch mean of per-sample mean squared reconstruction error."""
    diff = x_hat - Tensor(x)
    return (diff * diff).mean()


def reparameterize(mean: Tensor, log_variance: Tensor, rng: np.random.Generator) -> Tensor:
    """Differentiable posterior draw z = mu + exp(logvar/2) * eps."""
    noise = rng.standard_normal(mean.shape)
    return mean + (log_variance * 0.5).exp() * Tensor(noise)


def _transductive_parts(x: np.ndarray, models: ModelTriple, beta: float,
                        rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractViolation("loss batches must be nonempty (n, features) arrays")
    mean, log_variance = models.encoder.forward(Tensor(x))
    z = reparameterize(mean, log_variance, rng)
    recon = reconstruction_term(x, models.decoder.forward(z))
    return recon + beta * kl_term(mean, log_variance), z


def vae_transductive_loss(labeled_batch: np.ndarray, unlabeled_batch: np.ndarray,
                          params: ModelTriple, beta: float,
                          rng: np.random.Generator) -> Tensor:
    """Reconstruction + beta-weighted KL over both pools (minimized)."""
    labeled_term, _ = _transductive_parts(labeled_batch, params, beta, rng)
    unlabeled_term, _ = _transductive_parts(unlabeled_batch, params, beta, rng)
    return labeled_term + unlabeled_term


def _discriminator_of(params):
    return params.discriminator if isinstance(params, ModelTriple) else params


def _clamped_scores(disc, z: Tensor) -> Tensor:
    return disc.forward(z).clip(CLAMP, 1.0 - CLAMP)


def _as_tensor(z) -> Tensor:
    return z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))


def vae_adversarial_loss(z_labeled, z_unlabeled, params) -> Tensor:
    """Fooling objective: push both pools toward the "labeled" prediction."""
    disc = _discriminator_of(params)
    loss_l = -_clamped_scores(disc, _as_tensor(z_labeled)).log().mean()
    loss_u = -_clamped_scores(disc, _as_tensor(z_unlabeled)).log().mean()
    return loss_l + loss_u


def discriminator_loss(z_labeled, z_unlabeled, params) -> Tensor:
    """Separation objective on latent codes detached from the encoder."""
    disc = _discriminator_of(params)
    z_l = _as_tensor(z_labeled).detach()
    z_u = _as_tensor(z_unlabeled).detach()
    loss_l = -_clamped_scores(disc, z_l).log().mean()
    loss_u = -(1.0 - _clamped_scores(disc, z_u)).log().mean()
    return loss_l + loss_u


def total_vae_loss(trd, adv, lambda1: float, lambda2: float):
    """Weighted combination of the transductive and adversarial terms."""
    return lambda1 * trd + lambda2 * adv


def task_forward(x: np.ndarray, params: ModelTriple) -> np.ndarray:
    """Class-probability rows from the task learner (evaluation mode)."""
    task = params.task if isinstance(params, ModelTriple) else params
    return task.probs(np.asarray(x, dtype=np.float64))


def task_loss(x: np.ndarray, y: np.ndarray, params,
              rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """Mean cross-entropy of the task learner on a labeled batch."""
    task = params.task if isinstance(params, ModelTriple) else params
    logits = task.logits(Tensor(np.asarray(x, dtype=np.float64)), rng=rng, train=train)
    return cross_entropy(logits, y)
