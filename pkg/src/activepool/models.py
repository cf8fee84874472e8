"""Differentiable models: VAE encoder/decoder, discriminator, task learner.

Architectures are small fully connected nets (Xavier-uniform init,
float64) built on the :mod:`.autodiff` substrate. The discriminator is a
5-layer MLP with a sigmoid head; the task learner is a configurable
classifier with optional dropout between hidden layers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, parameter
from .errors import ConfigurationError, ContractViolation, NumericFailure
from .rng import stream

_CHECKPOINT_MAGIC = b"ALPOOLCK"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LatentCode:
    """Encoder output for one sample: posterior moments plus the draw.

    Satisfies ``sample = mean + exp(0.5 * log_variance) * noise``
    elementwise; ``noise`` is the standard-normal vector used for the
    reparameterized draw.
    """

    mean: np.ndarray
    log_variance: np.ndarray
    sample: np.ndarray
    noise: np.ndarray


class Affine:
    """Dense layer ``x @ W + b`` with Xavier-uniform weights."""

    def __init__(self, in_dim: int, out_dim: int, gen: np.random.Generator, name: str):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = parameter(gen.uniform(-limit, limit, size=(in_dim, out_dim)), f"{name}.weight")
        self.bias = parameter(np.zeros(out_dim), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    @property
    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Encoder:
    """3-layer ReLU net mapping features to diagonal-Gaussian moments."""

    def __init__(self, feature_dim: int, hidden: int, latent_dim: int, gen, name: str = "encoder"):
        self.l1 = Affine(feature_dim, hidden, gen, f"{name}.l1")
        self.l2 = Affine(hidden, hidden, gen, f"{name}.l2")
        self.mean_head = Affine(hidden, latent_dim, gen, f"{name}.mean")
        self.logvar_head = Affine(hidden, latent_dim, gen, f"{name}.logvar")
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.l2(self.l1(x).relu()).relu()
        return self.mean_head(h), self.logvar_head(h)

    @property
    def params(self) -> list[Tensor]:
        return self.l1.params + self.l2.params + self.mean_head.params + self.logvar_head.params


class Decoder:
    """3-layer ReLU net mapping latent codes back to feature space."""

    def __init__(self, latent_dim: int, hidden: int, feature_dim: int, gen, name: str = "decoder"):
        self.l1 = Affine(latent_dim, hidden, gen, f"{name}.l1")
        self.l2 = Affine(hidden, hidden, gen, f"{name}.l2")
        self.l3 = Affine(hidden, feature_dim, gen, f"{name}.l3")

    def forward(self, z: Tensor) -> Tensor:
        return self.l3(self.l2(self.l1(z).relu()).relu())

    @property
    def params(self) -> list[Tensor]:
        return self.l1.params + self.l2.params + self.l3.params


class Discriminator:
    """5-layer MLP scoring latent codes as labeled (1) vs unlabeled (0)."""

    def __init__(self, input_dim: int, hidden: int, gen, name: str = "disc"):
        dims = [input_dim, hidden, hidden, hidden, hidden, 1]
        self.layers = [Affine(a, b, gen, f"{name}.l{i + 1}") for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        self.input_dim = input_dim

    def forward(self, z: Tensor) -> Tensor:
        """Probability of the labeled pool, shape (n, 1), in (0, 1)."""
        h = z
        for layer in self.layers[:-1]:
            h = layer(h).relu()
        return self.layers[-1](h).sigmoid()

    def scores(self, z: np.ndarray) -> np.ndarray:
        """Forward pass on plain arrays; returns a flat score vector."""
        return self.forward(Tensor(np.asarray(z, dtype=np.float64))).data.ravel()

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]


class TaskNet:
    """Classifier head trained on labeled data only.

    ``dropout`` of ``None`` builds a net without dropout machinery;
    a float (possibly 0.0) inserts a dropout slot after every hidden
    activation, required by Monte-Carlo-dropout scoring.
    """

    def __init__(self, feature_dim: int, hidden: tuple[int, ...], class_count: int, gen,
                 dropout: float | None = None, name: str = "task"):
        if dropout is not None and not 0.0 <= dropout < 1.0:
            raise ConfigurationError("dropout rate must lie in [0, 1)")
        dims = [feature_dim, *hidden, class_count]
        self.layers = [Affine(a, b, gen, f"{name}.l{i + 1}") for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        self.dropout = dropout
        self.class_count = class_count

    def logits(self, x: Tensor, rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
        h = x
        for layer in self.layers[:-1]:
            h = layer(h).relu()
            if train and self.dropout:
                if rng is None:
                    raise ContractViolation("dropout forward pass needs an rng")
                mask = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
                h = h * mask
        return self.layers[-1](h)

    def penultimate(self, x: np.ndarray) -> np.ndarray:
        """Activations of the last hidden layer (core-set feature space)."""
        h = Tensor(np.asarray(x, dtype=np.float64))
        for layer in self.layers[:-1]:
            h = layer(h).relu()
        return h.data

    def probs(self, x: np.ndarray, rng: np.random.Generator | None = None, train: bool = False) -> np.ndarray:
        out = self.logits(Tensor(np.asarray(x, dtype=np.float64)), rng=rng, train=train)
        return softmax(out.data)

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]


@dataclass
class ModelTriple:
    """Parameter handles for the VAE, the discriminator, and the task net."""

    encoder: Encoder
    decoder: Decoder
    discriminator: Discriminator
    task: TaskNet
    latent_dim: int

    @property
    def vae_params(self) -> list[Tensor]:
        return self.encoder.params + self.decoder.params

    @property
    def disc_params(self) -> list[Tensor]:
        return self.discriminator.params

    @property
    def task_params(self) -> list[Tensor]:
        return self.task.params


def build_models(
    feature_dim: int,
    class_count: int,
    latent_dim: int = 8,
    vae_hidden: int = 64,
    disc_hidden: int = 64,
    task_hidden: tuple[int, ...] = (64,),
    task_dropout: float | None = None,
    seed: int = 0,
    disc_input_dim: int | None = None,
) -> ModelTriple:
    """Construct a freshly initialized model triple.

    ``disc_input_dim`` overrides the discriminator's input width (used by
    the ablation that trains it directly on raw features).
    """
    enc = Encoder(feature_dim, vae_hidden, latent_dim, stream(seed, "encoder"))
    dec = Decoder(latent_dim, vae_hidden, feature_dim, stream(seed, "decoder"))
    disc = Discriminator(disc_input_dim or latent_dim, disc_hidden, stream(seed, "discriminator"))
    task = TaskNet(feature_dim, tuple(task_hidden), class_count, stream(seed, "task"), dropout=task_dropout)
    return ModelTriple(encoder=enc, decoder=dec, discriminator=disc, task=task, latent_dim=latent_dim)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax on a plain array."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _first_bad_row(*arrays: np.ndarray) -> int | None:
    bad = ~np.all([np.isfinite(a).all(axis=1) for a in arrays], axis=0)
    hits = np.flatnonzero(bad)
    return int(hits[0]) if hits.size else None


def encode_moments(x: np.ndarray, models: ModelTriple) -> tuple[np.ndarray, np.ndarray]:
    """Posterior (mean, log-variance) arrays for a feature batch."""
    mu, logvar = models.encoder.forward(Tensor(np.asarray(x, dtype=np.float64)))
    bad = _first_bad_row(mu.data, logvar.data)
    if bad is not None:
        raise NumericFailure("non-finite encoder activations", batch_index=bad)
    return mu.data, logvar.data


def encode(x: np.ndarray, params: ModelTriple, rng: np.random.Generator) -> list[LatentCode]:
    """Encode a batch into reparameterized latent codes."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractViolation("encode expects a nonempty (n, features) batch")
    if x.shape[1] != params.encoder.feature_dim:
        raise ContractViolation(
            f"batch has {x.shape[1]} features, encoder expects {params.encoder.feature_dim}"
        )
    mu, logvar = encode_moments(x, params)
    noise = rng.standard_normal(mu.shape)
    sample = mu + np.exp(0.5 * logvar) * noise
    return [LatentCode(mean=mu[i], log_variance=logvar[i], sample=sample[i], noise=noise[i])
            for i in range(mu.shape[0])]


def named_parameters(models: ModelTriple) -> list[Tensor]:
    return models.vae_params + models.disc_params + models.task_params


def save_checkpoint(models: ModelTriple, path) -> None:
    """Versioned binary checkpoint: manifest + float64 parameter blobs."""
    params = named_parameters(models)
    manifest = [{"name": p.name, "shape": list(p.data.shape)} for p in params]
    blob = json.dumps({"layers": manifest, "latent_dim": models.latent_dim}).encode()
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", _CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())


def load_checkpoint(models: ModelTriple, path) -> ModelTriple:
    """Load a checkpoint written for an identically shaped triple."""
    with open(path, "rb") as fh:
        if fh.read(len(_CHECKPOINT_MAGIC)) != _CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path}: not a model checkpoint")
        version, blob_len = struct.unpack("<IQ", fh.read(12))
        if version != _CHECKPOINT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(blob_len).decode())
        params = named_parameters(models)
        if [p.name for p in params] != [m["name"] for m in manifest["layers"]]:
            raise ConfigurationError(f"{path}: checkpoint layer manifest does not match models")
        for p, meta in zip(params, manifest["layers"]):
            shape = tuple(meta["shape"])
            if p.data.shape != shape:
                raise ConfigurationError(f"{path}: shape mismatch for {p.name}")
            raw = fh.read(int(np.prod(shape)) * 8)
            p.data = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
    return models


def parameter_digest(params: list[Tensor]) -> str:
    """Stable fingerprint of parameter values (frozen-model audits)."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()
