"""Acquisition strategies: map (pool, models, budget) to a ranked batch.

Every strategy returns exactly ``b`` distinct unlabeled indices. Ranking
rules break ties by ascending index, and pools expose their index sets
sorted, so selections are independent of storage order. Scoring runs on
read-only model state; strategies are pure functions of their inputs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericFailure
from .models import ModelTriple, TaskNet
from .pool import Dataset, PoolState
from .rng import stream

STRATEGIES = ("vaal", "random", "max_entropy", "mc_dropout", "coreset",
              "ensemble_varr", "wasserstein")

_SCORE_CHUNK = 4096


@dataclass(frozen=True)
class AcquisitionRequest:
    strategy: str
    budget: int
    seed: int = 0
    strategy_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.budget < 1:
            raise ConfigurationError("budget must be positive")


@dataclass(frozen=True)
class AcquisitionResult:
    selected: tuple[int, ...]
    scores: tuple[float, ...]
    strategy: str
    wall_time: float

    def to_json(self) -> str:
        return json.dumps({
            "strategy": self.strategy,
            "budget": len(self.selected),
            "indices": list(self.selected),
            "scores": list(self.scores),
            "wall_time": self.wall_time,
        }, sort_keys=True)


def bottom_k(indices, scores, k: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """The k lowest-scoring indices, ties broken by ascending index."""
    return _ranked(indices, scores, k, descending=False)


def top_k(indices, scores, k: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """The k highest-scoring indices, ties broken by ascending index."""
    return _ranked(indices, scores, k, descending=True)


def _ranked(indices, scores, k, descending):
    indices = np.asarray(indices, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if indices.shape != scores.shape or indices.ndim != 1:
        raise ContractViolation("indices and scores must be aligned 1-D sequences")
    if len(set(indices.tolist())) != len(indices):
        raise ContractViolation("duplicate candidate indices")
    if not 1 <= k <= len(indices):
        raise ContractViolation(f"budget {k} outside [1, {len(indices)}]")
    if not np.isfinite(scores).all():
        raise NumericFailure("non-finite acquisition scores")
    key = -scores if descending else scores
    order = np.lexsort((indices, key))[:k]
    return tuple(int(i) for i in indices[order]), tuple(float(s) for s in scores[order])


def _unlabeled_features(pool: PoolState, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(pool.unlabeled, dtype=np.int64)
    if idx.size == 0:
        raise ContractViolation("unlabeled pool is empty")
    return idx, dataset.features[idx]


def _timed(start: float) -> float:
    return time.perf_counter() - start


def entropy(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def vaal_select(pool: PoolState, dataset: Dataset, models: ModelTriple, b: int) -> AcquisitionResult:
    """Pick the b unlabeled samples the discriminator is least sure are labeled.

    Scores each posterior mean with the discriminator and returns the b
    lowest probabilities: the samples most confidently unlike the
    labeled pool.
    """
    start = time.perf_counter()
    if models.encoder.feature_dim != dataset.feature_dim:
        raise ContractViolation("models were built for a different feature dimensionality")
    if models.discriminator.input_dim != models.latent_dim:
        raise ContractViolation("discriminator does not score this encoder's latent space")
    idx, x = _unlabeled_features(pool, dataset)
    scores = np.empty(len(idx))
    for lo in range(0, len(idx), _SCORE_CHUNK):
        chunk = x[lo:lo + _SCORE_CHUNK]
        mu, _ = models.encoder.forward(_tensor(chunk))
        scores[lo:lo + _SCORE_CHUNK] = models.discriminator.scores(mu.data)
    selected, sel_scores = bottom_k(idx, scores, b)
    return AcquisitionResult(selected, sel_scores, "vaal", _timed(start))


def random_select(pool: PoolState, b: int, seed: int = 0) -> AcquisitionResult:
    """Uniform draw without replacement from the unlabeled pool."""
    start = time.perf_counter()
    idx = np.asarray(pool.unlabeled, dtype=np.int64)
    if not 1 <= b <= len(idx):
        raise ContractViolation(f"budget {b} outside [1, {len(idx)}]")
    gen = stream(seed, "random-select", pool.round)
    chosen = np.sort(gen.choice(idx, size=b, replace=False))
    return AcquisitionResult(tuple(int(i) for i in chosen), (0.0,) * b, "random", _timed(start))


def max_entropy_select(pool: PoolState, dataset: Dataset, task_model, b: int) -> AcquisitionResult:
    """Highest predictive-entropy samples under the task learner."""
    start = time.perf_counter()
    task = _task_of(task_model)
    idx, x = _unlabeled_features(pool, dataset)
    scores = entropy(task.probs(x))
    selected, sel_scores = top_k(idx, scores, b)
    return AcquisitionResult(selected, sel_scores, "max_entropy", _timed(start))


def mc_dropout_select(pool: PoolState, dataset: Dataset, task_model, b: int,
                      mask_count: int = 10, seed: int = 0) -> AcquisitionResult:
    """Entropy of the mean softmax over stochastic dropout passes."""
    start = time.perf_counter()
    task = _task_of(task_model)
    if task.dropout is None:
        raise ConfigurationError("mc_dropout_select requires a task model built with dropout")
    if mask_count < 2:
        raise ConfigurationError("mask_count must be >= 2")
    idx, x = _unlabeled_features(pool, dataset)
    mean_probs = np.zeros((len(idx), task.class_count))
    for pass_index in range(mask_count):
        gen = stream(seed, "mc-dropout", pass_index)
        mean_probs += task.probs(x, rng=gen, train=True)
    mean_probs /= mask_count
    selected, sel_scores = top_k(idx, entropy(mean_probs), b)
    return AcquisitionResult(selected, sel_scores, "mc_dropout", _timed(start))


def coreset_select(pool: PoolState, dataset: Dataset, feature_extractor, b: int) -> AcquisitionResult:
    """k-center greedy in the extractor's feature space.

    Repeatedly picks the unlabeled point farthest (Euclidean) from the
    labeled set plus previous picks. With an empty labeled set the first
    center is the candidate farthest from the dataset mean.
    """
    start = time.perf_counter()
    extract = feature_extractor.penultimate if isinstance(feature_extractor, TaskNet) \
        else feature_extractor
    idx = np.asarray(pool.unlabeled, dtype=np.int64)
    if not 1 <= b <= len(idx):
        raise ContractViolation(f"budget {b} outside [1, {len(idx)}]")
    cand = np.asarray(extract(dataset.features[idx]), dtype=np.float64)
    remaining = b

    if pool.labeled:
        centers = np.asarray(extract(dataset.features[np.asarray(pool.labeled)]), dtype=np.float64)
        min_dist = _min_distances(cand, centers)
        picked: list[int] = []
        picked_scores: list[float] = []
    else:
        dataset_mean = extract(dataset.features).mean(axis=0, keepdims=True)
        seed_dist = _min_distances(cand, dataset_mean)
        first = _argmax_tied(seed_dist, idx)
        picked = [first]
        picked_scores = [float(seed_dist[np.searchsorted(idx, first)])]
        min_dist = _min_distances(cand, cand[np.searchsorted(idx, first)][None, :])
        remaining -= 1

    for _ in range(remaining):
        chosen = _argmax_tied(np.where(np.isin(idx, picked), -np.inf, min_dist), idx)
        pos = np.searchsorted(idx, chosen)
        picked.append(chosen)
        picked_scores.append(float(min_dist[pos]))
        min_dist = np.minimum(min_dist, _min_distances(cand, cand[pos][None, :]))
    return AcquisitionResult(tuple(picked), tuple(picked_scores), "coreset", _timed(start))


def _argmax_tied(values: np.ndarray, indices: np.ndarray) -> int:
    """Index (from ``indices``) of the max value, ties by ascending index."""
    best = values.max()
    hits = indices[values == best]
    return int(hits.min())


def _min_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Per-point Euclidean distance to the nearest center, chunked."""
    out = np.full(len(points), np.inf)
    center_sq = (centers * centers).sum(axis=1)
    for lo in range(0, len(points), _SCORE_CHUNK):
        chunk = points[lo:lo + _SCORE_CHUNK]
        sq = (chunk * chunk).sum(axis=1)[:, None] + center_sq[None, :] - 2.0 * chunk @ centers.T
        out[lo:lo + _SCORE_CHUNK] = np.sqrt(np.maximum(sq.min(axis=1), 0.0))
    return out


def ensemble_varr_select(pool: PoolState, dataset: Dataset, ensemble, b: int) -> AcquisitionResult:
    """Variation-ratio scores from an ensemble of task learners."""
    start = time.perf_counter()
    members = list(ensemble)
    if len(members) < 2:
        raise ConfigurationError("ensemble_varr_select requires at least 2 members")
    idx, x = _unlabeled_features(pool, dataset)
    class_count = _task_of(members[0]).class_count
    votes = np.zeros((len(idx), class_count))
    for member in members:
        prediction = _task_of(member).probs(x).argmax(axis=1)
        votes[np.arange(len(idx)), prediction] += 1.0
    scores = 1.0 - votes.max(axis=1) / len(members)
    selected, sel_scores = top_k(idx, scores, b)
    return AcquisitionResult(selected, sel_scores, "ensemble_varr", _timed(start))


def moment_match(means: np.ndarray, variances: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single diagonal Gaussian matching a mixture of diagonal Gaussians.

    Mixture mean is the average component mean; mixture variance adds the
    spread of the means to the average component variance.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
    center = means.mean(axis=0)
    spread = (variances + means**2).mean(axis=0) - center**2
    return center, np.maximum(spread, 1e-12)


def labeled_latent_stats(pool: PoolState, dataset: Dataset,
                         models: ModelTriple) -> tuple[np.ndarray, np.ndarray]:
    """Moment-matched latent Gaussian over the labeled pool's posteriors."""
    if not pool.labeled:
        raise ContractViolation("labeled pool is empty")
    x = dataset.features[np.asarray(pool.labeled)]
    mu, logvar = models.encoder.forward(_tensor(x))
    return moment_match(mu.data, np.exp(logvar.data))


def gaussian_wasserstein(mu_i: np.ndarray, var_i: np.ndarray,
                         mu_j: np.ndarray, var_j: np.ndarray) -> np.ndarray:
    """Closed-form 2-Wasserstein distance between diagonal Gaussians.

    ``var_*`` are variance vectors; the Frobenius term reduces to the sum
    of squared differences of standard deviations. Supports a batch of
    row-wise (mu_i, var_i) against one reference Gaussian.
    """
    mu_i, var_i = np.atleast_2d(mu_i), np.atleast_2d(var_i)
    if np.any(var_i <= 0) or np.any(var_j <= 0):
        raise NumericFailure("non-positive variance in Wasserstein distance")
    mean_part = ((mu_i - mu_j) ** 2).sum(axis=1)
    std_part = ((np.sqrt(var_i) - np.sqrt(var_j)) ** 2).sum(axis=1)
    return np.sqrt(mean_part + std_part)


def wasserstein_select(pool: PoolState, dataset: Dataset, vae_model: ModelTriple,
                       labeled_stats: tuple[np.ndarray, np.ndarray], b: int) -> AcquisitionResult:
    """Most-distant samples from the labeled pool's latent Gaussian."""
    start = time.perf_counter()
    mu_j, var_j = labeled_stats
    idx, x = _unlabeled_features(pool, dataset)
    mu, logvar = vae_model.encoder.forward(_tensor(x))
    scores = gaussian_wasserstein(mu.data, np.exp(logvar.data), mu_j, var_j)
    selected, sel_scores = top_k(idx, scores, b)
    return AcquisitionResult(selected, sel_scores, "wasserstein", _timed(start))


def _task_of(model):
    return model.task if isinstance(model, ModelTriple) else model


def _tensor(x: np.ndarray):
    from .autodiff import Tensor

    return Tensor(np.asarray(x, dtype=np.float64))


@dataclass
class StrategyBundle:
    """Model state a dispatcher call may need, depending on the strategy."""

    models: ModelTriple | None = None
    ensemble: list | None = None


def acquire(request: AcquisitionRequest, pool: PoolState, dataset: Dataset,
            bundle: StrategyBundle) -> AcquisitionResult:
    """Dispatch an acquisition request to its strategy implementation."""
    if request.budget > len(pool.unlabeled):
        raise ContractViolation(
            f"budget {request.budget} exceeds unlabeled pool of {len(pool.unlabeled)}")
    s = request.strategy
    if s == "random":
        return random_select(pool, request.budget, request.seed)
    if s == "ensemble_varr":
        if not bundle.ensemble:
            raise ConfigurationError("ensemble_varr needs an ensemble in the bundle")
        return ensemble_varr_select(pool, dataset, bundle.ensemble, request.budget)
    models = bundle.models
    if models is None:
        raise ConfigurationError(f"strategy {s!r} needs models in the bundle")
    if s == "vaal":
        return vaal_select(pool, dataset, models, request.budget)
    if s == "max_entropy":
        return max_entropy_select(pool, dataset, models.task, request.budget)
    if s == "mc_dropout":
        return mc_dropout_select(pool, dataset, models.task, request.budget,
                                 mask_count=request.strategy_params.get("mask_count", 10),
                                 seed=request.seed)
    if s == "coreset":
        return coreset_select(pool, dataset, models.task, request.budget)
    if s == "wasserstein":
        stats = labeled_latent_stats(pool, dataset, models)
        return wasserstein_select(pool, dataset, models, stats, request.budget)
    raise ConfigurationError(f"unknown strategy {s!r}")
