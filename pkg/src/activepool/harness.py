"""Experiment orchestration: acquisition curves, ablations, timing, export.

A run repeats the round loop per repetition seed: train fresh models on
the current pools, evaluate task accuracy on the held-out test split,
acquire one budget batch, annotate through the configured oracle, and
continue until the largest target fraction. Curves aggregate mean/std
accuracy across repetitions at each target fraction.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import (
    AcquisitionRequest,
    AcquisitionResult,
    StrategyBundle,
    STRATEGIES,
    acquire,
    bottom_k,
)
from .errors import ConfigurationError, ContractViolation
from .losses import discriminator_loss, task_loss
from .models import ModelTriple, TaskNet, build_models
from .pool import (
    BiasConfig,
    Dataset,
    OracleConfig,
    PoolState,
    annotate,
    init_pools,
    load_dataset,
    make_gaussian_mixture,
)
from .rng import spawn_seeds, stream
from .trainer import (
    AdamState,
    TrainConfig,
    _BatchCycler,
    _pool_arrays,
    optimizer_step,
    train,
    train_task_only,
)
from .autodiff import Tensor, gradients

ABLATIONS = ("no_vae", "frozen_vae", "no_discriminator")
OUTPUT_DIR_ENV = "ACTIVEPOOL_OUTPUT_DIR"

_DEFAULT_FRACTIONS = (0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40)


@dataclass(frozen=True)
class ArchConfig:
    """Widths for the desk-scale networks."""

    latent_dim: int = 8
    vae_hidden: int = 64
    disc_hidden: int = 64
    task_hidden: tuple[int, ...] = (64,)
    task_dropout: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "task_hidden", tuple(self.task_hidden))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    strategy: str = "vaal"
    initial_fraction: float = 0.10
    budget_fraction: float = 0.05
    target_fractions: tuple[float, ...] = _DEFAULT_FRACTIONS
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    bias: BiasConfig | None = None
    repetitions: int = 5
    ablation: tuple[str, ...] = ()
    arch: ArchConfig = field(default_factory=ArchConfig)
    ensemble_size: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "target_fractions", tuple(self.target_fractions))
        object.__setattr__(self, "ablation", tuple(self.ablation))
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if not 0 < self.initial_fraction < 1 or not 0 < self.budget_fraction < 1:
            raise ConfigurationError("initial_fraction and budget_fraction must lie in (0, 1)")
        fr = self.target_fractions
        if not fr or any(b <= a for a, b in zip(fr, fr[1:])) or fr[0] < self.initial_fraction \
                or fr[-1] >= 1.0 or fr[0] <= 0:
            raise ConfigurationError("target_fractions must be ascending within (0, 1) "
                                     "and start at or after initial_fraction")
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")
        unknown = set(self.ablation) - set(ABLATIONS)
        if unknown:
            raise ConfigurationError(f"unknown ablation flags {sorted(unknown)}")
        if len(set(self.ablation)) != len(self.ablation):
            raise ConfigurationError("duplicate ablation flags")
        if self.ensemble_size < 2:
            raise ConfigurationError("ensemble_size must be >= 2")


@dataclass(frozen=True)
class CurvePoint:
    labeled_fraction: float
    mean_accuracy: float
    std_accuracy: float
    mean_sample_seconds: float


@dataclass(frozen=True)
class RepetitionResult:
    seed: int
    fractions: tuple[float, ...]
    accuracies: tuple[float, ...]
    sample_seconds: tuple[float, ...]


def resolve_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = dict(cfg.dataset)
    kind = spec.pop("kind", "synthetic")
    if kind == "synthetic":
        return make_gaussian_mixture(**spec)
    if kind == "file":
        return load_dataset(spec["path"])
    raise ConfigurationError(f"unknown dataset kind {kind!r}")


def budget_size(cfg: ExperimentConfig, dataset: Dataset) -> int:
    return max(1, int(round(cfg.budget_fraction * len(dataset.train_indices))))


def validate_schedule(cfg: ExperimentConfig, dataset: Dataset) -> None:
    """Every target fraction must be reachable by whole budget steps."""
    n = len(dataset.train_indices)
    b = budget_size(cfg, dataset)
    start = int(round(cfg.initial_fraction * n))
    for f in cfg.target_fractions:
        count = int(round(f * n))
        if count < start or (count - start) % b != 0:
            raise ConfigurationError(
                f"fraction {f} needs {count - start} extra labels, not a multiple of budget {b}")
    if not dataset.test_indices:
        raise ConfigurationError("dataset has no test split to evaluate on")


def test_accuracy(task: TaskNet, dataset: Dataset) -> float:
    idx = np.asarray(dataset.test_indices, dtype=np.int64)
    probs = task.probs(dataset.features[idx])
    return float((probs.argmax(axis=1) == dataset.true_labels[idx]).mean())


def _needs_vae(strategy: str, ablation: str | None) -> bool:
    if ablation:
        return ablation != "no_vae"
    return strategy in ("vaal", "wasserstein")


def _train_round_models(cfg: ExperimentConfig, dataset: Dataset, pool: PoolState,
                        round_seed: int, ablation: str | None) -> StrategyBundle:
    """Fresh models for one round, trained as the strategy requires."""
    arch = cfg.arch
    dropout = arch.task_dropout
    if cfg.strategy == "mc_dropout" and dropout is None:
        dropout = 0.25
    tcfg = dataclasses.replace(cfg.train, seed=round_seed)

    if ablation == "no_vae":
        models = build_models(dataset.feature_dim, dataset.class_count,
                              latent_dim=arch.latent_dim, vae_hidden=arch.vae_hidden,
                              disc_hidden=arch.disc_hidden, task_hidden=arch.task_hidden,
                              task_dropout=dropout, seed=round_seed,
                              disc_input_dim=dataset.feature_dim)
        train_disc_on_raw(pool, dataset, models, tcfg)
        return StrategyBundle(models=models)

    if ablation == "frozen_vae":
        tcfg = dataclasses.replace(tcfg, alpha1=0.0)
    elif ablation == "no_discriminator" or cfg.strategy == "wasserstein":
        tcfg = dataclasses.replace(tcfg, lambda2=0.0, alpha2=0.0)

    models = build_models(dataset.feature_dim, dataset.class_count,
                          latent_dim=arch.latent_dim, vae_hidden=arch.vae_hidden,
                          disc_hidden=arch.disc_hidden, task_hidden=arch.task_hidden,
                          task_dropout=dropout, seed=round_seed)

    if cfg.strategy == "ensemble_varr" and ablation is None:
        member_seeds = spawn_seeds(round_seed, cfg.ensemble_size, "ensemble")
        ensemble = []
        for ms in member_seeds:
            member = build_models(dataset.feature_dim, dataset.class_count,
                                  latent_dim=arch.latent_dim, task_hidden=arch.task_hidden,
                                  task_dropout=dropout, seed=ms)
            train_task_only(pool, dataset, member, dataclasses.replace(tcfg, seed=ms))
            ensemble.append(member.task)
        train_task_only(pool, dataset, models, tcfg)
        return StrategyBundle(models=models, ensemble=ensemble)

    if _needs_vae(cfg.strategy, ablation):
        train(pool, dataset, models, tcfg)
    else:
        train_task_only(pool, dataset, models, tcfg)
    return StrategyBundle(models=models)


def disc_raw_select(pool: PoolState, dataset: Dataset, models: ModelTriple,
                    b: int) -> AcquisitionResult:
    """Lowest-confidence selection with a discriminator on raw features."""
    start = time.perf_counter()
    idx = np.asarray(pool.unlabeled, dtype=np.int64)
    scores = models.discriminator.scores(dataset.features[idx])
    selected, sel_scores = bottom_k(idx, scores, b)
    return AcquisitionResult(selected, sel_scores, "no_vae", time.perf_counter() - start)


def train_disc_on_raw(pool: PoolState, dataset: Dataset, models: ModelTriple,
                      cfg: TrainConfig) -> None:
    """Ablation loop: discriminator on raw inputs plus the task learner."""
    x_l, y_l, x_u = _pool_arrays(pool, dataset)
    labeled_gen = stream(cfg.seed, "labeled-batches")
    unlabeled_gen = stream(cfg.seed, "unlabeled-batches")
    dropout_gen = stream(cfg.seed, "dropout")
    labeled_batches = _BatchCycler(len(x_l), cfg.batch_size, labeled_gen)
    unlabeled_batches = _BatchCycler(len(x_u), cfg.batch_size, unlabeled_gen)
    iters = int(np.ceil(max(len(x_l), len(x_u)) / cfg.batch_size))
    disc_state = AdamState.for_params(models.disc_params)
    task_state = AdamState.for_params(models.task_params)
    for _ in range(cfg.epochs):
        for _ in range(iters):
            idx_l = labeled_batches.next()
            xl, yl = x_l[idx_l], y_l[idx_l]
            xu = x_u[unlabeled_batches.next()]
            d_loss = discriminator_loss(xl, xu, models)
            if cfg.alpha2 > 0:
                optimizer_step(models.disc_params, gradients(d_loss, models.disc_params),
                               disc_state, cfg.alpha2, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            t_loss = task_loss(xl, yl, models, rng=dropout_gen, train=True)
            if cfg.alpha3 > 0:
                optimizer_step(models.task_params, gradients(t_loss, models.task_params),
                               task_state, cfg.alpha3, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def _select(cfg: ExperimentConfig, dataset: Dataset, pool: PoolState, bundle: StrategyBundle,
            b: int, acquire_seed: int, ablation: str | None) -> AcquisitionResult:
    if ablation == "no_vae":
        return disc_raw_select(pool, dataset, bundle.models, b)
    if ablation == "frozen_vae":
        strategy = "vaal"
    elif ablation == "no_discriminator":
        strategy = "wasserstein"
    else:
        strategy = cfg.strategy
    request = AcquisitionRequest(strategy=strategy, budget=b, seed=acquire_seed)
    return acquire(request, pool, dataset, bundle)


def run_repetition(cfg: ExperimentConfig, dataset: Dataset, rep_seed: int) -> RepetitionResult:
    """One full acquisition trajectory for a single repetition seed."""
    if len(cfg.ablation) > 1:
        raise ConfigurationError("a single run takes at most one ablation flag")
    ablation = cfg.ablation[0] if cfg.ablation else None
    validate_schedule(cfg, dataset)
    n = len(dataset.train_indices)
    b = budget_size(cfg, dataset)
    targets = [int(round(f * n)) for f in cfg.target_fractions]
    max_count = targets[-1]

    pool = init_pools(dataset, cfg.initial_fraction, cfg.bias, seed=rep_seed, oracle=cfg.oracle)
    accuracies: list[float] = []
    times: list[float] = []
    round_index = 0
    while True:
        count = len(pool.labeled)
        is_target = count in targets
        needs_models_for_selection = cfg.strategy != "random" or ablation is not None
        bundle = None
        if is_target or needs_models_for_selection:
            round_seed = spawn_seeds(rep_seed, 1, "round-models", round_index)[0]
            bundle = _train_round_models(cfg, dataset, pool, round_seed, ablation)
        if is_target:
            accuracies.append(test_accuracy(bundle.models.task, dataset))
        if count >= max_count:
            if is_target:
                times.append(0.0)
            break
        acquire_seed = spawn_seeds(rep_seed, 1, "acquire", round_index)[0]
        result = _select(cfg, dataset, pool, bundle or StrategyBundle(), b, acquire_seed, ablation)
        if is_target:
            times.append(result.wall_time)
        pool = annotate(pool, list(result.selected), cfg.oracle, dataset)
        round_index += 1

    return RepetitionResult(seed=rep_seed, fractions=cfg.target_fractions,
                            accuracies=tuple(accuracies), sample_seconds=tuple(times))


def repetition_seeds(cfg: ExperimentConfig) -> list[int]:
    return spawn_seeds(cfg.seed, cfg.repetitions, "repetitions")


def aggregate(reps: list[RepetitionResult]) -> list[CurvePoint]:
    points = []
    fractions = reps[0].fractions
    for i, f in enumerate(fractions):
        accs = [r.accuracies[i] for r in reps]
        secs = [r.sample_seconds[i] for r in reps]
        points.append(CurvePoint(
            labeled_fraction=f,
            mean_accuracy=statistics.fmean(accs),
            std_accuracy=statistics.pstdev(accs) if len(accs) > 1 else 0.0,
            mean_sample_seconds=statistics.fmean(secs),
        ))
    return points


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None,
                   out_dir: str | os.PathLike | None = None) -> list[CurvePoint]:
    """Run all repetitions and aggregate the accuracy curve.

    With ``out_dir`` set, per-repetition results are persisted as they
    complete, so a failed repetition leaves partial results behind.
    """
    dataset = dataset or resolve_dataset(cfg)
    reps: list[RepetitionResult] = []
    out_path = Path(out_dir) if out_dir else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
    try:
        for rep_seed in repetition_seeds(cfg):
            reps.append(run_repetition(cfg, dataset, rep_seed))
            if out_path:
                _persist_partial(out_path, reps)
    except Exception:
        if out_path and reps:
            _persist_partial(out_path, reps)
        raise
    return aggregate(reps)


def _persist_partial(out_path: Path, reps: list[RepetitionResult]) -> None:
    payload = [dataclasses.asdict(r) for r in reps]
    (out_path / "repetitions.json").write_text(json.dumps(payload, sort_keys=True, indent=1))


def run_ablation(cfg: ExperimentConfig, dataset: Dataset | None = None) -> dict[str, list[CurvePoint]]:
    """Run every ablation variant named in the config."""
    if not cfg.ablation:
        raise ConfigurationError("run_ablation requires at least one ablation flag")
    dataset = dataset or resolve_dataset(cfg)
    curves = {}
    for variant in cfg.ablation:
        variant_cfg = dataclasses.replace(cfg, ablation=(variant,))
        curves[variant] = run_experiment(variant_cfg, dataset)
    return curves


@dataclass(frozen=True)
class TimingRow:
    strategy: str
    seconds: float


def time_sampling(cfg: ExperimentConfig, strategies: list[str],
                  dataset: Dataset | None = None, repeats: int = 3) -> list[TimingRow]:
    """Median selection wall time per strategy on one shared pool + models.

    One warm-up call precedes ``repeats`` timed calls. All strategies see
    identical pools and read features through the same accessor; training
    time is excluded.
    """
    if repeats < 3:
        raise ConfigurationError("need at least 3 timed repetitions")
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {s!r}")
    dataset = dataset or resolve_dataset(cfg)
    pool = init_pools(dataset, cfg.initial_fraction, cfg.bias, seed=cfg.seed, oracle=cfg.oracle)
    b = budget_size(cfg, dataset)

    arch = cfg.arch
    dropout = arch.task_dropout if arch.task_dropout is not None else 0.25
    models = build_models(dataset.feature_dim, dataset.class_count, latent_dim=arch.latent_dim,
                          vae_hidden=arch.vae_hidden, disc_hidden=arch.disc_hidden,
                          task_hidden=arch.task_hidden, task_dropout=dropout, seed=cfg.seed)
    train(pool, dataset, models, cfg.train)
    ensemble = []
    if "ensemble_varr" in strategies:
        for ms in spawn_seeds(cfg.seed, cfg.ensemble_size, "ensemble"):
            member = build_models(dataset.feature_dim, dataset.class_count,
                                  task_hidden=arch.task_hidden, task_dropout=dropout, seed=ms)
            train_task_only(pool, dataset, member, dataclasses.replace(cfg.train, seed=ms))
            ensemble.append(member.task)
    bundle = StrategyBundle(models=models, ensemble=ensemble)

    rows = []
    for s in strategies:
        request = AcquisitionRequest(strategy=s, budget=b, seed=cfg.seed)
        acquire(request, pool, dataset, bundle)  # warm-up
        samples = [acquire(request, pool, dataset, bundle).wall_time for _ in range(repeats)]
        rows.append(TimingRow(strategy=s, seconds=statistics.median(samples)))
    return rows


# -- serialization ----------------------------------------------------------


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["bias"] = dataclasses.asdict(cfg.bias) if cfg.bias else None
    return d


def config_from_dict(raw: dict) -> ExperimentConfig:
    data = dict(raw)
    try:
        if "train" in data and isinstance(data["train"], dict):
            data["train"] = TrainConfig(**data["train"])
        if "oracle" in data and isinstance(data["oracle"], dict):
            data["oracle"] = OracleConfig(**data["oracle"])
        if data.get("bias") is not None and isinstance(data["bias"], dict):
            data["bias"] = BiasConfig(**data["bias"])
        if "arch" in data and isinstance(data["arch"], dict):
            data["arch"] = ArchConfig(**data["arch"])
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad experiment config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def build_id(cfg: ExperimentConfig, seeds: list[int]) -> str:
    blob = json.dumps({"config": config_to_dict(cfg), "seeds": seeds}, sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()


def export_results(curves: list[CurvePoint], path,
                   cfg: ExperimentConfig | None = None,
                   seeds: list[int] | None = None) -> tuple[Path, Path]:
    """Write the curve CSV plus a JSON manifest next to it.

    Floats are rendered with ``repr`` (17 significant digits), and the
    manifest has stable key order, so identical inputs give identical
    bytes.
    """
    csv_path = Path(path)
    manifest_path = csv_path.with_suffix(".manifest.json")
    try:
        with open(csv_path, "w") as fh:
            fh.write("fraction,mean,std,time\n")
            for p in curves:
                fh.write(f"{p.labeled_fraction!r},{p.mean_accuracy!r},"
                         f"{p.std_accuracy!r},{p.mean_sample_seconds!r}\n")
        seeds = seeds if seeds is not None else (repetition_seeds(cfg) if cfg else [])
        manifest = {
            "config": config_to_dict(cfg) if cfg else None,
            "seeds": seeds,
            "build_id": build_id(cfg, seeds) if cfg else None,
            "curves": [dataclasses.asdict(p) for p in curves],
        }
        manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    except OSError as exc:
        raise IOError(f"cannot write results to {csv_path}: {exc}") from exc
    return csv_path, manifest_path


def parse_results(csv_path) -> list[CurvePoint]:
    """Read back an exported curve CSV."""
    lines = Path(csv_path).read_text().strip().splitlines()
    points = []
    for line in lines[1:]:
        fraction, mean, std, seconds = (float(v) for v in line.split(","))
        points.append(CurvePoint(fraction, mean, std, seconds))
    return points
