"""Dataset ingestion, labeled/unlabeled pool bookkeeping, and oracle simulators.

A :class:`PoolState` is an immutable partition of a dataset's train
indices; every mutation (:func:`init_pools`, :func:`annotate`) returns a
new state and preserves the partition invariant. Oracles are simulated
here: the ideal oracle returns ground truth, the noisy oracle corrupts a
fixed seeded subset of the training set within superclasses, and the
``external`` kind defers to labels supplied by the caller (the labeling
service).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .rng import stream

logger = logging.getLogger(__name__)

_CONTAINER_MAGIC = b"ALPOOLDS"
_CONTAINER_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass(frozen=True)
class Dataset:
    """A fixed classification dataset with train/val/test splits.

    ``samples`` is row-major, one feature vector per row. Labels are
    class indices in ``[0, class_count)``. ``superclass_map`` (class ->
    superclass), when present, must cover every class; it drives the
    noisy-oracle simulation.
    """

    samples: np.ndarray
    true_labels: np.ndarray
    class_count: int
    train_indices: tuple[int, ...]
    val_indices: tuple[int, ...] = ()
    test_indices: tuple[int, ...] = ()
    superclass_map: dict[int, int] | None = None
    class_names: tuple[str, ...] | None = None
    _noise_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        object.__setattr__(self, "samples", samples)
        labels = np.asarray(self.true_labels, dtype=np.int64)
        object.__setattr__(self, "true_labels", labels)
        if labels.shape != (samples.shape[0],):
            raise ConfigurationError("one label per sample required")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ConfigurationError("labels must lie in [0, class_count)")
        for name in ("train_indices", "val_indices", "test_indices"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        splits = [set(self.train_indices), set(self.val_indices), set(self.test_indices)]
        if sum(len(s) for s in splits) != len(set().union(*splits)):
            raise ConfigurationError("train/val/test index sets must be disjoint")
        if self.superclass_map is not None:
            missing = set(range(self.class_count)) - set(self.superclass_map)
            if missing:
                raise ConfigurationError(f"superclass_map missing classes {sorted(missing)}")

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.samples.shape[1:]))

    @property
    def features(self) -> np.ndarray:
        """Samples flattened to (n, feature_dim), float64."""
        return self.samples.reshape(self.samples.shape[0], -1)

    def class_name(self, c: int) -> str:
        if self.class_names is not None:
            return self.class_names[c]
        return f"class {c}"


@dataclass(frozen=True)
class PoolState:
    """Partition of the train indices plus the oracle-label store.

    ``labeled`` and ``unlabeled`` are kept sorted ascending so that all
    downstream tie-breaking is storage-order independent.
    """

    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]
    acquired_labels: dict[int, int]
    round: int = 0

    def __post_init__(self):
        object.__setattr__(self, "labeled", tuple(sorted(int(i) for i in self.labeled)))
        object.__setattr__(self, "unlabeled", tuple(sorted(int(i) for i in self.unlabeled)))
        object.__setattr__(
            self, "acquired_labels", {int(k): int(v) for k, v in self.acquired_labels.items()}
        )
        if set(self.labeled) & set(self.unlabeled):
            raise ContractViolation("labeled and unlabeled pools overlap")
        if set(self.acquired_labels) != set(self.labeled):
            raise ContractViolation("acquired_labels keys must equal the labeled pool")


@dataclass(frozen=True)
class OracleConfig:
    """Which oracle answers annotation queries.

    ``noise_fraction`` is the fraction of the *training set* whose labels
    are corrupted (chosen once per experiment by ``rng_seed``); 0 makes
    the noisy oracle identical to the ideal one.
    """

    kind: str = "ideal"
    noise_fraction: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ideal", "noisy", "external"):
            raise ConfigurationError(f"unknown oracle kind {self.kind!r}")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ConfigurationError("noise_fraction must be in [0, 1]")
        if self.kind != "noisy" and self.noise_fraction != 0.0:
            raise ConfigurationError("noise_fraction requires kind='noisy'")

    @property
    def applies_noise(self) -> bool:
        return self.kind == "noisy" and self.noise_fraction > 0.0


@dataclass(frozen=True)
class BiasConfig:
    """Exclude ``excluded_class_count`` random classes from the initial pool."""

    excluded_class_count: int
    rng_seed: int = 0

    def __post_init__(self):
        if self.excluded_class_count < 0:
            raise ConfigurationError("excluded_class_count must be non-negative")

    def excluded_classes(self, class_count: int) -> frozenset[int]:
        if self.excluded_class_count >= class_count:
            raise ConfigurationError(
                f"cannot exclude {self.excluded_class_count} of {class_count} classes"
            )
        gen = stream(self.rng_seed, "bias-classes")
        chosen = gen.choice(class_count, size=self.excluded_class_count, replace=False)
        return frozenset(int(c) for c in chosen)


def noise_table(oracle: OracleConfig, dataset: Dataset) -> dict[int, int]:
    """Map train index -> corrupted label for the designated noised subset.

    Membership and replacement labels are fixed by ``oracle.rng_seed``,
    so repeated queries of one sample always agree. Replacement labels
    are drawn uniformly from the true label's superclass, excluding the
    true label. Classes whose superclass has a single member pass
    through unchanged (counted and logged).
    """
    if not oracle.applies_noise:
        return {}
    if dataset.superclass_map is None:
        raise ConfigurationError("noisy oracle requires a dataset superclass_map")
    cached = dataset._noise_cache.get(oracle)
    if cached is not None:
        return cached

    train = np.asarray(dataset.train_indices, dtype=np.int64)
    count = int(round(oracle.noise_fraction * len(train)))
    gen = stream(oracle.rng_seed, "noise-membership")
    designated = gen.choice(train, size=count, replace=False)

    by_super: dict[int, list[int]] = {}
    for cls, sup in dataset.superclass_map.items():
        by_super.setdefault(sup, []).append(cls)

    table: dict[int, int] = {}
    singletons = 0
    for idx in sorted(int(i) for i in designated):
        true = int(dataset.true_labels[idx])
        siblings = [c for c in by_super[dataset.superclass_map[true]] if c != true]
        if not siblings:
            singletons += 1
            table[idx] = true
            continue
        pick = stream(oracle.rng_seed, "noise-label", idx)
        table[idx] = int(siblings[pick.integers(0, len(siblings))])
    if singletons:
        logger.warning("noisy oracle: %d designated samples in singleton superclasses pass through", singletons)
    dataset._noise_cache[oracle] = table
    return table


def oracle_label(index: int, oracle: OracleConfig, dataset: Dataset) -> int:
    """Label the oracle returns for one sample index."""
    index = int(index)
    if not 0 <= index < len(dataset.true_labels):
        raise ContractViolation(f"sample index {index} out of range")
    if oracle.kind == "external":
        raise ContractViolation("external oracle labels must be supplied by the caller")
    if oracle.applies_noise:
        table = noise_table(oracle, dataset)
        if index in table:
            return table[index]
    return int(dataset.true_labels[index])


def init_pools(
    dataset: Dataset,
    initial_fraction: float,
    bias: BiasConfig | None = None,
    seed: int = 0,
    oracle: OracleConfig | None = None,
) -> PoolState:
    """Create round-0 pools with a uniformly drawn initial labeled set.

    With ``bias`` set, the draw is restricted to samples outside the
    excluded classes. Initial labels come from ``oracle`` (ideal when
    omitted) so dataset-level label corruption also reaches the seed pool.
    """
    if not 0.0 < initial_fraction < 1.0:
        raise ConfigurationError("initial_fraction must lie strictly between 0 and 1")
    train = np.asarray(dataset.train_indices, dtype=np.int64)
    if len(train) == 0:
        raise ConfigurationError("dataset has no training samples")
    quota = int(round(initial_fraction * len(train)))
    if quota < 1:
        raise ConfigurationError("initial_fraction selects zero samples")

    if bias is not None:
        excluded = bias.excluded_classes(dataset.class_count)
        mask = ~np.isin(dataset.true_labels[train], sorted(excluded))
        eligible = train[mask]
    else:
        eligible = train
    if len(eligible) < quota:
        raise ConfigurationError(
            f"only {len(eligible)} eligible samples for an initial pool of {quota}"
        )

    gen = stream(seed, "init-pool")
    chosen = gen.choice(eligible, size=quota, replace=False)
    labeled = set(int(i) for i in chosen)
    unlabeled = set(int(i) for i in train) - labeled

    oracle = oracle or OracleConfig()
    labels = {i: oracle_label(i, oracle, dataset) for i in labeled}
    return PoolState(labeled=tuple(labeled), unlabeled=tuple(unlabeled), acquired_labels=labels, round=0)


def annotate(
    pool: PoolState,
    selected: list[int],
    oracle: OracleConfig,
    dataset: Dataset,
    labels: dict[int, int] | None = None,
) -> PoolState:
    """Move ``selected`` to the labeled pool with oracle labels; bump the round.

    For ``kind='external'`` the caller must pass ``labels`` (the labeling
    service collects them from humans); simulated oracles ignore it.
    """
    selected = [int(i) for i in selected]
    if not selected:
        raise ContractViolation("selected batch is empty")
    if len(set(selected)) != len(selected):
        raise ContractViolation("selected batch contains duplicates")
    unlabeled = set(pool.unlabeled)
    outside = [i for i in selected if i not in unlabeled]
    if outside:
        raise ContractViolation(f"indices not in unlabeled pool: {sorted(outside)[:8]}")

    if oracle.kind == "external":
        if labels is None or set(labels) != set(selected):
            raise ContractViolation("external oracle requires a label for every selected index")
        new_labels = {int(i): int(labels[i]) for i in selected}
        bad = [i for i, c in new_labels.items() if not 0 <= c < dataset.class_count]
        if bad:
            raise ContractViolation(f"labels out of range for indices {sorted(bad)[:8]}")
    else:
        new_labels = {i: oracle_label(i, oracle, dataset) for i in selected}

    acquired = dict(pool.acquired_labels)
    acquired.update(new_labels)
    return PoolState(
        labeled=tuple(set(pool.labeled) | set(selected)),
        unlabeled=tuple(unlabeled - set(selected)),
        acquired_labels=acquired,
        round=pool.round + 1,
    )


def check_partition(pool: PoolState, dataset: Dataset) -> None:
    """Exhaustive audit that the pool partitions the train indices."""
    train = set(dataset.train_indices)
    labeled, unlabeled = set(pool.labeled), set(pool.unlabeled)
    if labeled & unlabeled:
        raise ContractViolation("pools overlap")
    if labeled | unlabeled != train:
        raise ContractViolation("pools do not cover the train indices")
    if set(pool.acquired_labels) != labeled:
        raise ContractViolation("acquired label keys differ from labeled pool")


def pool_snapshot(pool: PoolState) -> dict:
    """JSON-ready snapshot (labeled indices, acquired labels, round)."""
    return {
        "round": pool.round,
        "labeled": list(pool.labeled),
        "acquired_labels": {str(i): pool.acquired_labels[i] for i in pool.labeled},
    }


def dumps_snapshot(pool: PoolState) -> bytes:
    """Canonical snapshot bytes: stable key order, no whitespace drift."""
    return json.dumps(pool_snapshot(pool), sort_keys=True, separators=(",", ":")).encode()


def make_gaussian_mixture(
    classes: int = 8,
    dim: int = 32,
    per_class: int | list[int] = 250,
    seed: int = 0,
    test_count: int | None = None,
    val_count: int = 0,
    separation: float = 2.2,
    spread: float = 1.0,
    superclasses: int | None = None,
    class_weights: list[float] | None = None,
) -> Dataset:
    """Seeded Gaussian-mixture classification dataset.

    Class means sit at ``separation``-scaled random directions; samples
    add ``spread``-scaled isotropic noise. ``per_class`` sets train
    counts, either one shared count or a per-class list (imbalanced
    pools). Test/val classes are drawn from ``class_weights`` (uniform
    by default) so any total count is exact. ``superclasses`` groups
    classes round-robin into coarse bins for noisy-oracle experiments.
    """
    counts = [per_class] * classes if isinstance(per_class, int) else list(per_class)
    if classes < 2 or dim < 1 or len(counts) != classes or min(counts) < 1:
        raise ConfigurationError("need classes >= 2, dim >= 1, and a positive count per class")
    gen = stream(seed, "gaussian-mixture")
    means = gen.normal(0.0, 1.0, size=(classes, dim))
    means *= separation / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)

    if test_count is None:
        test_count = sum(counts) // 4
    weights = None
    if class_weights is not None:
        weights = np.asarray(class_weights, dtype=np.float64)
        if weights.shape != (classes,) or weights.min() < 0 or weights.sum() <= 0:
            raise ConfigurationError("class_weights must be a non-negative length-`classes` vector")
        weights = weights / weights.sum()

    train_labels = np.repeat(np.arange(classes), counts)
    gen.shuffle(train_labels)
    extra = gen.choice(classes, size=test_count + val_count, p=weights)
    labels = np.concatenate([train_labels, extra])
    samples = means[labels] + spread * gen.normal(0.0, 1.0, size=(len(labels), dim))

    n_train = sum(counts)
    superclass_map = None
    if superclasses is not None:
        if not 1 <= superclasses <= classes:
            raise ConfigurationError("superclasses must be in [1, classes]")
        superclass_map = {c: c % superclasses for c in range(classes)}
    return Dataset(
        samples=samples,
        true_labels=labels,
        class_count=classes,
        train_indices=tuple(range(n_train)),
        val_indices=tuple(range(n_train, n_train + val_count)),
        test_indices=tuple(range(n_train + val_count, n_train + val_count + test_count)),
        superclass_map=superclass_map,
    )


def save_dataset(dataset: Dataset, path) -> None:
    """Write the self-describing binary container."""
    meta = {
        "class_names": list(dataset.class_names) if dataset.class_names else None,
        "splits": {
            "train": list(dataset.train_indices),
            "val": list(dataset.val_indices),
            "test": list(dataset.test_indices),
        },
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    samples = np.ascontiguousarray(dataset.samples)
    shape = samples.shape
    with open(path, "wb") as fh:
        fh.write(_CONTAINER_MAGIC)
        fh.write(struct.pack("<IQ", _CONTAINER_VERSION, shape[0]))
        fh.write(struct.pack("<I", len(shape) - 1))
        for d in shape[1:]:
            fh.write(struct.pack("<Q", d))
        fh.write(struct.pack("<II", _DTYPE_CODES[samples.dtype], dataset.class_count))
        fh.write(struct.pack("<B", 1 if dataset.superclass_map is not None else 0))
        fh.write(samples.tobytes())
        fh.write(np.ascontiguousarray(dataset.true_labels, dtype=np.int64).tobytes())
        if dataset.superclass_map is not None:
            table = np.array(
                [dataset.superclass_map[c] for c in range(dataset.class_count)], dtype=np.int64
            )
            fh.write(table.tobytes())
        fh.write(struct.pack("<Q", len(meta_blob)))
        fh.write(meta_blob)


def load_dataset(path) -> Dataset:
    """Read a container written by :func:`save_dataset`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CONTAINER_MAGIC))
        if magic != _CONTAINER_MAGIC:
            raise ConfigurationError(f"{path}: not a dataset container")
        version, count = struct.unpack("<IQ", fh.read(12))
        if version != _CONTAINER_VERSION:
            raise ConfigurationError(f"{path}: unsupported container version {version}")
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = [struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim)]
        dtype_code, class_count = struct.unpack("<II", fh.read(8))
        (has_super,) = struct.unpack("<B", fh.read(1))
        dtype = np.dtype(_DTYPES[dtype_code])
        n_values = count * int(np.prod(dims)) if dims else count
        samples = np.frombuffer(fh.read(n_values * dtype.itemsize), dtype=dtype)
        samples = samples.reshape([count, *dims])
        labels = np.frombuffer(fh.read(count * 8), dtype=np.int64)
        superclass_map = None
        if has_super:
            table = np.frombuffer(fh.read(class_count * 8), dtype=np.int64)
            superclass_map = {c: int(table[c]) for c in range(class_count)}
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode())
    names = meta.get("class_names")
    splits = meta["splits"]
    return Dataset(
        samples=samples.astype(np.float64),
        true_labels=labels.copy(),
        class_count=class_count,
        train_indices=tuple(splits["train"]),
        val_indices=tuple(splits["val"]),
        test_indices=tuple(splits["test"]),
        superclass_map=superclass_map,
        class_names=tuple(names) if names else None,
    )
