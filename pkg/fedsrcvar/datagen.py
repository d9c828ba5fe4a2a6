"""Datasets: synthetic planted-subgroup generator, CSV ingestion, client partitioning"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd  # type: ignore

from .errors import CsvError, DataError, ParameterError, PartitionError

logger = logging.getLogger(__name__)

MAJORITY_OFFSET = 3.0
CLUSTER_STD = 0.5


@dataclass(frozen=True)
class Dataset:
    """Features and labels; latent_group and fold are evaluation metadata"""

    features: np.ndarray
    labels: np.ndarray
    latent_group: Optional[np.ndarray] = None
    fold: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=float)
        if features.ndim != 2 or features.shape[0] == 0:
            raise DataError("empty dataset")
        if labels.shape != (features.shape[0],):
            raise DataError(
                f"{labels.shape[0] if labels.ndim else 0} labels for {features.shape[0]} rows"
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(
            self.features[indices],
            self.labels[indices],
            None if self.latent_group is None else self.latent_group[indices],
            None if self.fold is None else self.fold[indices],
        )


@dataclass(frozen=True)
class Shard:
    """One client's local data. Carries no latent-group metadata."""

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    @property
    def n(self) -> int:
        return self.features.shape[0]


class PartitionStrategy(str, Enum):
    EVEN = "even"
    BY_LABEL = "by_label"
    DIRICHLET = "dirichlet"
    BY_LATENT_GROUP = "by_latent_group"


@dataclass(frozen=True)
class PartitionPlan:
    strategy: PartitionStrategy = PartitionStrategy.EVEN
    num_clients: int = 2
    seed: int = 0
    alpha: float = 0.5

    def __post_init__(self):
        try:
            object.__setattr__(self, "strategy", PartitionStrategy(self.strategy))
        except ValueError:
            raise ParameterError(f"unknown partition strategy {self.strategy!r}", "strategy")
        if self.num_clients < 1:
            raise ParameterError("num_clients must be at least 1", "num_clients")
        if not self.alpha > 0:
            raise ParameterError("alpha must be positive", "alpha")


@dataclass(frozen=True)
class CsvSchema:
    label_column: str
    feature_columns: List[str] = field(default_factory=list)
    fold_column: Optional[str] = None
    test_fold: Optional[int] = None
    positive_label: Optional[str] = None
    feature_radius: float = 1.0
    # without a fold column, a seeded random test fraction is marked as fold 1
    test_frac: Optional[float] = None
    split_seed: int = 0


RANDOM_TEST_FOLD = 1


def normalize_to_ball(features: np.ndarray, radius: float) -> np.ndarray:
    """Rescale globally so that the largest row norm equals radius"""
    largest = float(np.linalg.norm(features, axis=1).max())
    if largest == 0.0:
        return features
    return features * (radius / largest)


def gen_planted_subgroup(
    n: int,
    d: int,
    minority_frac: float,
    label_noise_minority: float,
    seed: int,
    minority_separation: float = 1.0,
    feature_radius: float = 1.0,
) -> Dataset:
    """Majority: two well separated Gaussians at +-3 along the first axis, one per label.
    Minority: a cluster centred on the first axis whose label means sit at
    +-minority_separation along the second axis, with labels flipped at rate
    label_noise_minority. The two groups need different directions, so a norm-bounded
    linear model has to trade one against the other.
    """
    if n < 2 or d < 2:
        raise ParameterError("need n >= 2 samples and d >= 2 features")
    if not 0.0 < minority_frac < 1.0:
        raise ParameterError("minority_frac must lie in (0, 1)", "minority_frac")
    if not 0.0 <= label_noise_minority <= 0.5:
        raise ParameterError("label_noise_minority must lie in [0, 0.5]", "label_noise_minority")
    n_minority = int(round(n * minority_frac))
    if not 1 <= n_minority <= n - 1:
        raise ParameterError(f"minority_frac {minority_frac} leaves an empty group for n = {n}")

    rng = np.random.default_rng(seed)
    group = np.zeros(n, dtype=int)
    group[rng.permutation(n)[:n_minority]] = 1
    labels = rng.integers(0, 2, size=n).astype(float)
    signs = 2.0 * labels - 1.0
    features = rng.normal(0.0, CLUSTER_STD, size=(n, d))
    minority = group == 1
    features[~minority, 0] += MAJORITY_OFFSET * signs[~minority]
    features[minority, 1] += minority_separation * signs[minority]
    flips = minority & (rng.random(n) < label_noise_minority)
    labels[flips] = 1.0 - labels[flips]
    logger.debug("planted subgroup: n=%d minority=%d flipped=%d", n, n_minority, flips.sum())
    return Dataset(normalize_to_ball(features, feature_radius), labels, latent_group=group)


def train_test_split(dataset: Dataset, test_frac: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0.0 < test_frac < 1.0:
        raise ParameterError("test_frac must lie in (0, 1)", "test_frac")
    n_test = int(round(dataset.n * test_frac))
    if not 1 <= n_test <= dataset.n - 1:
        raise DataError(f"cannot split {dataset.n} samples with test_frac {test_frac}")
    order = np.random.default_rng(seed).permutation(dataset.n)
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
    bad = ~np.isfinite(values.to_numpy(dtype=float))
    if bad.any():
        row = int(np.argmax(bad))
        value = frame[column].iloc[row]
        raise CsvError(f"invalid numeric value {value!r} in column {column!r}", line=row + 2)
    return values.to_numpy(dtype=float)


def _binary_labels(raw: pd.Series, column: str, positive_label: Optional[str]) -> np.ndarray:
    raw = raw.str.strip()
    distinct = list(dict.fromkeys(raw))
    if len(distinct) > 2:
        offending = distinct[2]
        row = int(np.argmax((raw == offending).to_numpy()))
        raise CsvError(
            f"label column {column!r} has a third class value {offending!r}", line=row + 2
        )
    if positive_label is not None:
        if positive_label not in distinct:
            raise CsvError(
                f"positive label {positive_label!r} not found in column {column!r}", line=2
            )
        return (raw == positive_label).to_numpy(dtype=float)
    numeric = pd.to_numeric(raw, errors="coerce")
    if not numeric.isna().any() and set(numeric.unique()) <= {0.0, 1.0}:
        return numeric.to_numpy(dtype=float)
    # two arbitrary class names: the lexicographically larger one is positive
    return (raw == max(distinct)).to_numpy(dtype=float)


def load_csv(path: Union[str, Path], schema: CsvSchema) -> Dataset:
    """Read a headed UTF-8 CSV, standardize features with training-row statistics and
    rescale so the largest row norm equals the feature radius."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise CsvError("empty file", line=1)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}")
    required = [schema.label_column] + list(schema.feature_columns)
    if schema.fold_column:
        required.append(schema.fold_column)
    for column in required:
        if column not in frame.columns:
            raise CsvError(f"missing column {column!r}", line=1)
    if len(frame) == 0:
        raise CsvError("header without data rows (empty dataset)", line=2)

    features = np.column_stack([_numeric_column(frame, c) for c in schema.feature_columns])
    labels = _binary_labels(frame[schema.label_column], schema.label_column, schema.positive_label)
    fold = None
    train_rows = np.ones(len(frame), dtype=bool)
    if schema.fold_column:
        fold = _numeric_column(frame, schema.fold_column).astype(int)
        if schema.test_fold is not None:
            train_rows = fold != schema.test_fold
            if not train_rows.any():
                raise DataError(f"fold {schema.test_fold} leaves no training rows")
    elif schema.test_frac is not None:
        n_test = int(round(len(frame) * schema.test_frac))
        if not 1 <= n_test <= len(frame) - 1:
            raise DataError(f"cannot split {len(frame)} rows with test_frac {schema.test_frac}")
        fold = np.zeros(len(frame), dtype=int)
        fold[np.random.default_rng(schema.split_seed).permutation(len(frame))[:n_test]] = (
            RANDOM_TEST_FOLD
        )
        train_rows = fold != RANDOM_TEST_FOLD

    mean = features[train_rows].mean(axis=0)
    std = features[train_rows].std(axis=0)
    std[std == 0.0] = 1.0
    features = normalize_to_ball((features - mean) / std, schema.feature_radius)
    logger.info("loaded %d rows x %d features from %s", features.shape[0], features.shape[1], path)
    return Dataset(features, labels, fold=fold)


def split_by_fold(dataset: Dataset, test_fold: int) -> Tuple[Dataset, Dataset]:
    if dataset.fold is None:
        raise DataError("dataset has no fold column")
    test = dataset.fold == test_fold
    if test.all() or not test.any():
        raise DataError(f"fold {test_fold} does not split the dataset")
    return dataset.subset(np.flatnonzero(~test)), dataset.subset(np.flatnonzero(test))


def _assign_by_key(keys: np.ndarray, num_clients: int, rng) -> List[List[int]]:
    """Clients aligned with key values: key j goes to clients k with k % L == j"""
    values = np.unique(keys)
    owners_of = {}
    for j, value in enumerate(values):
        if num_clients >= len(values):
            owners_of[value] = [k for k in range(num_clients) if k % len(values) == j]
        else:
            owners_of[value] = [j % num_clients]
    assignment: List[List[int]] = [[] for _ in range(num_clients)]
    for value in values:
        owners = owners_of[value]
        members = rng.permutation(np.flatnonzero(keys == value))
        for position, index in enumerate(members):
            assignment[owners[position % len(owners)]].append(int(index))
    return assignment


def _assign_dirichlet(labels: np.ndarray, num_clients: int, alpha: float, rng) -> List[List[int]]:
    assignment: List[List[int]] = [[] for _ in range(num_clients)]
    for value in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == value))
        proportions = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(proportions) * len(members)).astype(int)[:-1]
        for client_id, part in enumerate(np.split(members, cuts)):
            assignment[client_id].extend(int(i) for i in part)
    return assignment


def partition(dataset: Dataset, plan: PartitionPlan) -> List[Shard]:
    """Disjoint cover of the dataset by plan.num_clients non-empty shards"""
    num_clients = plan.num_clients
    if num_clients > dataset.n:
        raise PartitionError(f"{num_clients} clients for {dataset.n} samples")
    rng = np.random.default_rng(plan.seed)
    if plan.strategy is PartitionStrategy.EVEN:
        assignment = [list(range(k, dataset.n, num_clients)) for k in range(num_clients)]
    elif plan.strategy is PartitionStrategy.BY_LABEL:
        assignment = _assign_by_key(dataset.labels, num_clients, rng)
    elif plan.strategy is PartitionStrategy.DIRICHLET:
        assignment = _assign_dirichlet(dataset.labels, num_clients, plan.alpha, rng)
    else:
        if dataset.latent_group is None:
            raise PartitionError("dataset has no latent groups")
        assignment = _assign_by_key(dataset.latent_group, num_clients, rng)

    shards = []
    for client_id, members in enumerate(assignment):
        if not members:
            raise PartitionError(f"{plan.strategy.value} partition left it empty", client_id)
        indices = np.array(sorted(members), dtype=int)
        shards.append(
            Shard(client_id, dataset.features[indices], dataset.labels[indices], indices)
        )
    logger.debug("partition %s: sizes %s", plan.strategy.value, [s.n for s in shards])
    return shards


def pool_shards(shards: Sequence[Shard]) -> Shard:
    """Single shard holding the union of all shards, in client order"""
    return Shard(
        0,
        np.concatenate([s.features for s in shards]),
        np.concatenate([s.labels for s in shards]),
        np.concatenate([s.indices for s in shards]),
    )
