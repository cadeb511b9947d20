"""Synthetic desk-scale datasets, client partitioning, and backdoor injection.

Datasets are stored column-wise (feature matrix plus label/flag vectors) and
treated as immutable; every transformation returns a new dataset. A CSV hook
lets users substitute real corpora.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import _frozen


class CsvSchemaError(ValueError):
    """The file does not match the declared schema (e.g. missing column)."""


class CsvFormatError(ValueError):
    """Rows could not be parsed; the message lists offending line numbers."""


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    has_property: bool
    is_backdoored: bool


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix (n, d) with labels and per-example property/backdoor flags."""

    features: np.ndarray
    labels: np.ndarray
    has_property: np.ndarray
    is_backdoored: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        p = np.asarray(self.has_property, dtype=bool).ravel()
        b = np.asarray(self.is_backdoored, dtype=bool).ravel()
        if x.ndim != 2:
            raise ValueError("features must be 2-D")
        if not (x.shape[0] == y.size == p.size == b.size):
            raise ValueError("column lengths disagree")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels out of range for num_classes")
        for name, col in (("features", x), ("labels", y), ("has_property", p), ("is_backdoored", b)):
            object.__setattr__(self, name, _frozen(col))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def example(self, i: int) -> Example:
        return Example(
            features=self.features[i],
            label=int(self.labels[i]),
            has_property=bool(self.has_property[i]),
            is_backdoored=bool(self.is_backdoored[i]),
        )

    def examples(self):
        for i in range(len(self)):
            yield self.example(i)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx].copy(),
            self.labels[idx].copy(),
            self.has_property[idx].copy(),
            self.is_backdoored[idx].copy(),
            self.num_classes,
        )

    def replace(self, **cols) -> "Dataset":
        fields = {
            "features": self.features,
            "labels": self.labels,
            "has_property": self.has_property,
            "is_backdoored": self.is_backdoored,
            "num_classes": self.num_classes,
        }
        fields.update(cols)
        return Dataset(**fields)


def concat(datasets: Sequence[Dataset]) -> Dataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    num_classes = datasets[0].num_classes
    if any(d.num_classes != num_classes for d in datasets):
        raise ValueError("num_classes mismatch")
    return Dataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate([d.has_property for d in datasets]),
        np.concatenate([d.is_backdoored for d in datasets]),
        num_classes,
    )


@dataclass(frozen=True)
class PartitionScheme:
    """How the pooled dataset is split across clients.

    kinds: ``iid`` (random equal split; ``stratified`` additionally balances
    class counts per shard), ``two_class_noniid`` (class-sorted partitions,
    two per client), ``by_property`` (property holders go to
    ``target_client``, the rest is spread IID).
    """

    kind: str
    target_client: int = 0
    stratified: bool = False

    def __post_init__(self):
        if self.kind not in ("iid", "two_class_noniid", "by_property"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.stratified and self.kind != "iid":
            raise ValueError("stratified applies to the iid scheme only")


@dataclass(frozen=True)
class TriggerSpec:
    """Single-feature backdoor trigger: set one coordinate, flip the label."""

    pixel_index: int
    trigger_value: float
    target_label: int
    poison_fraction: float = 1.0

    def __post_init__(self):
        if not (0 < self.poison_fraction <= 1):
            raise ValueError("poison_fraction must lie in (0, 1]")
        if self.pixel_index < 0:
            raise ValueError("pixel_index must be non-negative")


def gen_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    property_fraction: float,
    separation: float,
    rng: np.random.Generator,
    *,
    property_strength: float = 3.0,
) -> Dataset:
    """Gaussian cluster per class with an optional property subpopulation.

    The property flag is drawn independently of the label; holders get a mean
    shift of ``property_strength`` on the trailing ``max(1, dim // 4)``
    feature coordinates, so gradients carry a property signal that is
    uncorrelated with the classification task.
    """
    if num_classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 example per class")
    if dim < 2:
        raise ValueError("dim must be >= 2 (property subspace needs room)")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if not (0 <= property_fraction <= 1):
        raise ValueError("property_fraction must lie in [0, 1]")
    centers = separation * rng.normal(size=(num_classes, dim)) / np.sqrt(dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    n = labels.size
    x = centers[labels] + rng.normal(size=(n, dim))
    has_property = rng.random(n) < property_fraction
    sub = max(1, dim // 4)
    x[has_property, dim - sub :] += property_strength
    return Dataset(x, labels, has_property, np.zeros(n, dtype=bool), num_classes)


def gen_grid_images(
    num_classes: int,
    side: int,
    per_class: int,
    rng: np.random.Generator,
    *,
    noise: float = 0.1,
) -> Dataset:
    """Class-template "images" on a side x side grid, features in [0, 1]."""
    if side < 4:
        raise ValueError("side must be >= 4")
    if num_classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 example per class")
    templates = rng.uniform(0.2, 0.8, size=(num_classes, side * side))
    labels = np.repeat(np.arange(num_classes), per_class)
    n = labels.size
    x = templates[labels] + noise * rng.uniform(-1.0, 1.0, size=(n, side * side))
    x = np.clip(x, 0.0, 1.0)
    return Dataset(x, labels, np.zeros(n, dtype=bool), np.zeros(n, dtype=bool), num_classes)


def _chunks(indices: np.ndarray, n_parts: int) -> list[np.ndarray]:
    return [np.asarray(c) for c in np.array_split(indices, n_parts)]


def partition(dataset: Dataset, n_clients: int, scheme: PartitionScheme, rng: np.random.Generator) -> list[Dataset]:
    """Split into disjoint client shards that exactly cover the dataset."""
    n = len(dataset)
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n < n_clients:
        raise ValueError(f"only {n} examples for {n_clients} clients")

    if scheme.kind == "iid":
        if scheme.stratified:
            shards = _stratified_shards(dataset, n_clients, rng)
        else:
            perm = rng.permutation(n)
            shards = _chunks(perm, n_clients)
    elif scheme.kind == "two_class_noniid":
        shards = _two_class_shards(dataset, n_clients, rng)
    else:  # by_property
        shards = _by_property_shards(dataset, n_clients, scheme.target_client, rng)
    return [dataset.subset(np.sort(idx)) for idx in shards]


def _stratified_shards(dataset: Dataset, n_clients: int, rng: np.random.Generator) -> list[np.ndarray]:
    # Random split with per-class counts balanced across shards; the split
    # remainder rotates between clients so shard sizes stay even overall.
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        parts = _chunks(idx, n_clients)
        for j, part in enumerate(parts):
            buckets[(j + c) % n_clients].append(part)
    return [np.concatenate(b) if b else np.empty(0, dtype=np.int64) for b in buckets]


def _two_class_shards(dataset: Dataset, n_clients: int, rng: np.random.Generator) -> list[np.ndarray]:
    # Sort by class, carve 2 * n_clients single-class partitions (allotted to
    # classes by size, largest remainder), hand two random partitions to each
    # client. Each client then sees at most two labels.
    num_classes = dataset.num_classes
    n_parts = 2 * n_clients
    if n_parts < num_classes:
        raise ValueError("two_class_noniid needs 2 * n_clients >= num_classes")
    class_indices = [np.flatnonzero(dataset.labels == c) for c in range(num_classes)]
    sizes = np.array([idx.size for idx in class_indices], dtype=np.float64)
    if np.any(sizes == 0):
        raise ValueError("every class needs at least one example")
    quota = sizes / sizes.sum() * n_parts
    alloc = np.maximum(1, np.floor(quota).astype(int))
    while alloc.sum() < n_parts:
        alloc[np.argmax(quota - alloc)] += 1
    while alloc.sum() > n_parts:
        over = np.where(alloc > 1)[0]
        alloc[over[np.argmin((quota - alloc)[over])]] -= 1
    parts: list[np.ndarray] = []
    for c in range(num_classes):
        shuffled = rng.permutation(class_indices[c])
        parts.extend(_chunks(shuffled, alloc[c]))
    order = rng.permutation(n_parts)
    return [np.concatenate([parts[order[2 * i]], parts[order[2 * i + 1]]]) for i in range(n_clients)]


def _by_property_shards(dataset: Dataset, n_clients: int, target: int, rng: np.random.Generator) -> list[np.ndarray]:
    if not (0 <= target < n_clients):
        raise ValueError("target_client out of range")
    prop = np.flatnonzero(dataset.has_property)
    rest = rng.permutation(np.flatnonzero(~dataset.has_property))
    per_client = len(dataset) // n_clients
    top_up = max(0, per_client - prop.size)
    target_idx = np.concatenate([prop, rest[:top_up]])
    others = _chunks(rest[top_up:], n_clients - 1) if n_clients > 1 else []
    shards = []
    j = 0
    for c in range(n_clients):
        if c == target:
            shards.append(target_idx)
        else:
            shards.append(others[j])
            j += 1
    if any(s.size == 0 for s in shards):
        raise ValueError("by_property split left an empty shard; add data or clients")
    return shards


def apply_trigger(dataset: Dataset, trigger: TriggerSpec, rng: np.random.Generator) -> Dataset:
    """Poison a fraction of examples: one pixel forced, label set to the target."""
    if trigger.pixel_index >= dataset.dim:
        raise ValueError("pixel_index outside feature width")
    if not (0 <= trigger.target_label < dataset.num_classes):
        raise ValueError("target_label out of range")
    n = len(dataset)
    count = int(round(trigger.poison_fraction * n))
    chosen = np.sort(rng.choice(n, size=count, replace=False)) if count < n else np.arange(n)
    x = dataset.features.copy()
    y = dataset.labels.copy()
    flag = dataset.is_backdoored.copy()
    x[chosen, trigger.pixel_index] = trigger.trigger_value
    y[chosen] = trigger.target_label
    flag[chosen] = True
    return dataset.replace(features=x, labels=y, is_backdoored=flag)


def semantic_relabel(dataset: Dataset, property_predicate: Callable[[Example], bool], target_label: int) -> Dataset:
    """Relabel the matching subgroup to the target; features stay untouched."""
    if not (0 <= target_label < dataset.num_classes):
        raise ValueError("target_label out of range")
    mask = np.fromiter((bool(property_predicate(e)) for e in dataset.examples()), dtype=bool, count=len(dataset))
    if not mask.any():
        raise ValueError("predicate matches no example")
    y = dataset.labels.copy()
    flag = dataset.is_backdoored.copy()
    y[mask] = target_label
    flag[mask] = True
    return dataset.replace(labels=y, is_backdoored=flag)


@dataclass(frozen=True)
class CsvSchema:
    """Column naming for CSV ingestion; non-label, non-property numeric
    columns become features in file order."""

    label_column: str = "label"
    property_column: str | None = "property"
    num_classes: int | None = None


def load_csv(path, schema: CsvSchema = CsvSchema()) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvSchemaError(f"{path}: empty file, header row required") from None
        if schema.label_column not in header:
            raise CsvSchemaError(f"{path}: missing label column {schema.label_column!r}")
        label_pos = header.index(schema.label_column)
        prop_pos = None
        if schema.property_column is not None and schema.property_column in header:
            prop_pos = header.index(schema.property_column)
        feature_pos = [i for i in range(len(header)) if i not in (label_pos, prop_pos)]

        rows_x, rows_y, rows_p = [], [], []
        bad: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                bad.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            try:
                y = int(row[label_pos])
                if y < 0:
                    raise ValueError
            except ValueError:
                bad.append(f"line {lineno}: unknown label {row[label_pos]!r}")
                continue
            try:
                x = [float(row[i]) for i in feature_pos]
            except ValueError:
                bad.append(f"line {lineno}: non-numeric feature value")
                continue
            p = False
            if prop_pos is not None:
                if row[prop_pos] not in ("0", "1"):
                    bad.append(f"line {lineno}: property must be 0 or 1, got {row[prop_pos]!r}")
                    continue
                p = row[prop_pos] == "1"
            rows_x.append(x)
            rows_y.append(y)
            rows_p.append(p)
        if bad:
            raise CsvFormatError(f"{path}: {len(bad)} malformed row(s): " + "; ".join(bad))
        if not rows_x:
            raise CsvFormatError(f"{path}: no data rows")
    labels = np.array(rows_y, dtype=np.int64)
    num_classes = schema.num_classes if schema.num_classes is not None else int(labels.max()) + 1
    return Dataset(
        np.array(rows_x, dtype=np.float64),
        labels,
        np.array(rows_p, dtype=bool),
        np.zeros(len(rows_x), dtype=bool),
        num_classes,
    )


def save_csv(dataset: Dataset, path, schema: CsvSchema = CsvSchema()) -> None:
    """Row-order-preserving writer; floats use repr so a round trip is exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = [f"f{i}" for i in range(dataset.dim)] + [schema.label_column]
        if schema.property_column is not None:
            header.append(schema.property_column)
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.features[i]] + [str(int(dataset.labels[i]))]
            if schema.property_column is not None:
                row.append("1" if dataset.has_property[i] else "0")
            writer.writerow(row)
