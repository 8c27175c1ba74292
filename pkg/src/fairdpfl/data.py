"""Client partitioning, synthetic biased data and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linmodel import Dataset

PARTITION_MODES = ("reduce", "remove_combo", "remove_sensitive")


class PartitionError(ValueError):
    pass


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int = 20
    unfair_fraction: float = 0.5
    zeta: float = 0.5
    target_group: int = 0
    target_label: int = 1
    mode: str = "reduce"
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 2:
            raise ValueError("need at least two clients")
        if not 0 <= self.unfair_fraction <= 1:
            raise ValueError("unfair_fraction must be in [0, 1]")
        if not 0 <= self.zeta <= 1:
            raise ValueError("zeta must be in [0, 1]")
        if self.mode not in PARTITION_MODES:
            raise ValueError(f"mode must be one of {PARTITION_MODES}")


@dataclass
class Partition:
    clients: list  # list[Dataset]
    indices: list  # list[np.ndarray] into the source dataset
    unfair: list  # client ids in U
    fair: list  # client ids in F
    beta: int = 0


def stratified_split(dataset: Dataset, n_clients: int, rng: np.random.Generator) -> list[list[int]]:
    """Deal every (z, y) cell round-robin after a shuffle, starting at client 0.

    Each client's cell counts differ from the exact proportional share by at
    most one sample.
    """
    parts = [[] for _ in range(n_clients)]
    for z in range(dataset.n_groups):
        for y in range(dataset.n_classes):
            cell = np.flatnonzero((dataset.z == z) & (dataset.y == y))
            cell = rng.permutation(cell)
            for j, i in enumerate(cell):
                parts[j % n_clients].append(int(i))
    return parts


def partition(dataset: Dataset, spec: PartitionSpec) -> Partition:
    """Split into clients with a fair group F and an unfair group U.

    Unfair clients give up a ``zeta`` fraction of their (z, y) samples; the
    pool is shared evenly among fair clients, which hand back the same
    number of (z' != z, y) samples to the unfair ones.
    """
    rng = np.random.default_rng(spec.seed)
    K = spec.n_clients
    parts = stratified_split(dataset, K, rng)
    order = rng.permutation(K)
    n_unfair = int(round(spec.unfair_fraction * K))
    unfair = sorted(int(k) for k in order[:n_unfair])
    fair = sorted(int(k) for k in order[n_unfair:])
    z_t, y_t = spec.target_group, spec.target_label

    def is_target(i):
        return dataset.z[i] == z_t and dataset.y[i] == y_t

    def is_swap(i):
        return dataset.z[i] != z_t and dataset.y[i] == y_t

    removed = []
    for k in unfair:
        cell = [i for i in parts[k] if is_target(i)]
        take = set(int(i) for i in rng.permutation(cell)[: int(math.floor(spec.zeta * len(cell)))]) if cell else set()
        removed.extend(i for i in cell if i in take)
        parts[k] = [i for i in parts[k] if i not in take]

    beta = len(removed) // len(fair) if fair else 0
    if not fair and removed:
        raise PartitionError("no fair clients to receive the removed samples")
    add = []
    pool = list(removed)
    for k in fair:
        swap = [i for i in parts[k] if is_swap(i)]
        if len(swap) < beta:
            raise PartitionError(
                f"fair client {k} holds {len(swap)} samples of (Z!={z_t}, Y={y_t}) "
                f"but must give {beta} (deficit {beta - len(swap)})"
            )
        give = set(int(i) for i in rng.permutation(swap)[:beta])
        parts[k] = [i for i in parts[k] if i not in give] + pool[:beta]
        pool = pool[beta:]
        add.extend(i for i in swap if i in give)
    for j, i in enumerate(pool):  # leftover after rounding beta down
        parts[fair[j % len(fair)]].append(i)
    for j, i in enumerate(add):
        parts[unfair[j % len(unfair)]].append(i)

    if spec.mode == "remove_combo":
        for k in unfair:
            parts[k] = [i for i in parts[k] if not is_target(i)]
    elif spec.mode == "remove_sensitive":
        for k in unfair:
            parts[k] = [i for i in parts[k] if dataset.z[i] != z_t]

    indices = [np.array(sorted(p), dtype=np.int64) for p in parts]
    clients = [dataset.subset(ix) for ix in indices]
    return Partition(clients, indices, unfair, fair, beta)


@dataclass(frozen=True)
class SyntheticSpec:
    """Binary-label, binary-group data with group-dependent base rates.

    Features are Gaussian around a cell mean: the first ``label_dims``
    coordinates carry ``label_shift * (2y-1)``, the next ``group_dims``
    carry ``group_shift * (2z-1)``, the rest are pure noise.
    """

    n: int = 10_000
    d: int = 6
    group_mix: float = 0.5  # P(Z=1)
    label_rates: tuple = (0.3, 0.7)  # P(Y=1 | Z=z)
    label_shift: float = 1.0
    group_shift: float = 1.0
    label_dims: int = 2
    group_dims: int = 2
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.group_mix <= 1 or not all(0 <= p <= 1 for p in self.label_rates):
            raise ValueError("probabilities must lie in [0, 1]")
        if len(self.label_rates) != 2:
            raise ValueError("label_rates needs one rate per group")
        if self.label_dims + self.group_dims > self.d:
            raise ValueError("label_dims + group_dims exceeds d")


def synth_generate(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    z = (rng.random(spec.n) < spec.group_mix).astype(np.int64)
    rates = np.asarray(spec.label_rates)[z]
    y = (rng.random(spec.n) < rates).astype(np.int64)
    x = rng.normal(0.0, spec.noise, size=(spec.n, spec.d))
    a, b = spec.label_dims, spec.label_dims + spec.group_dims
    x[:, :a] += spec.label_shift * (2 * y - 1)[:, None]
    x[:, a:b] += spec.group_shift * (2 * z - 1)[:, None]
    return Dataset(x, y, z, 2, 2)


@dataclass
class CsvSchema:
    features: list
    label: str
    sensitive: str


@dataclass
class LoadedCsv:
    dataset: Dataset
    label_codes: dict = field(default_factory=dict)
    sensitive_codes: dict = field(default_factory=dict)

    def mapping(self) -> dict:
        return {"label": self.label_codes, "sensitive": self.sensitive_codes}


def _codes(values) -> dict:
    """Sorted distinct values mapped to 0..m-1; numeric strings sort numerically."""
    distinct = set(values)
    try:
        ordered = sorted(distinct, key=float)
    except ValueError:
        ordered = sorted(distinct)
    return {v: i for i, v in enumerate(ordered)}


def load_csv(path, schema: CsvSchema) -> LoadedCsv:
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty file")
        header = [h.strip() for h in header]
        cols = {}
        for name in list(schema.features) + [schema.label, schema.sensitive]:
            if name not in header:
                raise IngestionError(f"{path}: missing column {name!r}")
            cols[name] = header.index(name)
        feats, labels, groups = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vec = []
            for name in schema.features:
                cell = row[cols[name]].strip()
                try:
                    vec.append(float(cell))
                except ValueError:
                    raise IngestionError(
                        f"{path}:{lineno}: column {name!r} holds non-numeric value {cell!r}"
                    ) from None
            feats.append(vec)
            labels.append(row[cols[schema.label]].strip())
            groups.append(row[cols[schema.sensitive]].strip())
    if not feats:
        raise IngestionError(f"{path}: no data rows")
    label_codes = _codes(labels)
    group_codes = _codes(groups)
    ds = Dataset(
        np.array(feats, dtype=np.float64),
        np.array([label_codes[v] for v in labels]),
        np.array([group_codes[v] for v in groups]),
        n_classes=max(2, len(label_codes)),
        n_groups=max(2, len(group_codes)),
    )
    return LoadedCsv(ds, label_codes, group_codes)


def split_clients(n_clients: int, n_test: int, n_val: int, rng: np.random.Generator) -> tuple[list, list, list]:
    """Disjoint (train, validation, test) client id lists."""
    if n_test + n_val >= n_clients:
        raise ValueError("need at least one training client")
    perm = [int(k) for k in rng.permutation(n_clients)]
    test = sorted(perm[:n_test])
    val = sorted(perm[n_test : n_test + n_val])
    train = sorted(perm[n_test + n_val :])
    return train, val, test
