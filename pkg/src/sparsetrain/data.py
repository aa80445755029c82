"""Datasets: CSV ingestion, standardization, stratified splitting, sharding,
a Guyon-style synthetic generator and the SDS1 binary container."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError

log = logging.getLogger(__name__)

SDS_MAGIC = b"SDS1"
_SDS_HEADER = struct.Struct("<4sQQI")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    label_names: list | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            bad = int(np.flatnonzero((self.labels < 0) | (self.labels >= self.n_classes))[0])
            raise DataError(f"label {self.labels[bad]} outside [0, {self.n_classes})", row=bad)

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.label_names, self.mean, self.std)


@dataclass
class TrainTest:
    """Standardized train/test pair as consumed by the trainers."""

    train: Dataset
    test: Dataset
    info: dict = field(default_factory=dict)

    @property
    def x_train(self):
        return self.train.features

    @property
    def y_train(self):
        return self.train.labels

    @property
    def x_test(self):
        return self.test.features

    @property
    def y_test(self):
        return self.test.labels

    @property
    def n_classes(self):
        return self.train.n_classes


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, label_column=-1, has_header=True, label_map: dict | None = None) -> Dataset:
    """Parse a comma-separated file; labels are mapped to dense 0-based ids.

    Passing ``label_map`` (e.g. from the training file) makes unseen labels
    an error instead of extending the mapping.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    frozen = label_map is not None
    mapping = dict(label_map) if frozen else {}
    rows, labels = [], []
    width = None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        if has_header:
            next(reader, None)
        for lineno, rec in enumerate(reader, start=2 if has_header else 1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if width is None:
                width = len(rec)
                lc = label_column % width
            elif len(rec) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(rec)}", row=lineno)
            raw = rec[lc].strip()
            if raw not in mapping:
                if frozen:
                    raise DataError(f"{path}:{lineno}: label {raw!r} not seen in training data", row=lineno)
                mapping[raw] = len(mapping)
            labels.append(mapping[raw])
            try:
                rows.append([float(c) for j, c in enumerate(rec) if j != lc])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}", row=lineno) from None
    if width is None:
        raise DataError(f"{path}: no data rows")
    names = sorted(mapping, key=mapping.get)
    feats = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(feats)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(feats), axis=1))[0])
        raise DataError(f"{path}: non-finite value in data row {bad}", row=bad)
    return Dataset(feats, np.asarray(labels), len(names), names)


# ---------------------------------------------------------------------------
# preprocessing


def standardize(train: Dataset, test: Dataset | None = None):
    """Zero-mean unit-variance scaling with training statistics.

    Returns ``(train', test', (mean, std))``; constant columns are only
    shifted.
    """
    if len(train) == 0:
        raise DataError("cannot standardize an empty training set")
    x = train.features.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std > 0, std, 1.0)

    def apply(ds):
        f = (ds.features.astype(np.float64) - mean) / scale
        return Dataset(f, ds.labels, ds.n_classes, ds.label_names, mean, std)

    return apply(train), (apply(test) if test is not None else None), (mean, std)


def split(dataset: Dataset, test_fraction: float, rng, stratify: bool = True):
    """Random train/test split, stratified by class when every class has at
    least two samples. Returns ``(train, test)``."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    n = len(dataset)
    n_test = int(round(test_fraction * n))
    if n_test == 0 or n_test == n:
        raise DataError(f"test_fraction {test_fraction} leaves an empty partition for {n} samples")
    counts = np.bincount(dataset.labels, minlength=dataset.n_classes)
    present = counts[counts > 0]
    if stratify and present.min() < 2:
        log.warning("a class has fewer than 2 samples; using an unstratified split")
        stratify = False
    if not stratify:
        perm = rng.permutation(n)
        test_idx = np.sort(perm[:n_test])
    else:
        # largest-remainder allocation of the test quota across classes
        quota = counts * n_test / n
        take = np.floor(quota).astype(np.int64)
        rest = n_test - int(take.sum())
        order = np.lexsort((np.arange(counts.size), -(quota - take)))
        take[order[:rest]] += 1
        take = np.minimum(take, np.maximum(counts - 1, 0))
        parts = []
        for c in range(dataset.n_classes):
            members = np.flatnonzero(dataset.labels == c)
            parts.append(members[rng.permutation(members.size)[: take[c]]])
        test_idx = np.sort(np.concatenate(parts))
    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(test_idx)


def shard(n: int, k: int) -> list:
    """Strided partition of ``range(n)`` into ``k`` disjoint index sets whose
    sizes differ by at most one."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if isinstance(n, Dataset):
        n = len(n)
    return [np.arange(i, n, k, dtype=np.int64) for i in range(k)]


# ---------------------------------------------------------------------------
# synthetic data


def _hypercube_vertices(n_vertices: int, dim: int, rng) -> np.ndarray:
    """``n_vertices`` distinct vertices of the ``{-1, 1}^dim`` cube."""
    if dim < 63 and n_vertices > 2**dim:
        raise ValueError(f"{n_vertices} clusters do not fit on the vertices of a {dim}-cube")
    if dim <= 20:
        ids = rng.choice(2**dim, size=n_vertices, replace=False)
        bits = (ids[:, None] >> np.arange(dim)) & 1
    else:
        bits = np.unique(rng.integers(0, 2, size=(n_vertices, dim)), axis=0)
        while bits.shape[0] < n_vertices:
            more = rng.integers(0, 2, size=(n_vertices - bits.shape[0], dim))
            bits = np.unique(np.vstack([bits, more]), axis=0)
        bits = bits[rng.permutation(n_vertices)]
    return 2.0 * bits.astype(np.float64) - 1.0


def synth_classification(
    n_samples=2000,
    n_features=500,
    n_informative=5,
    n_redundant=15,
    n_classes=2,
    class_sep=1.0,
    flip_fraction=0.01,
    rng=None,
    n_clusters_per_class=2,
    shuffle_columns=True,
) -> Dataset:
    """Gaussian clusters at hypercube vertices in an informative subspace,
    redundant linear mixtures and pure-noise probe features."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if n_informative < 1:
        raise ValueError("n_informative must be >= 1")
    if n_redundant < 0 or n_informative + n_redundant > n_features:
        raise ValueError(
            f"n_informative + n_redundant = {n_informative + n_redundant} exceeds n_features = {n_features}"
        )
    if n_samples < n_classes:
        raise ValueError("need at least one sample per class")
    if not 0 <= flip_fraction <= 1:
        raise ValueError("flip_fraction must be in [0, 1]")
    n_clusters = n_classes * n_clusters_per_class
    if n_informative < 63 and n_clusters > 2**n_informative:
        raise ValueError(
            f"{n_classes} classes x {n_clusters_per_class} clusters need more than 2**{n_informative} vertices"
        )

    # near-equal cluster sizes, clusters assigned to classes round-robin
    sizes = np.full(n_clusters, n_samples // n_clusters)
    sizes[: n_samples % n_clusters] += 1
    centroids = _hypercube_vertices(n_clusters, n_informative, rng) * class_sep

    x = np.zeros((n_samples, n_features))
    y = np.zeros(n_samples, dtype=np.int64)
    x[:, :n_informative] = rng.standard_normal((n_samples, n_informative))
    start = 0
    for c, size in enumerate(sizes):
        stop = start + size
        y[start:stop] = c % n_classes
        # random linear transform gives each cluster its own covariance
        a = 2.0 * rng.random((n_informative, n_informative)) - 1.0
        x[start:stop, :n_informative] = x[start:stop, :n_informative] @ a + centroids[c]
        start = stop

    if n_redundant:
        b = 2.0 * rng.random((n_informative, n_redundant)) - 1.0
        x[:, n_informative : n_informative + n_redundant] = x[:, :n_informative] @ b
    n_probe = n_features - n_informative - n_redundant
    if n_probe:
        x[:, n_features - n_probe :] = rng.standard_normal((n_samples, n_probe))

    n_flip = int(round(flip_fraction * n_samples))
    if n_flip:
        idx = rng.choice(n_samples, size=n_flip, replace=False)
        shift = rng.integers(1, n_classes, size=n_flip)
        y[idx] = (y[idx] + shift) % n_classes

    perm = rng.permutation(n_samples)
    x, y = x[perm], y[perm]
    if shuffle_columns:
        x = x[:, rng.permutation(n_features)]
    return Dataset(x, y, n_classes)


MADELON_PROFILE = dict(
    n_features=500,
    n_informative=5,
    n_redundant=15,
    n_classes=2,
    class_sep=2.0,
    flip_fraction=0.01,
    n_clusters_per_class=16,
)


def prepare(dataset: Dataset, test_fraction=0.3, rng=None, n_test=None, dtype=np.float32) -> TrainTest:
    """Split then standardize with training statistics."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if n_test is not None:
        test_fraction = n_test / len(dataset)
    train, test = split(dataset, test_fraction, rng)
    train, test, _ = standardize(train, test)
    train.features = train.features.astype(dtype)
    test.features = test.features.astype(dtype)
    return TrainTest(train, test)


def madelon(seed=0, n_train=2000, n_test=600, dtype=np.float32) -> TrainTest:
    """Synthetic task with the Madelon shape: 500 features, 5 informative,
    15 redundant, two classes."""
    rng = np.random.default_rng(seed)
    ds = synth_classification(n_samples=n_train + n_test, rng=rng, **MADELON_PROFILE)
    tt = prepare(ds, rng=rng, n_test=n_test, dtype=dtype)
    tt.info = dict(MADELON_PROFILE, n_samples=n_train + n_test, seed=seed)
    return tt


# ---------------------------------------------------------------------------
# SDS1 container


def write_sds(path, dataset: Dataset) -> None:
    n, d = dataset.features.shape
    if dataset.labels.size and dataset.labels.min() < 0:
        raise DataError("labels must be non-negative")
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(_SDS_HEADER.pack(SDS_MAGIC, n, d, dataset.n_classes))
            fh.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc


def read_sds(path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _SDS_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, n, d, c = _SDS_HEADER.unpack_from(raw)
    if magic != SDS_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    want = _SDS_HEADER.size + 4 * n * d + 4 * n
    if len(raw) != want:
        raise CheckpointError(f"{path}: expected {want} bytes, found {len(raw)}")
    off = _SDS_HEADER.size
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 4 * n * d).astype(np.int64)
    try:
        return Dataset(feats, labels, int(c))
    except DataError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
