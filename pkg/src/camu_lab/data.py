"""Datasets, forgetting/remaining splits and counterfactual tuple construction."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import rng as rng_streams

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    index: Optional[np.ndarray] = None  # row ids in the parent dataset

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} feature rows"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.index is None:
            self.index = np.arange(len(self.labels))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.labels[rows], self.num_classes, self.index[rows])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _read_header(blob: bytes, magic: int, n_dims: int, path) -> tuple[int, ...]:
    size = 4 * (1 + n_dims)
    if len(blob) < size:
        raise DataFormatError(f"{path}: truncated header")
    fields = struct.unpack(f">{1 + n_dims}I", blob[:size])
    if fields[0] != magic:
        raise DataFormatError(f"{path}: bad magic number 0x{fields[0]:08x}, expected 0x{magic:08x}")
    return fields[1:]


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are flattened and divided by 255."""
    img_blob = Path(images_path).read_bytes()
    lab_blob = Path(labels_path).read_bytes()
    count, rows, cols = _read_header(img_blob, IDX_IMAGE_MAGIC, 3, images_path)
    (n_labels,) = _read_header(lab_blob, IDX_LABEL_MAGIC, 1, labels_path)
    if count != n_labels:
        raise DataFormatError(f"{count} images but {n_labels} labels")
    pixels = np.frombuffer(img_blob, dtype=np.uint8, offset=16)
    if pixels.size != count * rows * cols:
        raise DataFormatError(
            f"{images_path}: expected {count * rows * cols} pixel bytes, found {pixels.size}"
        )
    labels = np.frombuffer(lab_blob, dtype=np.uint8, offset=8)
    if labels.size != count:
        raise DataFormatError(f"{labels_path}: expected {count} labels, found {labels.size}")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: Sequence[int], images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    lab = np.asarray(labels, dtype=np.uint8)
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABEL_MAGIC, len(lab)) + lab.tobytes())


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip((x - lo) / span, 0.0, 1.0)


def synth_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters, one per class, min-max scaled to [0, 1].

    Class means are drawn uniformly in [-1, 1]^dim and pushed apart to at
    least unit distance; ``spread`` is the per-coordinate standard deviation.
    """
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("num_classes, per_class and dim must be positive")
    gen = rng_streams.stream(seed, "data")
    means = gen.uniform(-1.0, 1.0, size=(num_classes, dim))
    for _ in range(100):
        gaps = np.linalg.norm(means[:, None] - means[None], axis=-1) + np.eye(num_classes) * 1e9
        if gaps.min() >= 1.0:
            break
        means *= 1.25
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = gen.normal(0.0, 1.0, size=(labels.size, dim)) * spread
    features = minmax_normalize(means[labels] + noise)
    order = gen.permutation(labels.size)
    return Dataset(features[order], labels[order], num_classes)


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, num_classes: Optional[int] = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise DataFormatError(f"{path}: last column must be 'label'")
        rows = [r for r in reader if r]
    d = len(header) - 1
    features = np.array([[float(v) for v in r[:d]] for r in rows], dtype=np.float64).reshape(-1, d)
    labels = np.array([int(r[d]) for r in rows], dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if labels.size else 1
    return Dataset(features, labels, k)


@dataclass
class SplitSpec:
    mode: str  # "random_fraction" | "class_removal"
    fraction: Optional[float] = None
    class_ids: Optional[tuple[int, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.mode == "random_fraction":
            if self.fraction is None or self.class_ids is not None:
                raise ValueError("random_fraction split takes a fraction and no class_ids")
            if not 0.0 < self.fraction < 1.0:
                raise ValueError(f"fraction must lie in (0, 1), got {self.fraction}")
        elif self.mode == "class_removal":
            if not self.class_ids or self.fraction is not None:
                raise ValueError("class_removal split takes non-empty class_ids and no fraction")
            self.class_ids = tuple(sorted({int(c) for c in self.class_ids}))
        else:
            raise ValueError(f"unknown split mode {self.mode!r}")

    @property
    def task(self) -> str:
        return "random_removal" if self.mode == "random_fraction" else "class_removal"


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Partition ``dataset`` into (forgetting, remaining)."""
    n = len(dataset)
    if spec.mode == "random_fraction":
        n_forget = int(round(spec.fraction * n))
        perm = rng_streams.stream(spec.seed, "split").permutation(n)
        forget_mask = np.zeros(n, dtype=bool)
        forget_mask[perm[:n_forget]] = True
    else:
        present = set(np.unique(dataset.labels).tolist())
        missing = [c for c in spec.class_ids if c not in present]
        if missing:
            raise ValueError(f"class ids {missing} do not occur in the dataset")
        forget_mask = np.isin(dataset.labels, spec.class_ids)
    return dataset.subset(np.flatnonzero(forget_mask)), dataset.subset(np.flatnonzero(~forget_mask))


@dataclass
class TupleExample:
    x_f: np.ndarray
    y_f: int
    x_r_star: np.ndarray
    y_r_star: int
    x_f_star: np.ndarray
    y_f_star: int
    epsilon: np.ndarray


@dataclass
class JointDataset:
    """Counterfactual tuples stored column-wise; row ``i`` is one tuple."""

    x_f: np.ndarray
    y_f: np.ndarray
    x_r: np.ndarray
    y_r: np.ndarray
    x_cf: np.ndarray
    y_cf: np.ndarray
    epsilon: np.ndarray
    num_classes: int
    forget_rows: np.ndarray = field(default=None)  # row of F each tuple came from
    remain_rows: np.ndarray = field(default=None)  # row of R used as s_r*

    def __len__(self) -> int:
        return self.y_f.shape[0]

    def __getitem__(self, i: int) -> TupleExample:
        return TupleExample(
            self.x_f[i], int(self.y_f[i]), self.x_r[i], int(self.y_r[i]),
            self.x_cf[i], int(self.y_cf[i]), self.epsilon[i],
        )

    @property
    def tuples(self) -> list[TupleExample]:
        return [self[i] for i in range(len(self))]


def prepare_joint(
    forget: Dataset,
    remain: Dataset,
    seed: int,
    oversample_to: Optional[int] = None,
) -> JointDataset:
    """Build one (s_f, s_r*, s_f*) tuple per forgetting sample.

    s_r* is drawn uniformly from ``remain`` with replacement, the mask is
    uniform on [0, 1]^d, and the counterfactual label is uniform over every
    class except y_f. With ``oversample_to`` the forgetting rows are cycled
    until that many tuples exist, each with fresh draws.
    """
    if len(remain) == 0:
        raise ValueError("remaining data is empty; cannot draw s_r*")
    k = max(forget.num_classes, remain.num_classes)
    if k < 2:
        raise ValueError("need at least two classes to draw a counterfactual label")
    if forget.dim != remain.dim:
        raise ValueError(f"feature widths differ: {forget.dim} vs {remain.dim}")
    n = len(forget) if oversample_to is None else int(oversample_to)
    if oversample_to is not None and (n < 1 or len(forget) == 0):
        raise ValueError("oversampling needs a positive target and non-empty forgetting data")
    f_rows = np.arange(n) % max(len(forget), 1)

    r_rows = rng_streams.stream(seed, "partner").integers(0, len(remain), size=n)
    eps = rng_streams.stream(seed, "mask").random((n, remain.dim))
    y_f = forget.labels[f_rows]
    draw = rng_streams.stream(seed, "label").integers(0, k - 1, size=n)
    y_cf = draw + (draw >= y_f)

    x_r = remain.features[r_rows]
    return JointDataset(
        x_f=forget.features[f_rows],
        y_f=y_f,
        x_r=x_r,
        y_r=remain.labels[r_rows],
        x_cf=x_r + eps,
        y_cf=y_cf.astype(np.int64),
        epsilon=eps,
        num_classes=k,
        forget_rows=f_rows,
        remain_rows=r_rows,
    )


def batches(n: int, batch_size: int, seed: int, *stream_keys: int) -> list[np.ndarray]:
    """Seeded permutation of ``range(n)`` cut into batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if not isinstance(n, (int, np.integer)):
        n = len(n)
    perm = rng_streams.stream(seed, "batch", *stream_keys).permutation(int(n))
    return [perm[i : i + batch_size] for i in range(0, int(n), batch_size)]


def concat(parts: Iterable[Dataset]) -> Dataset:
    parts = list(parts)
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        max(p.num_classes for p in parts),
        np.concatenate([p.index for p in parts]),
    )


def holdout(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded (train, test) split ``fraction`` goes to test."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    perm = rng_streams.stream(seed, "split", 1).permutation(len(dataset))
    n_test = int(round(fraction * len(dataset)))
    test_rows, train_rows = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return dataset.subset(train_rows), dataset.subset(test_rows)
