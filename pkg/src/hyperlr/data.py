"""Dataset ingestion, synthetic data, holdout splits, and mini-batch sampling.

Everything here is deterministic given an RngStream: the same (seed, label)
pair always produces the same bytes, batches, and splits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

BATCH_POLICIES = ("with_replacement", "epoch_shuffle")


class IdxFormatError(ValueError):
    """Malformed IDX header (bad magic number or dimension count)."""


class DatasetMismatchError(ValueError):
    """Image and label files disagree on the number of records."""


@dataclass(frozen=True)
class RngStream:
    """A labeled, forkable source of reproducible randomness.

    Children derived with the same label sequence are statistically
    independent of each other and stable across runs.
    """

    seed: int
    label: str = "root"

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, self.label + "/" + label)

    def generator(self) -> np.random.Generator:
        # Fold the label bytes into the entropy pool so sibling streams differ.
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + list(self.label.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with integer class labels.

    features: (n, dim) float64, labels: (n,) int64 in [0, num_classes).
    Arrays are treated as immutable once wrapped.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if y.shape != (f.shape[0],):
            raise ValueError("labels must be 1-d with one entry per feature row")
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels out of range for num_classes")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class Batch:
    """One mini-batch: features x, labels y, and the source row indices."""

    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]


def _read_idx(path: str, expected_magic: int, ndim: int) -> tuple[np.ndarray, tuple[int, ...]]:
    with open(path, "rb") as fh:
        header = fh.read(4 + 4 * ndim)
        if len(header) < 4 + 4 * ndim:
            raise OSError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", header[:4])
        if magic != expected_magic:
            raise IdxFormatError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        dims = struct.unpack(">" + "I" * ndim, header[4:])
        count = 1
        for d in dims:
            count *= d
        payload = fh.read(count)
        if len(payload) != count:
            raise OSError(f"{path}: truncated IDX payload ({len(payload)} of {count} bytes)")
    return np.frombuffer(payload, dtype=np.uint8), dims


def load_idx_dataset(images_path: str, labels_path: str) -> Dataset:
    """Load an image/label pair of IDX files into a flat float dataset.

    Pixels are scaled to [0, 1] by dividing by 255. Labels stay integral.
    """
    raw_images, (n_img, rows, cols) = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    raw_labels, (n_lab,) = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if n_img != n_lab:
        raise DatasetMismatchError(
            f"{n_img} images vs {n_lab} labels ({images_path}, {labels_path})"
        )
    features = raw_images.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = raw_labels.astype(np.int64)
    num_classes = int(labels.max()) + 1 if n_lab else 1
    return Dataset(features, labels, num_classes)


def write_idx_dataset(dataset: Dataset, images_path: str, labels_path: str) -> None:
    """Write a dataset whose features lie in [0, 1] as an IDX image/label pair.

    Features are stored as one row of bytes per record (rows=1, cols=dim),
    so load_idx_dataset(write_idx_dataset(ds)) round-trips exactly when the
    features are multiples of 1/255.
    """
    pixels = np.rint(dataset.features * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("features must lie in [0, 1] to be stored as bytes")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, dataset.n, 1, dataset.dim))
        fh.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, dataset.n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def make_blobs(n: int, num_classes: int, dim: int, spread: float, rng: RngStream) -> Dataset:
    """Gaussian class clusters with unit-norm centers and noise scale `spread`.

    Class counts differ by at most one; rows are shuffled. Deterministic in rng.
    """
    if n < num_classes:
        raise ValueError("need at least one point per class")
    if num_classes < 1 or dim < 1:
        raise ValueError("num_classes and dim must be positive")
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    gen = rng.generator()
    centers = gen.standard_normal((num_classes, dim))
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    centers /= norms
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    features = centers[labels] + spread * gen.standard_normal((n, dim))
    perm = gen.permutation(n)
    return Dataset(features[perm], labels[perm], num_classes)


def holdout_split(dataset: Dataset, n_train: int, n_val: int, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Disjoint random train/validation subsets of the given sizes."""
    if n_train < 1 or n_val < 1:
        raise ValueError("split sizes must be positive")
    if n_train + n_val > dataset.n:
        raise ValueError(
            f"split sizes {n_train}+{n_val} exceed dataset size {dataset.n}"
        )
    perm = rng.generator().permutation(dataset.n)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train : n_train + n_val])


class BatchSampler:
    """Streams mini-batch indices over a dataset.

    with_replacement: each batch is batch_size iid uniform draws.
    epoch_shuffle: cycles through random permutations, dropping any remainder
    so every batch has exactly batch_size rows.
    """

    def __init__(self, dataset: Dataset, batch_size: int, rng: RngStream,
                 policy: str = "with_replacement"):
        if policy not in BATCH_POLICIES:
            raise ValueError(f"unknown policy {policy!r}, expected one of {BATCH_POLICIES}")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if batch_size > dataset.n:
            raise ValueError("batch_size exceeds dataset size")
        self.dataset = dataset
        self.batch_size = batch_size
        self.policy = policy
        self._gen = rng.generator()
        self._perm: np.ndarray | None = None
        self._cursor = 0

    def next_indices(self) -> np.ndarray:
        n = self.dataset.n
        if self.policy == "with_replacement":
            return self._gen.integers(0, n, size=self.batch_size)
        if self._perm is None or self._cursor + self.batch_size > n:
            self._perm = self._gen.permutation(n)
            self._cursor = 0
        out = self._perm[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return out

    def next_batch(self) -> Batch:
        idx = self.next_indices()
        return Batch(self.dataset.features[idx], self.dataset.labels[idx], idx)


def next_batch(sampler: BatchSampler) -> Batch:
    """Draw the sampler's next mini-batch."""
    return sampler.next_batch()


def full_batch(dataset: Dataset) -> Batch:
    """The whole dataset as a single batch (for validation/test evaluation)."""
    idx = np.arange(dataset.n, dtype=np.int64)
    return Batch(dataset.features, dataset.labels, idx)
