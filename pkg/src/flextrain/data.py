"""Synthetic datasets, IDX/CSV loaders and device partitioning."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flextrain._validation import check_features, check_labels, check_positive_int


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.X = check_features(self.X)
        self.y = check_labels(self.y, self.num_classes, self.X.shape[0])

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices, split: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[indices], self.y[indices], self.num_classes,
                       split or self.split, f"{self.provenance}[subset:{indices.size}]")

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


def gen_spiral(n_per_class: int, num_classes: int = 3, noise_std: float = 0.2, seed: int = 0,
               sweep: float = 3 * np.pi, split: str = "train") -> Dataset:
    """Interleaved 2-D spiral arms, one per class.

    A point of class ``c`` at radius ``r ~ U(0, 1)`` sits at angle
    ``2*pi*c/C + sweep*r + noise_std*N(0, 1)``.
    """
    n_per_class = check_positive_int(n_per_class, "n_per_class")
    num_classes = check_positive_int(num_classes, "num_classes")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    r = rng.random((num_classes, n_per_class))
    noise = rng.standard_normal((num_classes, n_per_class))
    offsets = 2.0 * np.pi * np.arange(num_classes)[:, None] / num_classes
    t = offsets + sweep * r + noise_std * noise
    X = np.stack([(r * np.sin(t)).ravel(), (r * np.cos(t)).ravel()], axis=1)
    y = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(X, y, num_classes, split,
                   f"spiral(n_per_class={n_per_class}, classes={num_classes}, "
                   f"noise={noise_std}, seed={seed})")


def gen_blobs(n_per_class: int, num_classes: int, dim: int, separation: float, seed: int = 0,
              max_tries: int = 100, split: str = "train") -> Dataset:
    """Unit-variance Gaussian clusters with pairwise center distance >= ``separation``."""
    n_per_class = check_positive_int(n_per_class, "n_per_class")
    num_classes = check_positive_int(num_classes, "num_classes")
    dim = check_positive_int(dim, "dim")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    half_width = separation * max(1.0, num_classes ** (1.0 / dim))
    for _ in range(max_tries):
        centers = rng.uniform(-half_width, half_width, size=(num_classes, dim))
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if num_classes == 1 or d[np.triu_indices(num_classes, 1)].min() >= separation:
            break
    else:
        raise ValueError(f"could not place {num_classes} centers {separation} apart "
                         f"in {dim} dimensions after {max_tries} tries")
    X = (centers[:, None, :] + rng.standard_normal((num_classes, n_per_class, dim))).reshape(-1, dim)
    y = np.repeat(np.arange(num_classes), n_per_class)
    ds = Dataset(X, y, num_classes, split,
                 f"blobs(n_per_class={n_per_class}, classes={num_classes}, dim={dim}, seed={seed})")
    ds.centers = centers
    return ds


# -- IDX ----------------------------------------------------------------------

class IDXFormatError(ValueError):
    pass


class IDXMagicError(IDXFormatError):
    pass


class IDXTruncatedError(IDXFormatError):
    pass


class IDXCountMismatchError(IDXFormatError):
    pass


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXTruncatedError(f"{path}: file shorter than the 4-byte magic")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise IDXMagicError(f"{path}: bad magic {raw[:4].hex()}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXTruncatedError(f"{path}: truncated dimension header")
    shape = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    count = int(np.prod(shape)) if shape else 1
    expected = header + count * dtype.itemsize
    if len(raw) < expected:
        raise IDXTruncatedError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(shape)


def load_idx(images_path, labels_path, num_classes: int | None = None,
             split: str = "train") -> Dataset:
    """Load an IDX image/label pair; images are flattened and ubyte pixels scaled by 1/255."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.reshape(-1).shape[0]:
        raise IDXCountMismatchError(
            f"{images.shape[0]} images but {labels.reshape(-1).shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        X /= 255.0
    y = labels.reshape(-1).astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 1
    return Dataset(X, y, num_classes, split, f"idx({images_path}, {labels_path})")


def load_csv(path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """CSV with header ``x0,...,x{d-1},label``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label" or any(
                h != f"x{i}" for i, h in enumerate(header[:-1])):
            raise ValueError(f"{path}: header must be x0,...,x<d-1>,label")
        rows = [r for r in reader if r]
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    y = data[:, -1]
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 1
    return Dataset(data[:, :-1], y, num_classes, split, f"csv({path})")


# -- partitioning ---------------------------------------------------------------

@dataclass
class PartitionPlan:
    indices: list[np.ndarray]
    method: str
    params: dict = field(default_factory=dict)

    @property
    def num_devices(self) -> int:
        return len(self.indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.indices]

    def check(self, n: int) -> None:
        joined = np.concatenate(self.indices) if self.indices else np.array([], dtype=np.int64)
        if len(np.unique(joined)) != joined.size:
            raise AssertionError("partition is not disjoint")
        if joined.size and (joined.min() < 0 or joined.max() >= n):
            raise AssertionError("partition index out of range")
        if any(len(ix) == 0 for ix in self.indices):
            raise AssertionError("partition leaves a device empty")


def _check_devices(J, n):
    J = check_positive_int(J, "J")
    if J > n:
        raise ValueError(f"cannot split {n} samples over {J} devices")
    return J


def partition_iid(dataset: Dataset, J: int, seed: int = 0) -> PartitionPlan:
    J = _check_devices(J, len(dataset))
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return PartitionPlan([np.sort(c) for c in np.array_split(perm, J)], "iid")


def partition_dirichlet(dataset: Dataset, J: int, alpha: float, seed: int = 0) -> PartitionPlan:
    """Label-skewed split: each class is spread over devices by a Dirichlet(alpha) draw.

    Devices left empty take one sample from the currently largest device.
    """
    J = _check_devices(J, len(dataset))
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(J)]
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.y == c))
        if idx.size == 0:
            continue
        props = rng.dirichlet(np.full(J, float(alpha)))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for j, part in enumerate(np.split(idx, cuts)):
            buckets[j].extend(part.tolist())
    for j in range(J):
        if not buckets[j]:
            donor = max(range(J), key=lambda i: (len(buckets[i]), -i))
            buckets[j].append(buckets[donor].pop())
    return PartitionPlan([np.sort(np.array(b, dtype=np.int64)) for b in buckets],
                         f"dirichlet({alpha})", {"alpha": alpha})


def partition_shards(dataset: Dataset, J: int, shards_per_device: int = 2,
                     seed: int = 0) -> PartitionPlan:
    """Sort by label, cut into ``J * shards_per_device`` shards, deal them out at random."""
    J = _check_devices(J, len(dataset))
    s = check_positive_int(shards_per_device, "shards_per_device")
    if J * s > len(dataset):
        raise ValueError("more shards than samples")
    rng = np.random.default_rng(seed)
    order = np.argsort(dataset.y, kind="stable")
    shards = np.array_split(order, J * s)
    picks = rng.permutation(J * s)
    parts = [np.sort(np.concatenate([shards[i] for i in picks[j * s:(j + 1) * s]]))
             for j in range(J)]
    return PartitionPlan(parts, f"shards({s})", {"shards_per_device": s})
