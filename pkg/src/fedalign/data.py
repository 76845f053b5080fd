"""Datasets, IDX I/O, non-IID partitioning and backdoor trigger poisoning."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IID = None  # partition sentinel: beta=IID means no label skew


class IdxFormatError(ValueError):
    """Base class for malformed IDX files."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, feat_dim) in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (n, d) with one label per row")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx])

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]


# --------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label file pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ValueError("images must be (n, rows, cols) with one label each")
    for path, magic, arr in ((images_path, IDX_IMAGES_MAGIC, images),
                             (labels_path, IDX_LABELS_MAGIC, labels)):
        payload = struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()
        opener = gzip.open if Path(path).suffix == ".gz" else open
        with opener(path, "wb") as fh:
            fh.write(payload)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_idx_pair(directory, split: str) -> tuple[Path, Path] | None:
    """Locate the MNIST-named IDX pair for ``split`` in ``directory`` (plain or .gz)."""
    directory = Path(directory)
    for suffix in ("", ".gz"):
        img, lab = (directory / (name + suffix) for name in MNIST_FILES[split])
        if img.exists() and lab.exists():
            return img, lab
    return None


def write_mnist_subset(directory, n_test: int = 1000, seed: int = 0) -> Path:
    """Write the 5,000-image MNIST sample bundled with ``mlxtend`` as MNIST-named IDX files.

    The sample is split into train/test with a seeded class-stratified draw.
    Needs the optional ``mlxtend`` package (``pip install --no-deps mlxtend``).
    """
    from mlxtend.data import mnist_data

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    x, y = mnist_data()
    images = x.reshape(-1, 28, 28).astype(np.uint8)
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    per_class = n_test // len(classes)
    test_idx = np.concatenate([rng.permutation(np.flatnonzero(y == c))[:per_class] for c in classes])
    test_mask = np.zeros(len(y), dtype=bool)
    test_mask[test_idx] = True
    for split, mask in (("train", ~test_mask), ("test", test_mask)):
        order = rng.permutation(np.flatnonzero(mask))
        img, lab = (directory / (name + ".gz") for name in MNIST_FILES[split])
        write_idx(img, lab, images[order], y[order])
    return directory


# --------------------------------------------------------------------------
# Synthetic data


def gen_synthetic(num_classes: int, feat_dim: int, n_samples: int, seed: int,
                  spread: float = 0.05, separation: float = 5.0) -> LabeledDataset:
    """Gaussian blobs in [0, 1]^feat_dim, one per class, labels assigned round-robin.

    Centroids are drawn so every pair is at least ``separation * spread`` apart
    (up to 1000 redraws); samples are centroid + N(0, spread^2) then clamped.
    """
    if min(num_classes, feat_dim, n_samples) < 1:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x53594E]))
    margin = min(0.45, 3 * spread)
    min_gap = separation * spread
    for _ in range(1000):
        centroids = rng.uniform(margin, 1.0 - margin, size=(num_classes, feat_dim))
        gaps = np.linalg.norm(centroids[:, None] - centroids[None], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() >= min_gap:
            break
    labels = np.arange(n_samples) % num_classes
    features = centroids[labels] + rng.normal(0.0, spread, size=(n_samples, feat_dim))
    return LabeledDataset(np.clip(features, 0.0, 1.0), labels)


# --------------------------------------------------------------------------
# Partitioning


@dataclass(frozen=True)
class PartitionPlan:
    assignment: np.ndarray  # client id per sample
    n_clients: int
    beta: float | None

    def shards(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == c) for c in range(self.n_clients)]


def dirichlet_partition(labels, n_clients: int, beta: float | None, seed: int) -> PartitionPlan:
    """Assign every sample to a client.

    ``beta=None`` (``IID``) deals a shuffled index list round-robin. Otherwise
    each class is split across clients with proportions drawn from
    Dir(beta); clients left empty take one sample from the largest client.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n_clients > n:
        raise ValueError(f"{n_clients} clients but only {n} samples")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x504152]))
    assignment = np.empty(n, dtype=np.int64)
    if beta is None:
        assignment[rng.permutation(n)] = np.arange(n) % n_clients
        return PartitionPlan(assignment, n_clients, None)
    if beta <= 0:
        raise ValueError("beta must be positive")

    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        props = rng.dirichlet(np.full(n_clients, float(beta)))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            assignment[part] = client

    counts = np.bincount(assignment, minlength=n_clients)
    for client in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        moved = np.flatnonzero(assignment == donor)[-1]
        assignment[moved] = client
        counts[donor] -= 1
        counts[client] += 1
    return PartitionPlan(assignment, n_clients, float(beta))


# --------------------------------------------------------------------------
# Triggers


@dataclass(frozen=True)
class TriggerSpec:
    center: tuple[int, int] = (3, 3)
    arm_len: int = 2
    value: float = 1.0
    target_label: int = 0
    image_side: int = 28

    def __post_init__(self):
        r, c = self.center
        a, s = self.arm_len, self.image_side
        if a < 0 or not (0 <= r - a and r + a < s and 0 <= c - a and c + a < s):
            raise ValueError(f"plus trigger at {self.center} with arm {a} does not fit a {s}x{s} image")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("trigger value must be in [0, 1]")


def trigger_pixels(trigger: TriggerSpec, dba_part: int | None = None) -> list[tuple[int, int]]:
    """(row, col) cells of the plus, or of one of its four DBA pieces.

    Part 0 is the up arm plus the center, 1 down, 2 left, 3 right.
    """
    r, c = trigger.center
    arms = [
        [(r - i, c) for i in range(trigger.arm_len, 0, -1)] + [(r, c)],
        [(r + i, c) for i in range(1, trigger.arm_len + 1)],
        [(r, c - i) for i in range(trigger.arm_len, 0, -1)],
        [(r, c + i) for i in range(1, trigger.arm_len + 1)],
    ]
    if dba_part is None:
        return sorted(p for arm in arms for p in arm)
    if dba_part not in range(4):
        raise ValueError("dba_part must be 0..3")
    return arms[dba_part]


def apply_trigger(features: np.ndarray, trigger: TriggerSpec, dba_part: int | None = None) -> np.ndarray:
    """Copy of ``features`` (rows are flattened images) with the trigger stamped in."""
    side = trigger.image_side
    if features.shape[-1] != side * side:
        raise ValueError(f"feature dim {features.shape[-1]} is not {side}x{side}")
    out = np.array(features, dtype=np.float64)
    flat = [row * side + col for row, col in trigger_pixels(trigger, dba_part)]
    out[..., flat] = trigger.value
    return out


def poison_dataset(data: LabeledDataset, trigger: TriggerSpec, poison_ratio: float, seed: int,
                   dba_part: int | None = None) -> LabeledDataset:
    """Stamp the trigger on a seeded floor(r * n) subset and relabel it to the target."""
    if not 0.0 <= poison_ratio <= 1.0:
        raise ValueError("poison_ratio must be in [0, 1]")
    n = len(data)
    count = int(math.floor(poison_ratio * n))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x504F49]))
    chosen = np.sort(rng.permutation(n)[:count])
    features = data.features.copy()
    labels = data.labels.copy()
    if count:
        features[chosen] = apply_trigger(features[chosen], trigger, dba_part)
        labels[chosen] = trigger.target_label
    return LabeledDataset(features, labels)


def backdoor_test_set(clean: LabeledDataset, trigger: TriggerSpec) -> tuple[LabeledDataset, np.ndarray]:
    """Fully triggered copies of the non-target test samples, with their true labels."""
    keep = clean.labels != trigger.target_label
    return LabeledDataset(apply_trigger(clean.features[keep], trigger), clean.labels[keep]), keep
