"""Dataset generation, IDX loading, and federated partitioning.

Datasets are value objects: float32 feature matrices in [0, 1] plus
integer labels. Generators are pure functions of their arguments and a
seed, so every partition and key-sample set is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

KEY_KINDS = ("structured-noise", "disjoint-class-subset", "external-file")


class IdxFormatError(ValueError):
    """Base class for IDX parsing failures."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class Dataset:
    """Feature matrix plus labels.

    Attributes:
        samples: (N, D) float32 in [0, 1].
        labels: (N,) int64 in [0, class_count).
        class_count: number of classes.
        name: human-readable identifier.
    """

    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.samples)} samples vs {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.class_count
        ):
            raise ValueError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(
            self.samples[indices],
            self.labels[indices],
            self.class_count,
            name or self.name,
        )

    def to_csv(self, path: str) -> None:
        """Label column followed by feature columns, one row per sample."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label"] + [f"x{i}" for i in range(self.dim)])
            for label, row in zip(self.labels, self.samples):
                writer.writerow([int(label)] + [repr(float(v)) for v in row])


@dataclass
class Partition:
    """Disjoint index lists, one per client."""

    assignments: list[np.ndarray]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for idx in self.assignments:
            here = set(int(i) for i in idx)
            if seen & here:
                raise PartitionError("client index lists overlap")
            seen |= here

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def _blob_centers(
    classes: int, dim: int, rng: np.random.Generator, pair_gap: float
) -> np.ndarray:
    """Cluster centers arranged as near pairs of well-separated anchors.

    Consecutive classes (2j, 2j+1) share an anchor drawn uniformly in
    [0.15, 0.85]^dim and sit pair_gap apart along a random direction. The
    pairing keeps the task non-trivial: the coarse structure is easy, but
    each fine twin distinction depends on the individual trained model.
    """
    pairs = (classes + 1) // 2
    anchors = rng.uniform(0.15, 0.85, size=(pairs, dim)).astype(np.float32)
    centers = np.empty((classes, dim), dtype=np.float32)
    for j in range(pairs):
        direction = rng.standard_normal(dim).astype(np.float32)
        direction /= np.linalg.norm(direction)
        centers[2 * j] = anchors[j] + (pair_gap / 2.0) * direction
        if 2 * j + 1 < classes:
            centers[2 * j + 1] = anchors[j] - (pair_gap / 2.0) * direction
    return centers


def synth_blobs(
    classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    name: str = "blobs",
    pair_gap: float = 0.5,
) -> Dataset:
    """Class-conditional Gaussian clusters clipped to [0, 1].

    Centers come in near pairs around well-separated anchors (see
    _blob_centers); spread=0 collapses every sample onto its center.
    """
    if classes < 2:
        raise ValueError(f"need >= 2 classes, got {classes}")
    if per_class < 1:
        raise ValueError(f"need >= 1 sample per class, got {per_class}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10B]))
    centers = _blob_centers(classes, dim, rng, pair_gap)
    samples = np.empty((classes * per_class, dim), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    for k in range(classes):
        noise = rng.normal(0.0, spread, size=(per_class, dim)).astype(np.float32)
        samples[k * per_class : (k + 1) * per_class] = centers[k] + noise
        labels[k * per_class : (k + 1) * per_class] = k
    np.clip(samples, 0.0, 1.0, out=samples)
    return Dataset(samples, labels, classes, name)


def _read_be_u32(fh, path: str) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise TruncatedFileError(f"{path}: truncated header")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label file pair (MNIST convention, big endian).

    Pixels are scaled to [0, 1]; image and label counts must agree.
    """
    with open(images_path, "rb") as fh:
        magic = _read_be_u32(fh, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagicError(
                f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_be_u32(fh, images_path)
        rows = _read_be_u32(fh, images_path)
        cols = _read_be_u32(fh, images_path)
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise TruncatedFileError(
                f"{images_path}: expected {count * rows * cols} pixel bytes, "
                f"got {len(raw)}"
            )
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as fh:
        magic = _read_be_u32(fh, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise BadMagicError(
                f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        label_count = _read_be_u32(fh, labels_path)
        raw = fh.read(label_count)
        if len(raw) != label_count:
            raise TruncatedFileError(
                f"{labels_path}: expected {label_count} label bytes, got {len(raw)}"
            )
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise CountMismatchError(f"{count} images vs {label_count} labels")
    samples = (images.astype(np.float32) / 255.0).clip(0.0, 1.0)
    return Dataset(samples, labels, int(labels.max()) + 1 if count else 10, "idx")


def partition_iid(dataset: Dataset, clients: int, seed: int) -> Partition:
    """Shuffled near-equal split; sizes differ by at most one."""
    if clients < 1:
        raise PartitionError(f"clients must be >= 1, got {clients}")
    if clients > len(dataset):
        raise PartitionError(f"{clients} clients but only {len(dataset)} samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11D]))
    order = rng.permutation(len(dataset))
    return Partition([np.sort(part) for part in np.array_split(order, clients)])


def partition_dirichlet(
    dataset: Dataset,
    clients: int,
    beta: float,
    seed: int,
    max_retries: int = 100,
) -> Partition:
    """Per-class client proportions drawn from Dirichlet(beta).

    Small beta concentrates each class on few clients; large beta
    approaches the IID split. Draws leaving a client empty are retried up
    to max_retries before raising.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if clients < 1:
        raise PartitionError(f"clients must be >= 1, got {clients}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD14]))
    for _ in range(max_retries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(clients)]
        for k in range(dataset.class_count):
            idx = np.flatnonzero(dataset.labels == k)
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            proportions = rng.dirichlet(np.full(clients, beta))
            cuts = (np.cumsum(proportions)[:-1] * len(idx)).astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                buckets[client].append(part)
        assignments = [
            np.sort(np.concatenate(parts)) if parts else np.array([], dtype=np.int64)
            for parts in buckets
        ]
        if all(len(a) > 0 for a in assignments):
            return Partition(assignments)
    raise PartitionError(
        f"could not draw a non-empty Dirichlet partition in {max_retries} tries"
    )


def _stripe_patterns(classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One sinusoidal stripe pattern per key class.

    Frequency and phase vary by class, so patterns are mutually distinct.
    The moderate amplitude keeps them near the centroid of feature space,
    far from any blob cluster and classified with low confidence.
    """
    t = np.arange(dim, dtype=np.float32)
    amplitude = min(0.45, 0.9 / np.sqrt(dim))  # stays near the data shell
    patterns = np.empty((classes, dim), dtype=np.float32)
    for k in range(classes):
        freq = 1.0 + k + rng.uniform(-0.25, 0.25)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        patterns[k] = 0.5 + amplitude * np.sin(2.0 * np.pi * freq * t / dim + phase)
    return patterns


def make_key_samples(
    kind: str,
    count: int,
    classes: int,
    dim: int,
    seed: int,
    source: Dataset | None = None,
    images_path: str | None = None,
    labels_path: str | None = None,
) -> Dataset:
    """Class-balanced key samples, unrelated to the training data.

    Kinds:
        structured-noise: per-class sinusoidal stripe patterns plus small
            seeded jitter (the default; no external data needed).
        disjoint-class-subset: fresh blob clusters from an independent
            seed stream, or a class-balanced draw from `source`.
        external-file: an IDX pair given by images_path/labels_path.

    Labels are key-class indices 0..classes-1; count must divide evenly.
    """
    if kind not in KEY_KINDS:
        raise ValueError(f"unknown key-sample kind {kind!r}")
    if count % classes != 0:
        raise ValueError(f"count {count} not divisible by {classes} classes")
    per_class = count // classes
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4B3]))

    if kind == "structured-noise":
        patterns = _stripe_patterns(classes, dim, rng)
        samples = np.empty((count, dim), dtype=np.float32)
        labels = np.empty(count, dtype=np.int64)
        for k in range(classes):
            jitter = rng.normal(0.0, 0.05, size=(per_class, dim)).astype(np.float32)
            samples[k * per_class : (k + 1) * per_class] = patterns[k] + jitter
            labels[k * per_class : (k + 1) * per_class] = k
        np.clip(samples, 0.0, 1.0, out=samples)
        return Dataset(samples, labels, classes, "key-stripes")

    if kind == "disjoint-class-subset":
        if source is None:
            return synth_blobs(
                classes, per_class, dim, 0.05, seed ^ 0x5EED, name="key-blobs"
            )
        picks = []
        for k in range(classes):
            idx = np.flatnonzero(source.labels == k)
            if len(idx) < per_class:
                raise ValueError(f"source class {k} has {len(idx)} < {per_class}")
            picks.append(rng.choice(idx, size=per_class, replace=False))
        order = np.concatenate(picks)
        labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
        return Dataset(source.samples[order], labels, classes, "key-subset")

    # external-file
    if images_path is None or labels_path is None:
        raise FileNotFoundError("external-file kind needs images_path and labels_path")
    loaded = load_idx(images_path, labels_path)
    if len(loaded) < count:
        raise ValueError(f"external file holds {len(loaded)} < {count} samples")
    labels = np.tile(np.arange(classes, dtype=np.int64), per_class)[:count]
    return Dataset(loaded.samples[:count], labels, classes, "key-external")
