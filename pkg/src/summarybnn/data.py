"""Dataset construction: IDX parsing, subsetting, corruption, synthetic tasks.

All loaders and generators are deterministic given their paths and seeds.
Feature matrices are float64 with pixel data scaled to [0, 1]; labels are
class indices.  Splits are named index arrays into one shared feature matrix
and are always pairwise disjoint.
"""

import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

EMBEDDING_MAGIC = b"SBEM"
EMBEDDING_VERSION = 1


class DataError(Exception):
    """Invalid dataset construction request."""


class IdxFormatError(DataError):
    """Malformed IDX payload (bad magic, truncation, count mismatch)."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: dict
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        seen = np.zeros(len(self.labels), dtype=bool)
        for name, idx in self.splits.items():
            idx = np.asarray(idx, dtype=np.int64)
            self.splits[name] = idx
            if idx.size and (idx.min() < 0 or idx.max() >= len(self.labels)):
                raise DataError(f"split {name!r} indexes out of range")
            if seen[idx].any():
                raise DataError(f"split {name!r} overlaps another split")
            seen[idx] = True

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def split(self, name: str):
        idx = self.splits[name]
        return self.features[idx], self.labels[idx]

    def split_size(self, name: str) -> int:
        return len(self.splits.get(name, ()))


def _three_way_split(n: int, rng: np.random.Generator) -> dict:
    perm = rng.permutation(n)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    return {
        "train": perm[:n_train],
        "val": perm[n_train : n_train + n_val],
        "test": perm[n_train + n_val :],
    }


# ---------------------------------------------------------------------------
# IDX format
#
#   images: >IIII header (magic 0x803, count, rows, cols), then count*rows*cols
#           unsigned bytes in row-major order
#   labels: >II header (magic 0x801, count), then count unsigned bytes


def _read_exact(path: str):
    with open(path, "rb") as fh:
        return fh.read()


def load_idx_images(path: str) -> np.ndarray:
    raw = _read_exact(path)
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: truncated image header ({len(raw)} bytes)")
    magic, count, rows, cols = struct.unpack_from(">IIII", raw)
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise IdxFormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols)


def load_idx_labels(path: str) -> np.ndarray:
    raw = _read_exact(path)
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated label header ({len(raw)} bytes)")
    magic, count = struct.unpack_from(">II", raw)
    if magic != LABELS_MAGIC:
        raise IdxFormatError(f"{path}: label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")
    if len(raw) != 8 + count:
        raise IdxFormatError(f"{path}: payload is {len(raw)} bytes, expected {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx_images(path: str, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise DataError(f"expected images of shape (n, rows, cols), got {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min() < 0 or labels.max() > 255:
        raise DataError("labels must be a vector of bytes")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def load_mnist_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse an IDX image/label pair into a flat dataset (pixels / 255).

    Everything lands in the train split; pair with :func:`merge_train_test`
    when a held-out IDX pair exists.
    """
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(
        features,
        labels,
        num_classes,
        {"train": np.arange(len(labels)), "val": np.array([], int), "test": np.array([], int)},
        provenance=f"idx:{images_path}",
    )


def merge_train_test(train: Dataset, test: Dataset) -> Dataset:
    if train.num_features != test.num_features:
        raise DataError(
            f"feature width mismatch: {train.num_features} vs {test.num_features}"
        )
    n_train = len(train.labels)
    return Dataset(
        np.vstack([train.features, test.features]),
        np.concatenate([train.labels, test.labels]),
        max(train.num_classes, test.num_classes),
        {
            "train": np.arange(n_train),
            "val": np.array([], int),
            "test": n_train + np.arange(len(test.labels)),
        },
        provenance=f"{train.provenance}+{test.provenance}",
    )


def ensure_validation_split(ds: Dataset, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Carve a seeded validation split out of train when none exists."""
    if ds.split_size("val"):
        return ds
    train_idx = ds.splits["train"]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(train_idx))
    n_val = int(round(val_fraction * len(train_idx)))
    splits = dict(ds.splits)
    splits["val"] = train_idx[perm[:n_val]]
    splits["train"] = train_idx[perm[n_val:]]
    return Dataset(ds.features, ds.labels, ds.num_classes, splits, ds.provenance)


# ---------------------------------------------------------------------------
# Subset construction


def binary_subset(ds: Dataset, class_a: int = 3, class_b: int = 5, size: int = 1000,
                  seed: int = 0) -> Dataset:
    """Balanced two-class task: ``size`` training points relabeled {0, 1}.

    Training points are an even seeded draw per class from the source train
    split.  Validation and test are built the same way from the source test
    split: a balanced draw capped by the rarer class, dealt evenly (and
    disjointly) between val and test.
    """
    half = size // 2
    if half * 2 != size:
        raise DataError(f"binary subset size must be even, got {size}")
    rng = np.random.default_rng(seed)
    out_feats, out_labels, cursor = [], [], 0

    def draw(split_name, per_class, parts=2):
        """Per class: per_class * parts seeded picks, dealt into ``parts`` piles."""
        idx = ds.splits[split_name]
        piles = [[] for _ in range(parts)]
        for new_label, cls in enumerate((class_a, class_b)):
            pool = idx[ds.labels[idx] == cls]
            if len(pool) < per_class * parts:
                raise DataError(
                    f"class {cls} has {len(pool)} samples in {split_name!r}, "
                    f"need {per_class * parts}"
                )
            take = pool[rng.choice(len(pool), size=per_class * parts, replace=False)]
            for p in range(parts):
                piles[p].append((take[p * per_class : (p + 1) * per_class], new_label))
        return piles

    def gather(pile):
        nonlocal cursor
        feats = np.vstack([ds.features[sel] for sel, _ in pile])
        labels = np.concatenate([np.full(len(sel), lab, np.int64) for sel, lab in pile])
        perm = rng.permutation(len(labels))
        out_feats.append(feats[perm])
        out_labels.append(labels[perm])
        block = np.arange(cursor, cursor + len(labels))
        cursor += len(labels)
        return block

    (train_pile,) = draw("train", half, parts=1)
    test_idx = ds.splits["test"]
    avail = min(
        int((ds.labels[test_idx] == class_a).sum()),
        int((ds.labels[test_idx] == class_b).sum()),
    )
    if avail < 2:
        raise DataError("source test split has no usable samples for both classes")
    val_pile, test_pile = draw("test", avail // 2, parts=2)
    splits = {
        "train": gather(train_pile),
        "val": gather(val_pile),
        "test": gather(test_pile),
    }
    return Dataset(
        np.vstack(out_feats),
        np.concatenate(out_labels),
        2,
        splits,
        provenance=f"{ds.provenance}|binary({class_a}vs{class_b},n={size})",
    )


def imbalance_subsample(ds: Dataset, ratios, seed: int = 0):
    """Thin the train split so class k keeps floor(ratio_k/max * available_k).

    Returns the thinned dataset (val/test untouched) together with the
    realized training class fractions for building a summary prior.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (ds.num_classes,):
        raise DataError(f"need {ds.num_classes} ratios, got {ratios.shape}")
    if np.any(ratios <= 0):
        raise DataError("ratios must be positive")
    rng = np.random.default_rng(seed)
    train_idx = ds.splits["train"]
    keep = []
    counts = np.zeros(ds.num_classes)
    for k in range(ds.num_classes):
        pool = train_idx[ds.labels[train_idx] == k]
        n_keep = int(np.floor(ratios[k] / ratios.max() * len(pool)))
        if n_keep == 0:
            raise DataError(f"class {k} would be emptied (pool {len(pool)})")
        take = rng.choice(len(pool), size=n_keep, replace=False)
        keep.append(pool[np.sort(take)])
        counts[k] = n_keep
    splits = dict(ds.splits)
    splits["train"] = rng.permutation(np.concatenate(keep))
    thinned = Dataset(
        ds.features, ds.labels, ds.num_classes, splits,
        provenance=f"{ds.provenance}|imbalance({ratios.tolist()})",
    )
    return thinned, counts / counts.sum()


# ---------------------------------------------------------------------------
# Corruption


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str  # "mix-noise" | "gaussian-additive"
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mix-noise", "gaussian-additive"):
            raise DataError(f"unknown corruption kind {self.kind!r}")
        if self.kind == "mix-noise" and not 0.0 <= self.strength <= 1.0:
            raise DataError(f"mix-noise strength must lie in [0, 1], got {self.strength}")
        if self.kind == "gaussian-additive" and self.strength < 0.0:
            raise DataError("gaussian-additive std must be nonnegative")


def corrupt(features: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply the corruption rowwise with seeded standard-normal noise.

    mix-noise blends (1 - g) * e + g * eta with eta ~ N(0, I).  Note the blend
    preserves variance only at g = 0 or 1 for unit-variance features; the
    formula is applied as stated rather than switched to sqrt-weights.
    gaussian-additive adds N(0, std^2) and clamps to [0, 1] (image variant).
    """
    features = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "mix-noise":
        if spec.strength == 0.0:
            return features.copy()
        eta = rng.standard_normal(features.shape)
        return (1.0 - spec.strength) * features + spec.strength * eta
    noisy = features + spec.strength * rng.standard_normal(features.shape)
    return np.clip(noisy, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Synthetic tasks


def synth_blobs(n: int, num_classes: int = 2, seed: int = 0, separation: float = 4.0) -> Dataset:
    """Unit-variance Gaussian blobs at fixed centers, 60/20/20 split.

    Centers sit on a circle of radius ``separation`` (in units of the
    within-blob standard deviation), so two classes at separation 4 are 8
    standard deviations apart and essentially linearly separable.
    """
    if n < num_classes * 10:
        raise DataError(f"need at least {num_classes * 10} samples, got {n}")
    rng = np.random.default_rng(seed)
    radius = separation
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    features = centers[labels] + rng.standard_normal((n, 2))
    return Dataset(
        features, labels, num_classes, _three_way_split(n, rng),
        provenance=f"blobs(n={n},k={num_classes},sep={separation},seed={seed})",
    )


def synth_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles with Gaussian jitter, 60/20/20 split."""
    if n < 20:
        raise DataError(f"need at least 20 samples, got {n}")
    rng = np.random.default_rng(seed)
    n_outer = n // 2
    t_outer = rng.uniform(0.0, np.pi, n_outer)
    t_inner = rng.uniform(0.0, np.pi, n - n_outer)
    outer = np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1)
    inner = np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1)
    features = np.vstack([outer, inner]) + noise * rng.standard_normal((n, 2))
    labels = np.concatenate([np.zeros(n_outer, int), np.ones(n - n_outer, int)])
    return Dataset(
        features, labels, 2, _three_way_split(n, rng),
        provenance=f"moons(n={n},noise={noise},seed={seed})",
    )


# ---------------------------------------------------------------------------
# Embedding files: header magic "SBEM", version, n, d, K as little-endian
# uint32, then n*d float32 features and n int32 labels (all little-endian).


def write_embeddings(path: str, features: np.ndarray, labels: np.ndarray,
                     num_classes: int) -> None:
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int32)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise DataError("features must be (n, d) with one label per row")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<IIII", EMBEDDING_VERSION, features.shape[0],
                             features.shape[1], num_classes))
        fh.write(features.astype("<f4").tobytes())
        fh.write(labels.astype("<i4").tobytes())


def load_embeddings(path: str) -> Dataset:
    raw = _read_exact(path)
    if len(raw) < 20 or raw[:4] != EMBEDDING_MAGIC:
        raise DataError(f"{path}: not an embedding file")
    version, n, d, k = struct.unpack_from("<IIII", raw, 4)
    if version != EMBEDDING_VERSION:
        raise DataError(f"{path}: unsupported embedding format version {version}")
    expected = 20 + 4 * n * d + 4 * n
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=20).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=20 + 4 * n * d)
    return Dataset(
        features.astype(np.float64), labels.astype(np.int64), k,
        {"train": np.arange(n), "val": np.array([], int), "test": np.array([], int)},
        provenance=f"embeddings:{path}",
    )
