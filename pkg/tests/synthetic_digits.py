"""Deterministic handwritten-digit-like corpus for end-to-end tests.

No real MNIST files ship with (or may be downloaded by) this repository, so
protocol-level tests build a stand-in: 28x28 grayscale glyphs for the digits
3 and 5 (coarse 7x7 strokes upscaled 4x), randomized by per-sample shifts,
intensity scaling, and pixel noise.  The corpus is written to genuine IDX
files and consumed through the production loader, so the whole ingestion
path is exercised.
"""

import numpy as np

from summarybnn.data import Dataset, load_mnist_idx, merge_train_test, write_idx_images, write_idx_labels

_GLYPHS = {
    3: [
        "0111110",
        "0000010",
        "0000100",
        "0011100",
        "0000010",
        "0000010",
        "0111100",
    ],
    5: [
        "0111110",
        "0100000",
        "0111100",
        "0000010",
        "0000010",
        "0100010",
        "0011100",
    ],
}


def _prototype(digit: int) -> np.ndarray:
    bitmap = np.array([[int(c) for c in row] for row in _GLYPHS[digit]], dtype=np.float64)
    return np.kron(bitmap, np.ones((4, 4)))


def _render(prototype: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(-2, 3, size=2)
    canvas = np.zeros((28, 28))
    canvas[
        max(0, dy) : 28 + min(0, dy), max(0, dx) : 28 + min(0, dx)
    ] = prototype[max(0, -dy) : 28 + min(0, -dy), max(0, -dx) : 28 + min(0, -dx)]
    canvas *= 0.6 + 0.4 * rng.uniform()
    canvas += 0.12 * rng.standard_normal((28, 28))
    return np.clip(canvas, 0.0, 1.0)


def _block(counts: dict, rng: np.random.Generator):
    images, labels = [], []
    for digit, count in counts.items():
        proto = _prototype(digit)
        for _ in range(count):
            images.append(_render(proto, rng))
        labels.extend([digit] * count)
    images = np.round(np.stack(images) * 255.0).astype(np.uint8)
    labels = np.array(labels, dtype=np.uint8)
    perm = rng.permutation(len(labels))
    return images[perm], labels[perm]


def build_digit_corpus(directory, seed: int = 0, train_per_class: int = 1400,
                       test_per_class: int = 400) -> Dataset:
    """Write IDX train/test pairs under ``directory`` and load them back."""
    rng = np.random.default_rng(seed)
    paths = {name: str(directory / name) for name in
             ("train-images", "train-labels", "test-images", "test-labels")}
    for prefix, per_class in (("train", train_per_class), ("test", test_per_class)):
        images, labels = _block({3: per_class, 5: per_class}, rng)
        write_idx_images(paths[f"{prefix}-images"], images)
        write_idx_labels(paths[f"{prefix}-labels"], labels)
    train = load_mnist_idx(paths["train-images"], paths["train-labels"])
    test = load_mnist_idx(paths["test-images"], paths["test-labels"])
    return merge_train_test(train, test)
