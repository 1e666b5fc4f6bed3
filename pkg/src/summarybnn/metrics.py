"""Evaluation: NLL, accuracy, calibration, AUROC, macro F1, entropies.

Probabilities are Monte Carlo averages over posterior draws (or a single
mean-parameter pass for point models).  All metrics are deterministic given
(model, data, draw count, seed).
"""

import json
from dataclasses import dataclass

import numpy as np

from .bnn import ConfigError, VariationalMLP, predict_probs

ECE_BINS = 10

METRIC_FIELDS = ("nll", "accuracy", "ece", "auroc", "f1_macro", "mean_entropy", "n", "mc_samples")


@dataclass(frozen=True)
class MetricsRecord:
    nll: float
    accuracy: float
    ece: float
    auroc: float
    f1_macro: float
    mean_entropy: float
    n: int
    mc_samples: int

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def csv_header() -> str:
        return ",".join(METRIC_FIELDS)

    def to_csv_row(self) -> str:
        return ",".join(repr(getattr(self, name)) for name in METRIC_FIELDS)


def mc_probabilities(model: VariationalMLP, x, mc_samples: int, seed: int,
                     point_estimate: bool = False) -> np.ndarray:
    """Posterior-averaged class probabilities, shape (n, K)."""
    if point_estimate:
        return predict_probs(model, x)[0]
    rng = np.random.default_rng(seed)
    return predict_probs(model, x, model.sample_noise(mc_samples, rng)).mean(axis=0)


def negative_log_likelihood(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = np.maximum(probs[np.arange(len(labels)), labels], 1e-300)
    return float(-np.log(picked).mean())


def expected_calibration_error(probs: np.ndarray, labels: np.ndarray,
                               num_bins: int = ECE_BINS) -> float:
    """Equal-width confidence bins on the max probability."""
    confidence = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    bins = np.clip((confidence * num_bins).astype(int), 0, num_bins - 1)
    total = len(labels)
    ece = 0.0
    for b in range(num_bins):
        mask = bins == b
        if not mask.any():
            continue
        gap = abs(correct[mask].mean() - confidence[mask].mean())
        ece += (mask.sum() / total) * gap
    return float(ece)


def reliability_table(probs: np.ndarray, labels: np.ndarray,
                      num_bins: int = ECE_BINS) -> list:
    """Per-confidence-bin rows: (bin, lo, hi, count, confidence, accuracy).

    Empty bins carry zero count with confidence/accuracy of 0.  The ECE is
    the count-weighted sum of |accuracy - confidence| over these rows.
    """
    confidence = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    bins = np.clip((confidence * num_bins).astype(int), 0, num_bins - 1)
    rows = []
    for b in range(num_bins):
        mask = bins == b
        count = int(mask.sum())
        rows.append(
            (
                b,
                b / num_bins,
                (b + 1) / num_bins,
                count,
                float(confidence[mask].mean()) if count else 0.0,
                float(correct[mask].mean()) if count else 0.0,
            )
        )
    return rows


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auroc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mann-Whitney rank statistic with midrank tie handling."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = _midranks(np.asarray(scores, dtype=np.float64))
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Binary AUROC on the class-1 score; macro one-vs-rest otherwise."""
    k = probs.shape[1]
    if k == 2:
        return binary_auroc(probs[:, 1], labels == 1)
    per_class = []
    for c in range(k):
        positives = labels == c
        if positives.any() and (~positives).any():
            per_class.append(binary_auroc(probs[:, c], positives))
    return float(np.mean(per_class)) if per_class else 0.5


def f1_macro(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    scores = []
    for c in range(num_classes):
        tp = int(((predictions == c) & (labels == c)).sum())
        fp = int(((predictions == c) & (labels != c)).sum())
        fn = int(((predictions != c) & (labels == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def mean_entropy(probs: np.ndarray) -> float:
    safe = np.maximum(probs, 1e-300)  # 0 log 0 counts as 0
    contrib = np.where(probs > 0.0, probs * np.log(safe), 0.0)
    return float(-contrib.sum(axis=1).mean())


def evaluate(model: VariationalMLP, x, labels, mc_samples: int = 32, seed: int = 0,
             point_estimate: bool = False) -> MetricsRecord:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("evaluate: empty split")
    probs = mc_probabilities(model, x, mc_samples, seed, point_estimate)
    predictions = probs.argmax(axis=1)
    return MetricsRecord(
        nll=negative_log_likelihood(probs, labels),
        accuracy=float((predictions == labels).mean()),
        ece=expected_calibration_error(probs, labels),
        auroc=auroc(probs, labels),
        f1_macro=f1_macro(predictions, labels, model.num_classes),
        mean_entropy=mean_entropy(probs),
        n=len(labels),
        mc_samples=1 if point_estimate else mc_samples,
    )


def evaluate_split(model: VariationalMLP, dataset, split: str, mc_samples: int = 32,
                   seed: int = 0, point_estimate: bool = False) -> MetricsRecord:
    x, y = dataset.split(split)
    return evaluate(model, x, y, mc_samples, seed, point_estimate)


def delta_ood(model: VariationalMLP, in_x, ood_x, mc_samples: int = 32, seed: int = 0,
              point_estimate: bool = False):
    """(in-domain entropy, OOD entropy, OOD minus in-domain).

    Both sides share one set of posterior draws, so identical inputs give an
    exact zero.
    """
    in_x = np.asarray(in_x, dtype=np.float64)
    ood_x = np.asarray(ood_x, dtype=np.float64)
    if len(in_x) == 0 or len(ood_x) == 0:
        raise ConfigError("delta_ood: both splits must be nonempty")
    if in_x.shape[1] != ood_x.shape[1]:
        raise ConfigError(
            f"delta_ood: feature widths differ ({in_x.shape[1]} vs {ood_x.shape[1]})"
        )
    if point_estimate:
        noise = None
    else:
        noise = model.sample_noise(mc_samples, np.random.default_rng(seed))
    in_entropy = mean_entropy(predict_probs(model, in_x, noise).mean(axis=0))
    ood_entropy = mean_entropy(predict_probs(model, ood_x, noise).mean(axis=0))
    return in_entropy, ood_entropy, ood_entropy - in_entropy
