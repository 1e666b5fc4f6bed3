"""Summary statistics over the prediction space.

A ``Partition`` splits the prediction space (the unit interval for binary
scores, the probability simplex for K classes) into labeled regions.  The
differentiable ``soft_histogram`` turns a batch of predictions into a
probability vector over those regions using pairs of steep sigmoids: a region
with center c and width d receives, from a scalar score y,

    g(y) = sigmoid(slope * (y - c + d/2)) - sigmoid(slope * (y - c - d/2)),

summed over the batch.  ``summary_loglik`` then scores an observed summary
mass under a Dirichlet whose concentration is the predicted histogram scaled
by the process concentration, which is the finite-partition marginal of a
Dirichlet process with the predicted histogram as base measure.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .distributions import BetaParams, DirichletParams, beta_cdf, dirichlet_sample_batch
from .tensor import DomainError, Tensor

INTERVAL_BINS = "interval-bins"
ARGMAX_REGIONS = "argmax-regions"
ARGMAX_SHELLS = "argmax-shells"
SIMPLEX_KINDS = (ARGMAX_REGIONS, ARGMAX_SHELLS)


class PartitionError(Exception):
    """Invalid partition construction parameters."""


class PartitionKindError(Exception):
    """Base distribution and partition kinds are incompatible."""


@dataclass(frozen=True)
class Partition:
    """Disjoint cover of the prediction space by ``size`` regions.

    Every region carries the 1-D interval (center, width) that its scalarized
    score is matched against, plus the class it is tied to (-1 means any
    class: all interval bins, and the central region of a shell partition).
    """

    kind: str
    num_classes: int
    boundaries: tuple
    centers: tuple
    widths: tuple
    region_class: tuple

    @property
    def size(self) -> int:
        return len(self.centers)

    def edges(self, index: int) -> tuple:
        c, w = self.centers[index], self.widths[index]
        return c - w / 2.0, c + w / 2.0


def build_interval_partition(boundaries) -> Partition:
    """Contiguous bins on [0, 1] split at strictly increasing boundaries."""
    bounds = tuple(float(b) for b in boundaries)
    if not bounds:
        raise PartitionError("interval partition needs at least one boundary")
    if any(not 0.0 < b < 1.0 for b in bounds):
        raise PartitionError(f"boundaries must lie inside (0, 1), got {bounds}")
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise PartitionError(f"boundaries must be strictly increasing, got {bounds}")
    edges = (0.0,) + bounds + (1.0,)
    centers = tuple((lo + hi) / 2.0 for lo, hi in zip(edges, edges[1:]))
    widths = tuple(hi - lo for lo, hi in zip(edges, edges[1:]))
    return Partition(INTERVAL_BINS, 2, bounds, centers, widths, (-1,) * len(centers))


def build_equal_interval_partition(num_bins: int) -> Partition:
    """``num_bins`` equal-width bins on [0, 1]."""
    if num_bins < 2:
        raise PartitionError("need at least 2 bins")
    return build_interval_partition([i / num_bins for i in range(1, num_bins)])


def build_argmax_partition(num_classes: int) -> Partition:
    """One region per predicted class; scalarized interval is [1/K, 1]."""
    if num_classes < 2:
        raise PartitionError("argmax partition needs K >= 2")
    lo = 1.0 / num_classes
    center, width = (lo + 1.0) / 2.0, 1.0 - lo
    k = num_classes
    return Partition(
        ARGMAX_REGIONS, k, (), (center,) * k, (width,) * k, tuple(range(k))
    )


def build_shell_partition(num_classes: int, shell_thresholds) -> Partition:
    """Central region plus confidence shells per class.

    Region 0 holds rows whose max probability is below the first threshold;
    region 1 + k*S + j holds rows with argmax k and max probability in
    [t_j, t_{j+1}), the last shell closed at 1.  Total K*S + 1 regions.
    """
    if num_classes < 2:
        raise PartitionError("shell partition needs K >= 2")
    thresholds = tuple(float(t) for t in shell_thresholds)
    lo = 1.0 / num_classes
    if not thresholds:
        raise PartitionError("shell partition needs at least one threshold")
    if any(not lo < t < 1.0 for t in thresholds):
        raise PartitionError(f"thresholds must lie inside (1/K, 1) = ({lo}, 1), got {thresholds}")
    if any(t2 <= t1 for t1, t2 in zip(thresholds, thresholds[1:])):
        raise PartitionError(f"thresholds must be strictly increasing, got {thresholds}")
    edges = (lo,) + thresholds + (1.0,)
    centers = [(lo + thresholds[0]) / 2.0]
    widths = [thresholds[0] - lo]
    classes = [-1]
    for k in range(num_classes):
        for j in range(len(thresholds)):
            centers.append((edges[j + 1] + edges[j + 2]) / 2.0)
            widths.append(edges[j + 2] - edges[j + 1])
            classes.append(k)
    return Partition(
        ARGMAX_SHELLS, num_classes, thresholds, tuple(centers), tuple(widths), tuple(classes)
    )


@dataclass(frozen=True)
class SoftHistogramConfig:
    slope: float = 500.0
    floor: float = 1e-6

    def __post_init__(self):
        if self.slope <= 0:
            raise DomainError("SoftHistogramConfig: slope must be positive")
        if self.floor <= 0:
            raise DomainError("SoftHistogramConfig: floor must be positive")


def _scalarize(predictions, partition):
    """Reduce predictions to (scalar scores Tensor [n], class index array).

    Interval bins take the scores as given; simplex partitions take the max
    probability per row (differentiable) and the hard argmax for routing.
    """
    preds = T.as_tensor(predictions)
    if preds.size == 0:
        raise T.EmptyReductionError("soft_histogram: empty batch")
    if partition.kind == INTERVAL_BINS:
        if preds.ndim != 1:
            raise T.DimensionError(
                f"interval bins expect a 1-D score vector, got shape {preds.shape}"
            )
        if np.any(preds.data < 0.0) or np.any(preds.data > 1.0):
            raise DomainError("interval bins expect scores in [0, 1]")
        return preds, None
    if preds.ndim != 2 or preds.shape[1] != partition.num_classes:
        raise T.DimensionError(
            f"{partition.kind} expects rows of {partition.num_classes} probabilities, "
            f"got shape {preds.shape}"
        )
    row_sums = preds.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(row_sums - 1.0) > 1e-6))
        raise DomainError(f"row {bad} is not a probability vector (sum {row_sums[bad]!r})")
    return T.tmax(preds, axis=1), np.argmax(preds.data, axis=1)


def _sigmoid_pair(scores: Tensor, lo: float, hi: float, slope: float) -> Tensor:
    left = T.sigmoid(T.scale(T.shift(scores, -lo), slope))
    right = T.sigmoid(T.scale(T.shift(scores, -hi), slope))
    return T.sub(left, right)


def soft_region_weights(predictions, partition: Partition, cfg: SoftHistogramConfig) -> Tensor:
    """Raw differentiable per-region weights, summed over the batch."""
    scores, hard_class = _scalarize(predictions, partition)
    weights = []
    for i in range(partition.size):
        lo, hi = partition.edges(i)
        g = _sigmoid_pair(scores, lo, hi, cfg.slope)
        region_class = partition.region_class[i]
        if region_class >= 0:
            g = T.mul(g, T.Tensor((hard_class == region_class).astype(np.float64)))
        weights.append(T.tsum(g))
    return T.stack(weights)


def soft_histogram(predictions, partition: Partition, cfg: SoftHistogramConfig | None = None) -> Tensor:
    """Normalized differentiable histogram: (w + floor) / sum(w + floor)."""
    cfg = cfg or SoftHistogramConfig()
    if cfg.floor >= 1.0 / partition.size:
        raise DomainError(
            f"floor {cfg.floor} must be below 1/b = {1.0 / partition.size}"
        )
    raw = soft_region_weights(predictions, partition, cfg)
    lifted = T.shift(raw, cfg.floor)
    return T.div(lifted, T.tsum(lifted))


def region_index(values, partition: Partition) -> np.ndarray:
    """Hard region assignment; unique and total for every valid input."""
    vals = np.asarray(values, dtype=np.float64)
    if partition.kind == INTERVAL_BINS:
        if vals.ndim != 1:
            raise T.DimensionError("interval bins expect a 1-D score vector")
        return np.searchsorted(np.asarray(partition.boundaries), vals, side="right")
    if vals.ndim != 2 or vals.shape[1] != partition.num_classes:
        raise T.DimensionError(f"expected rows of {partition.num_classes} probabilities")
    winner = np.argmax(vals, axis=1)
    if partition.kind == ARGMAX_REGIONS:
        return winner
    top = vals.max(axis=1)
    thresholds = np.asarray(partition.boundaries)
    shells = np.searchsorted(thresholds, top, side="right")
    num_shells = len(thresholds)
    return np.where(shells == 0, 0, 1 + winner * num_shells + (shells - 1))


def hard_counts(values, partition: Partition) -> np.ndarray:
    return np.bincount(region_index(values, partition), minlength=partition.size)


def floor_and_normalize(mass, floor: float = 1e-6) -> np.ndarray:
    """Lift entries to at least ``floor`` and rescale the rest to sum to 1.

    Water-filling keeps the map idempotent and order preserving: clipped
    entries sit exactly at the floor, the remainder is scaled uniformly.
    """
    m = np.asarray(mass, dtype=np.float64)
    if m.ndim != 1 or m.size < 2:
        raise T.DimensionError("mass must be a vector of at least 2 entries")
    if np.any(m < 0.0) or m.sum() <= 0.0:
        raise DomainError("mass entries must be nonnegative with positive total")
    if floor >= 1.0 / m.size:
        raise DomainError(f"floor {floor} must be below 1/b = {1.0 / m.size}")
    clipped = np.zeros(m.size, dtype=bool)
    for _ in range(m.size):
        free_total = m[~clipped].sum()
        scale = (1.0 - floor * clipped.sum()) / free_total
        newly = ~clipped & (m * scale < floor)
        if not newly.any():
            return np.where(clipped, floor, m * scale)
        clipped |= newly
    raise AssertionError("floor_and_normalize failed to converge")  # pragma: no cover


class SummaryPrior:
    """Observed summary mass over a partition plus the DP concentration.

    ``mass`` must already be floored (strictly positive, summing to 1);
    use :func:`floor_and_normalize` or :meth:`from_raw` to prepare it.
    """

    def __init__(self, partition: Partition, mass, concentration: float):
        mass = np.asarray(mass, dtype=np.float64)
        if mass.shape != (partition.size,):
            raise T.DimensionError(
                f"mass length {mass.shape} does not match partition size {partition.size}"
            )
        if np.any(mass <= 0.0):
            raise DomainError("SummaryPrior: mass entries must be strictly positive")
        if abs(mass.sum() - 1.0) > 1e-9:
            raise DomainError(f"SummaryPrior: mass sums to {mass.sum()!r}, not 1")
        if concentration <= 0.0:
            raise DomainError("SummaryPrior: concentration must be positive")
        self.partition = partition
        self.mass = mass
        self.mass.flags.writeable = False
        self.concentration = float(concentration)

    @classmethod
    def from_raw(cls, partition, mass, concentration, floor: float = 1e-6):
        return cls(partition, floor_and_normalize(mass, floor), concentration)

    def __eq__(self, other):
        return (
            isinstance(other, SummaryPrior)
            and self.partition == other.partition
            and self.concentration == other.concentration
            and np.array_equal(self.mass, other.mass)
        )

    def to_json(self) -> str:
        """Serialize as JSON text; floats carry 17 significant digits."""
        spec = {
            "concentration": float(self.concentration),
            "mass": [float(m) for m in self.mass],
            "partition": {
                "boundaries": [float(b) for b in self.partition.boundaries],
                "kind": self.partition.kind,
                "num_classes": self.partition.num_classes,
            },
        }
        return _dumps_17g(spec)

    @classmethod
    def from_json(cls, text: str) -> "SummaryPrior":
        spec = json.loads(text)
        part = spec["partition"]
        kind = part["kind"]
        if kind == INTERVAL_BINS:
            partition = build_interval_partition(part["boundaries"])
        elif kind == ARGMAX_REGIONS:
            partition = build_argmax_partition(part["num_classes"])
        elif kind == ARGMAX_SHELLS:
            partition = build_shell_partition(part["num_classes"], part["boundaries"])
        else:
            raise PartitionError(f"unknown partition kind {kind!r}")
        return cls(partition, np.array(spec["mass"], dtype=np.float64), spec["concentration"])


def _dumps_17g(obj, indent: int = 0) -> str:
    """JSON writer that renders floats with 17 significant digits.

    The stdlib encoder always prints the shortest round-trip form, so the
    fixed-precision contract needs a hand-rolled writer.  Keys are emitted in
    the order given (callers pass them sorted).
    """
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}"{k}": {_dumps_17g(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        items = [f"{inner}{_dumps_17g(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, float):
        return format(obj, ".17g")
    if isinstance(obj, int):
        return str(obj)
    return json.dumps(obj)


def summary_loglik(predicted: Tensor, prior: SummaryPrior) -> Tensor:
    """log Dir(observed mass | concentration * predicted histogram).

    Gradient flows into the predicted histogram through the concentration
    vector; the observed mass is a constant.
    """
    from .distributions import dirichlet_logpdf

    predicted = T.as_tensor(predicted)
    if predicted.shape != (prior.partition.size,):
        raise T.DimensionError(
            f"predicted histogram length {predicted.shape} does not match "
            f"partition size {prior.partition.size}"
        )
    if np.any(predicted.data <= 0.0) or abs(predicted.data.sum() - 1.0) > 1e-6:
        raise DomainError("predicted histogram must be strictly positive and sum to 1")
    concentration = T.scale(predicted, prior.concentration)
    return dirichlet_logpdf(concentration, T.Tensor(prior.mass))


def discretize_base(
    base,
    partition: Partition,
    *,
    floor: float = 1e-6,
    mc_samples: int = 10**6,
    seed: int = 12345,
) -> np.ndarray:
    """Project a base distribution onto a partition as a floored mass vector.

    Beta bases integrate bin by bin (interval partitions only); Dirichlet
    bases are discretized by seeded Monte Carlo region frequencies; an array
    is read as per-class fractions for the argmax partition; the string
    ``"uniform"`` spreads mass equally.
    """
    b = partition.size
    if isinstance(base, str):
        if base != "uniform":
            raise PartitionKindError(f"unknown base {base!r}")
        mass = np.full(b, 1.0 / b)
    elif isinstance(base, BetaParams):
        if partition.kind != INTERVAL_BINS:
            raise PartitionKindError("Beta bases require an interval partition")
        cdf = [0.0] + [beta_cdf(base, x) for x in partition.boundaries] + [1.0]
        mass = np.diff(cdf)
    elif isinstance(base, DirichletParams):
        if partition.kind not in SIMPLEX_KINDS:
            raise PartitionKindError("Dirichlet bases require a simplex partition")
        if len(base.concentration) != partition.num_classes:
            raise T.DimensionError(
                f"Dirichlet base has {len(base.concentration)} entries for "
                f"{partition.num_classes} classes"
            )
        rng = np.random.default_rng(seed)
        draws = dirichlet_sample_batch(np.array(base.concentration), mc_samples, rng)
        mass = hard_counts(draws, partition) / mc_samples
    else:
        fractions = np.asarray(base, dtype=np.float64)
        if partition.kind != ARGMAX_REGIONS:
            raise PartitionKindError("class fractions require the argmax partition")
        if fractions.shape != (partition.num_classes,):
            raise T.DimensionError(
                f"expected {partition.num_classes} class fractions, got {fractions.shape}"
            )
        if np.any(fractions < 0.0) or fractions.sum() <= 0.0:
            raise DomainError("class fractions must be nonnegative with positive total")
        mass = fractions / fractions.sum()
    return floor_and_normalize(mass, floor)
