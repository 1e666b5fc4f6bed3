"""Optimization loop, seeding contract, and hyperparameter cross-validation.

One training run is fully determined by (seed, config, dataset): the seed
spawns independent streams for shuffling, reparameterization noise, and
validation draws.  Minibatches are sampled without replacement within each
epoch and the order is reshuffled per epoch.
"""

import json
import time
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .bnn import ConfigError, ObjectiveConfig, VariationalMLP, objective
from .data import Dataset
from .metrics import evaluate_split
from .prior_derivation import PriorKnowledge, solve_prior
from .summary import (
    ARGMAX_REGIONS,
    INTERVAL_BINS,
    Partition,
    SummaryPrior,
    discretize_base,
)

STEP_LOG_COLUMNS = ("step", "loss", "cat-term", "summary-term", "kl-term", "val-nll", "wall-ms")


class TrainingAbort(Exception):
    """Loss went non-finite; carries the step index and term breakdown."""

    def __init__(self, step: int, categorical: float, summary: float, kl: float):
        super().__init__(
            f"non-finite loss at step {step} "
            f"(categorical={categorical!r}, summary={summary!r}, kl={kl!r})"
        )
        self.step = step
        self.categorical = categorical
        self.summary = summary
        self.kl = kl


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # 0 disables in-loop validation
    eval_mc_samples: int = 32

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")


class Adam:
    """In-place Adam over a list of parameter arrays."""

    def __init__(self, arrays, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.arrays = list(arrays)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in self.arrays]
        self.v = [np.zeros_like(a) for a in self.arrays]
        self._scratch = [np.zeros_like(a) for a in self.arrays]

    def step(self, grads) -> None:
        if len(grads) != len(self.arrays):
            raise ConfigError(f"expected {len(self.arrays)} gradients, got {len(grads)}")
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for i, (arr, g) in enumerate(zip(self.arrays, grads)):
            m, v, tmp = self.m[i], self.v[i], self._scratch[i]
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=tmp)
            m += tmp
            v *= self.beta2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v += tmp
            np.divide(v, bias2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.learning_rate / bias1
            arr -= tmp


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    categorical: float
    summary: float
    kl: float
    val_nll: float | None
    wall_ms: float


@dataclass
class TrainResult:
    model: VariationalMLP
    log: list


def write_step_log(path: str, records, include_timing: bool = False) -> None:
    """CSV step log; timing stays blank unless asked for, keeping reruns
    byte-identical."""
    lines = [",".join(STEP_LOG_COLUMNS)]
    for r in records:
        lines.append(
            ",".join(
                [
                    str(r.step),
                    repr(r.loss),
                    repr(r.categorical),
                    repr(r.summary),
                    repr(r.kl),
                    "" if r.val_nll is None else repr(r.val_nll),
                    repr(r.wall_ms) if include_timing else "",
                ]
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _epoch_batches(train_idx, batch_size, rng):
    while True:
        perm = rng.permutation(train_idx)
        for start in range(0, len(perm), batch_size):
            yield perm[start : start + batch_size]


def train(model: VariationalMLP, dataset: Dataset, objective_cfg: ObjectiveConfig,
          train_cfg: TrainConfig) -> TrainResult:
    """Run Adam for the configured number of steps; returns model + step log."""
    if dataset.split_size("train") == 0:
        raise ConfigError("dataset has an empty train split")
    root = np.random.SeedSequence(train_cfg.seed)
    shuffle_seq, noise_seq, eval_seq = root.spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    eval_seed_base = int(eval_seq.generate_state(1)[0])

    optimizer = Adam(
        model.parameter_arrays(), train_cfg.learning_rate,
        train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps,
    )
    batches = _epoch_batches(dataset.splits["train"], train_cfg.batch_size, shuffle_rng)
    log = []
    start = time.perf_counter()
    from .tensor import Tape

    for step in range(1, train_cfg.steps + 1):
        idx = next(batches)
        x, y = dataset.features[idx], dataset.labels[idx]
        noise = (
            model.sample_noise(objective_cfg.mc_samples, noise_rng)
            if objective_cfg.uses_sampling
            else None
        )
        tape = Tape()
        parts = objective(model, x, y, objective_cfg, noise, tape)
        loss_value = parts.loss.item()
        if not np.isfinite(loss_value):
            raise TrainingAbort(step, parts.categorical, parts.summary, parts.kl)
        grads_by_node = tape.backward(parts.loss)
        optimizer.step(
            [grads_by_node[t.node_id] for layer in parts.bound for t in layer]
        )
        val_nll = None
        if train_cfg.eval_every and step % train_cfg.eval_every == 0 and dataset.split_size("val"):
            val_nll = evaluate_split(
                model, dataset, "val", train_cfg.eval_mc_samples,
                seed=eval_seed_base + step,
                point_estimate=not objective_cfg.uses_sampling,
            ).nll
        log.append(
            StepRecord(
                step=step,
                loss=loss_value,
                categorical=parts.categorical,
                summary=parts.summary,
                kl=parts.kl,
                val_nll=val_nll,
                wall_ms=(time.perf_counter() - start) * 1000.0,
            )
        )
    return TrainResult(model=model, log=log)


# ---------------------------------------------------------------------------
# Cross-validation


@dataclass(frozen=True)
class CvGrid:
    """Hyperparameter grids; which axes apply depends on the method."""

    alphas: tuple = (10.0, 50.0, 100.0, 500.0, 1000.0, 2500.0, 5000.0, 10000.0)
    prior_stds: tuple = (0.10, 0.25, 0.50, 1.00, 2.00)
    smoothings: tuple = (0.01, 0.05, 0.10)
    base_kinds: tuple = ("uniform", "auto")

    def __post_init__(self):
        for name in ("alphas", "prior_stds", "smoothings", "base_kinds"):
            if not getattr(self, name):
                raise ConfigError(f"CvGrid.{name} must be nonempty")

    def cells(self, method: str):
        if method == "elbo":
            return [{"prior_std": s} for s in self.prior_stds]
        if method == "ls":
            return [
                {"prior_std": s, "smoothing": e}
                for s in self.prior_stds
                for e in self.smoothings
            ]
        if method == "selbo":
            return [
                {"prior_std": s, "alpha": a, "base": b}
                for s in self.prior_stds
                for a in self.alphas
                for b in self.base_kinds
            ]
        if method == "map":
            return [{}]
        if method == "map-sl":
            return [{"alpha": a, "base": b} for a in self.alphas for b in self.base_kinds]
        raise ConfigError(f"unknown method {method!r}")


@dataclass(frozen=True)
class CvCellResult:
    cell: dict
    val_nll: float
    status: str  # "ok" | "failed"


@dataclass
class CvResult:
    best_cell: dict
    best_val_nll: float
    table: list


def _cell_seed(base_seed: int, cell: dict) -> np.random.SeedSequence:
    digest = zlib.crc32(json.dumps(cell, sort_keys=True).encode("utf-8"))
    return np.random.SeedSequence([base_seed, digest])


def build_summary_prior(dataset: Dataset, partition: Partition, base_kind,
                        alpha: float, expected_accuracy: float = 0.97) -> SummaryPrior:
    """Resolve a base spec ("uniform"/"auto"/explicit object) into a prior.

    "auto" derives the base from the train labels: Beta parameters from the
    minority fraction and expected accuracy for interval bins, raw class
    fractions for the argmax partition.
    """
    if base_kind == "auto":
        _, counts = np.unique(dataset.labels[dataset.splits["train"]], return_counts=True)
        if partition.kind == INTERVAL_BINS:
            if dataset.num_classes != 2:
                raise ConfigError("auto interval base needs a binary task")
            minority = counts.min() / counts.sum()
            base = solve_prior(PriorKnowledge(float(minority), expected_accuracy)).params
        elif partition.kind == ARGMAX_REGIONS:
            if len(counts) != partition.num_classes:
                raise ConfigError("train split is missing classes for class fractions")
            base = counts.astype(float)
        else:
            raise ConfigError("auto bases are not defined for shell partitions")
    else:
        base = base_kind
    mass = discretize_base(base, partition)
    return SummaryPrior(partition, mass, alpha)


def _evaluate_cell(args) -> CvCellResult:
    (dataset, method, cell, train_cfg, layer_sizes, activation, mc_samples,
     partition, expected_accuracy) = args
    seq = _cell_seed(train_cfg.seed, cell)
    model_seed, loop_seed, eval_seed = (int(s) for s in seq.generate_state(3))
    summary = None
    if "alpha" in cell:
        if partition is None:
            raise ConfigError(f"method {method!r} needs a partition for its summary")
        summary = build_summary_prior(
            dataset, partition, cell["base"], cell["alpha"], expected_accuracy
        )
    objective_cfg = ObjectiveConfig(
        method=method,
        dataset_size=dataset.split_size("train"),
        mc_samples=mc_samples,
        prior_std=cell.get("prior_std", 1.0),
        smoothing=cell.get("smoothing"),
        summary=summary,
    )
    model = VariationalMLP(
        layer_sizes, activation, prior_std=objective_cfg.prior_std, seed=model_seed
    )
    try:
        result = train(model, dataset, objective_cfg, replace(train_cfg, seed=loop_seed))
        nll = evaluate_split(
            result.model, dataset, "val", train_cfg.eval_mc_samples,
            seed=eval_seed, point_estimate=not objective_cfg.uses_sampling,
        ).nll
        return CvCellResult(cell, float(nll), "ok")
    except TrainingAbort:
        return CvCellResult(cell, float("nan"), "failed")


def cross_validate(dataset: Dataset, method: str, grid: CvGrid, train_cfg: TrainConfig,
                   *, hidden_layers=(32,), activation: str = "tanh", mc_samples: int = 4,
                   partition: Partition | None = None,
                   expected_accuracy: float = 0.97, jobs: int = 1) -> CvResult:
    """Train one model per grid cell and pick the lowest validation NLL.

    Ties break toward smaller alpha, then smaller smoothing, then smaller
    prior std.  Cell seeds derive from the cell contents, so duplicated cells
    reproduce identical numbers, failed cells do not kill the sweep, and the
    table is identical whether cells run sequentially or on ``jobs`` worker
    processes.
    """
    if dataset.split_size("val") == 0:
        raise ConfigError("cross-validation needs a validation split")
    layer_sizes = (dataset.num_features, *hidden_layers, dataset.num_classes)
    arg_list = [
        (dataset, method, cell, train_cfg, layer_sizes, activation, mc_samples,
         partition, expected_accuracy)
        for cell in grid.cells(method)
    ]
    if jobs > 1:
        import multiprocessing

        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            table = pool.map(_evaluate_cell, arg_list)
    else:
        table = [_evaluate_cell(args) for args in arg_list]
    ok = [row for row in table if row.status == "ok"]
    if not ok:
        raise ConfigError("every grid cell failed")
    best = min(
        ok,
        key=lambda row: (
            row.val_nll,
            row.cell.get("alpha", float("inf")),
            row.cell.get("smoothing", float("inf")),
            row.cell.get("prior_std", float("inf")),
            str(row.cell.get("base", "")),
        ),
    )
    return CvResult(best_cell=best.cell, best_val_nll=best.val_nll, table=table)
