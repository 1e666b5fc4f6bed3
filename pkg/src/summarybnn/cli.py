"""Batch command-line surface.

Subcommands: ``train`` (config-driven run producing checkpoint + step log +
metrics), ``eval`` (checkpoint against a dataset, with corruption sweeps and
OOD comparison), ``derive-prior`` (Beta parameters from task knowledge),
``histogram`` (hard and soft predicted-score histograms per region), and
``cv`` (grid search by validation NLL).

Training runs are described by a strictly validated JSON config; unknown keys
are rejected so configs stay trustworthy reproducibility artifacts.  Exit
codes: 0 success, 1 configuration/validation error, 2 runtime error.  On
failure a single machine-readable JSON line goes to stderr.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import data as D
from .bnn import (
    CheckpointError,
    ConfigError,
    ObjectiveConfig,
    VariationalMLP,
    load_checkpoint,
    save_checkpoint,
)
from .distributions import BetaParams, DirichletParams
from .metrics import MetricsRecord, delta_ood, evaluate, mc_probabilities, reliability_table
from .prior_derivation import InfeasibleTargetError, PriorKnowledge, forward_map, solve_prior
from .summary import (
    Partition,
    PartitionError,
    PartitionKindError,
    SummaryPrior,
    build_argmax_partition,
    build_equal_interval_partition,
    build_interval_partition,
    build_shell_partition,
    discretize_base,
    hard_counts,
    soft_region_weights,
    SoftHistogramConfig,
)
from .tensor import DomainError, TensorError
from .train import (
    CvGrid,
    TrainConfig,
    TrainingAbort,
    build_summary_prior,
    cross_validate,
    train,
    write_step_log,
)

CONFIG_ERRORS = (
    ConfigError,
    DomainError,
    TensorError,
    PartitionError,
    PartitionKindError,
    D.DataError,
    CheckpointError,
    InfeasibleTargetError,
    FileNotFoundError,
    json.JSONDecodeError,
)


class SchemaError(ConfigError):
    """Config document violates the schema."""


def _check_keys(section, allowed, required, where):
    if not isinstance(section, dict):
        raise SchemaError(f"{where}: expected an object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise SchemaError(f"{where}: unknown keys {unknown}")
    missing = sorted(set(required) - set(section))
    if missing:
        raise SchemaError(f"{where}: missing required keys {missing}")


# ---------------------------------------------------------------------------
# Config sections


def build_dataset(spec: dict) -> D.Dataset:
    _check_keys(
        spec,
        allowed={"kind", "n", "classes", "separation", "noise", "seed",
                 "train_images", "train_labels", "test_images", "test_labels",
                 "train", "test", "val_fraction", "subset", "imbalance"},
        required={"kind"},
        where="data",
    )
    kind = spec["kind"]
    seed = int(spec.get("seed", 0))
    if kind == "blobs":
        ds = D.synth_blobs(
            int(spec["n"]), int(spec.get("classes", 2)), seed,
            float(spec.get("separation", 4.0)),
        )
    elif kind == "moons":
        ds = D.synth_moons(int(spec["n"]), float(spec.get("noise", 0.1)), seed)
    elif kind == "mnist":
        ds = D.load_mnist_idx(spec["train_images"], spec["train_labels"])
        if "test_images" in spec:
            test = D.load_mnist_idx(spec["test_images"], spec["test_labels"])
            ds = D.merge_train_test(ds, test)
    elif kind == "embeddings":
        ds = D.load_embeddings(spec["train"])
        if "test" in spec:
            ds = D.merge_train_test(ds, D.load_embeddings(spec["test"]))
    else:
        raise SchemaError(f"data.kind: unknown kind {kind!r}")

    if "subset" in spec:
        sub = spec["subset"]
        _check_keys(sub, {"class_a", "class_b", "size", "seed"}, {"size"}, "data.subset")
        ds = D.binary_subset(
            ds, int(sub.get("class_a", 3)), int(sub.get("class_b", 5)),
            int(sub["size"]), int(sub.get("seed", seed)),
        )
    if "imbalance" in spec:
        imb = spec["imbalance"]
        _check_keys(imb, {"ratios", "seed"}, {"ratios"}, "data.imbalance")
        ds, _ = D.imbalance_subsample(ds, imb["ratios"], int(imb.get("seed", seed)))
    if kind in ("mnist", "embeddings"):
        ds = D.ensure_validation_split(ds, float(spec.get("val_fraction", 0.2)), seed)
    return ds


def build_partition(spec: dict, num_classes: int | None = None) -> Partition:
    _check_keys(
        spec, {"kind", "boundaries", "bins", "thresholds", "num_classes"},
        {"kind"}, "partition",
    )
    kind = spec["kind"]
    k = int(spec.get("num_classes", 0) or (num_classes or 0))
    if kind == "interval-bins":
        return build_interval_partition(spec["boundaries"])
    if kind == "equal-bins":
        return build_equal_interval_partition(int(spec["bins"]))
    if kind == "argmax-regions":
        if k < 2:
            raise SchemaError("partition.num_classes required for argmax-regions")
        return build_argmax_partition(k)
    if kind == "argmax-shells":
        if k < 2:
            raise SchemaError("partition.num_classes required for argmax-shells")
        return build_shell_partition(k, spec["thresholds"])
    raise SchemaError(f"partition.kind: unknown kind {kind!r}")


def build_summary(spec: dict, dataset: D.Dataset) -> SummaryPrior:
    if "file" in spec:
        _check_keys(spec, {"file"}, {"file"}, "objective.summary")
        with open(spec["file"]) as fh:
            prior = SummaryPrior.from_json(fh.read())
        covered = 2 if prior.partition.kind == "interval-bins" else prior.partition.num_classes
        if covered != dataset.num_classes:
            raise SchemaError(
                f"objective.summary.file: prior covers {covered} classes, "
                f"dataset has {dataset.num_classes}"
            )
        return prior
    _check_keys(spec, {"partition", "base", "concentration"},
                {"partition", "base", "concentration"}, "objective.summary")
    partition = build_partition(spec["partition"], dataset.num_classes)
    base_spec = spec["base"]
    _check_keys(base_spec, {"kind", "a", "b", "concentration", "expected_accuracy"},
                {"kind"}, "objective.summary.base")
    alpha = float(spec["concentration"])
    kind = base_spec["kind"]
    if kind in ("uniform", "auto"):
        return build_summary_prior(
            dataset, partition, kind, alpha,
            float(base_spec.get("expected_accuracy", 0.97)),
        )
    if kind == "beta":
        base = BetaParams(float(base_spec["a"]), float(base_spec["b"]))
    elif kind == "dirichlet":
        base = DirichletParams(tuple(base_spec["concentration"]))
    elif kind == "class-fractions":
        train_labels = dataset.labels[dataset.splits["train"]]
        base = np.bincount(train_labels, minlength=dataset.num_classes).astype(float)
    else:
        raise SchemaError(f"summary.base.kind: unknown kind {kind!r}")
    return SummaryPrior(partition, discretize_base(base, partition), alpha)


def build_objective(spec: dict, dataset: D.Dataset) -> ObjectiveConfig:
    _check_keys(
        spec,
        {"method", "mc_samples", "prior_std", "smoothing", "summary", "histogram_slope"},
        {"method"}, "objective",
    )
    summary = build_summary(spec["summary"], dataset) if "summary" in spec else None
    return ObjectiveConfig(
        method=spec["method"],
        dataset_size=dataset.split_size("train"),
        mc_samples=int(spec.get("mc_samples", 4)),
        prior_std=float(spec.get("prior_std", 1.0)),
        smoothing=spec.get("smoothing"),
        summary=summary,
        softhist=SoftHistogramConfig(slope=float(spec.get("histogram_slope", 500.0))),
    )


def build_train_config(spec: dict, num_classes: int) -> TrainConfig:
    _check_keys(
        spec, {"steps", "batch_size", "learning_rate", "seed", "eval_every",
               "eval_mc_samples"},
        set(), "train",
    )
    default_steps = 3000 if num_classes == 2 else 5000
    return TrainConfig(
        steps=int(spec.get("steps", default_steps)),
        batch_size=int(spec.get("batch_size", 256)),
        learning_rate=float(spec.get("learning_rate", 1e-3)),
        seed=int(spec.get("seed", 0)),
        eval_every=int(spec.get("eval_every", 0)),
        eval_mc_samples=int(spec.get("eval_mc_samples", 32)),
    )


def default_hidden_layers(data_kind: str) -> list:
    """Architecture defaults by input type: one 128-wide layer for embedding
    vectors, 128-64 for image pixels, a small layer for synthetic tasks."""
    if data_kind == "embeddings":
        return [128]
    if data_kind == "mnist":
        return [128, 64]
    return [32]


def load_run_config(path: str) -> dict:
    with open(path) as fh:
        config = json.load(fh)
    _check_keys(
        config, {"data", "model", "objective", "train", "output", "grid"},
        {"data", "model", "objective", "train", "output"}, "config",
    )
    _check_keys(config["model"], {"hidden", "activation"}, set(), "model")
    _check_keys(config["output"], {"dir"}, {"dir"}, "output")
    return config


def prepare_output_dir(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(
            f"output directory {path!r} is not empty; pass --force to overwrite"
        )
    os.makedirs(path, exist_ok=True)


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    out_dir = config["output"]["dir"]
    prepare_output_dir(out_dir, args.force)
    dataset = build_dataset(config["data"])
    objective_cfg = build_objective(config["objective"], dataset)
    train_cfg = build_train_config(config["train"], dataset.num_classes)
    hidden = tuple(config["model"].get("hidden", default_hidden_layers(config["data"]["kind"])))
    model = VariationalMLP(
        (dataset.num_features, *hidden, dataset.num_classes),
        config["model"].get("activation", "tanh"),
        prior_std=objective_cfg.prior_std,
        seed=_derived_seed(train_cfg.seed, 1),
    )
    result = train(model, dataset, objective_cfg, train_cfg)
    save_checkpoint(result.model, os.path.join(out_dir, "model.ckpt"), objective_cfg.method)
    write_step_log(os.path.join(out_dir, "train-log.csv"), result.log)
    record = evaluate(
        result.model, *dataset.split("test"),
        mc_samples=train_cfg.eval_mc_samples,
        seed=_derived_seed(train_cfg.seed, 2),
        point_estimate=not objective_cfg.uses_sampling,
    )
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        fh.write(record.to_json() + "\n")
    print(f"wrote checkpoint, train-log.csv, metrics.json to {out_dir}")
    return 0


def _load_data_file(path: str) -> D.Dataset:
    with open(path) as fh:
        return build_dataset(json.load(fh))


def cmd_eval(args) -> int:
    model, method = load_checkpoint(args.checkpoint)
    dataset = _load_data_file(args.data)
    x, y = dataset.split(args.split)
    point = method in ("map", "map-sl")
    prepare_output_dir(args.out, args.force)
    gammas = [float(g) for g in args.corrupt.split(",")] if args.corrupt else [0.0]
    corrupt_seed = args.corrupt_seed if args.corrupt_seed is not None else _derived_seed(args.seed, 3)
    lines = ["gamma," + MetricsRecord.csv_header()]
    reliability_lines = ["gamma,bin,lo,hi,count,confidence,accuracy"]
    for gamma in gammas:
        spec = D.CorruptionSpec(args.corrupt_kind, gamma, corrupt_seed)
        corrupted = D.corrupt(x, spec)
        record = evaluate(
            model, corrupted, y,
            mc_samples=args.mc_samples, seed=args.seed, point_estimate=point,
        )
        lines.append(repr(gamma) + "," + record.to_csv_row())
        probs = mc_probabilities(model, corrupted, args.mc_samples, args.seed, point)
        for row in reliability_table(probs, y):
            reliability_lines.append(
                repr(gamma) + "," + ",".join(repr(v) for v in row)
            )
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(args.out, "reliability.csv"), "w") as fh:
        fh.write("\n".join(reliability_lines) + "\n")
    if args.ood:
        ood = _load_data_file(args.ood)
        ood_x, _ = ood.split(args.split)
        in_e, ood_e, delta = delta_ood(
            model, x, ood_x, mc_samples=args.mc_samples, seed=args.seed,
            point_estimate=point,
        )
        with open(os.path.join(args.out, "delta-ood.json"), "w") as fh:
            json.dump(
                {"delta": delta, "in_entropy": in_e, "ood_entropy": ood_e},
                fh, sort_keys=True,
            )
            fh.write("\n")
    extras = " and delta-ood.json" if args.ood else ""
    print(f"wrote metrics.csv, reliability.csv{extras} to {args.out}")
    return 0


def cmd_derive_prior(args) -> int:
    knowledge = PriorKnowledge(args.minority_fraction, args.expected_accuracy)
    result = solve_prior(knowledge)
    achieved_gamma0, achieved_acc = forward_map(result.params)
    payload = {
        "a": result.params.a,
        "b": result.params.b,
        "achieved_majority_fraction": achieved_gamma0,
        "achieved_expected_accuracy": achieved_acc,
        "residual": result.residual,
    }
    print(json.dumps(payload, sort_keys=True))
    if args.partition:
        with open(args.partition) as fh:
            partition = build_partition(json.load(fh))
        prior = SummaryPrior(
            partition, discretize_base(result.params, partition), args.concentration
        )
        out = args.out or "summary-prior.json"
        with open(out, "w") as fh:
            fh.write(prior.to_json() + "\n")
        print(f"wrote summary prior to {out}")
    return 0


def cmd_histogram(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _load_data_file(args.data)
    with open(args.partition) as fh:
        partition = build_partition(json.load(fh), dataset.num_classes)
    x, _ = dataset.split(args.split)
    if args.mc_samples > 0:
        per_draw = mc_probs_per_draw(model, x, args.mc_samples, args.seed)
        probs = per_draw.reshape(-1, per_draw.shape[-1])
    else:
        probs = mc_probabilities(model, x, 0, args.seed, point_estimate=True)
    if partition.kind == "interval-bins":
        values = probs[:, 1]
    else:
        values = probs
    hard = hard_counts(values, partition)
    soft = soft_region_weights(values, partition, SoftHistogramConfig()).data
    prepare_output_dir(args.out, args.force)
    lines = ["region,center,width,hard_count,soft_weight"]
    for i in range(partition.size):
        lines.append(
            f"{i},{partition.centers[i]!r},{partition.widths[i]!r},"
            f"{int(hard[i])},{float(soft[i])!r}"
        )
    with open(os.path.join(args.out, "histogram.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote histogram.csv to {args.out}")
    return 0


def mc_probs_per_draw(model, x, mc_samples, seed):
    from .bnn import predict_probs

    noise = model.sample_noise(mc_samples, np.random.default_rng(seed))
    return predict_probs(model, x, noise)


def cmd_cv(args) -> int:
    config = load_run_config(args.config)
    if "grid" not in config:
        raise SchemaError("config: cv needs a 'grid' section")
    grid_spec = config["grid"]
    _check_keys(
        grid_spec, {"alphas", "prior_stds", "smoothings", "s0", "expected_accuracy"},
        set(), "grid",
    )
    out_dir = config["output"]["dir"]
    prepare_output_dir(out_dir, args.force)
    dataset = build_dataset(config["data"])
    method = config["objective"]["method"]
    defaults = CvGrid()
    grid = CvGrid(
        alphas=tuple(grid_spec.get("alphas", defaults.alphas)),
        prior_stds=tuple(grid_spec.get("prior_stds", defaults.prior_stds)),
        smoothings=tuple(grid_spec.get("smoothings", defaults.smoothings)),
        base_kinds=tuple(grid_spec.get("s0", defaults.base_kinds)),
    )
    train_cfg = build_train_config(config["train"], dataset.num_classes)
    partition = None
    if "summary" in config["objective"]:
        partition = build_partition(
            config["objective"]["summary"]["partition"], dataset.num_classes
        )
    result = cross_validate(
        dataset, method, grid, train_cfg,
        hidden_layers=tuple(config["model"].get("hidden", default_hidden_layers(config["data"]["kind"]))),
        activation=config["model"].get("activation", "tanh"),
        mc_samples=int(config["objective"].get("mc_samples", 4)),
        partition=partition,
        expected_accuracy=float(grid_spec.get("expected_accuracy", 0.97)),
        jobs=args.jobs,
    )
    columns = ("prior_std", "alpha", "smoothing", "base")
    lines = [",".join(columns) + ",val_nll,status"]
    for row in result.table:
        cells = [
            "" if column not in row.cell else
            (row.cell[column] if isinstance(row.cell[column], str) else repr(row.cell[column]))
            for column in columns
        ]
        lines.append(",".join(cells) + f",{row.val_nll!r},{row.status}")
    with open(os.path.join(out_dir, "cv-table.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")

    best_config = json.loads(json.dumps(config))  # deep copy
    best_config.pop("grid")
    best_config["objective"]["prior_std"] = result.best_cell.get("prior_std", 1.0)
    if "smoothing" in result.best_cell:
        best_config["objective"]["smoothing"] = result.best_cell["smoothing"]
    if "alpha" in result.best_cell:
        best_config["objective"]["summary"]["concentration"] = result.best_cell["alpha"]
        best_config["objective"]["summary"]["base"] = {"kind": result.best_cell["base"]}
    with open(os.path.join(out_dir, "best-config.json"), "w") as fh:
        json.dump(best_config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote cv-table.csv and best-config.json to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="summarybnn",
        description="Train and evaluate variational classifiers with "
                    "summary-statistic likelihoods.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training config")
    p_train.add_argument("config")
    p_train.add_argument("--force", action="store_true")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="JSON data-section file")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--corrupt", default="", help="comma-separated gamma values")
    p_eval.add_argument("--corrupt-kind", default="mix-noise",
                        choices=["mix-noise", "gaussian-additive"])
    p_eval.add_argument("--corrupt-seed", type=int, default=None)
    p_eval.add_argument("--ood", default="", help="JSON data-section file for OOD")
    p_eval.add_argument("--mc-samples", type=int, default=32)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--force", action="store_true")
    p_eval.set_defaults(fn=cmd_eval)

    p_prior = sub.add_parser("derive-prior", help="Beta base from task knowledge")
    p_prior.add_argument("--minority-fraction", type=float, required=True)
    p_prior.add_argument("--expected-accuracy", type=float, required=True)
    p_prior.add_argument("--partition", default="", help="partition JSON file")
    p_prior.add_argument("--concentration", type=float, default=1000.0)
    p_prior.add_argument("--out", default="")
    p_prior.set_defaults(fn=cmd_derive_prior)

    p_hist = sub.add_parser("histogram", help="predicted-score histogram per region")
    p_hist.add_argument("--checkpoint", required=True)
    p_hist.add_argument("--data", required=True)
    p_hist.add_argument("--partition", required=True)
    p_hist.add_argument("--out", required=True)
    p_hist.add_argument("--split", default="test")
    p_hist.add_argument("--mc-samples", type=int, default=0,
                        help="0 evaluates at the posterior means")
    p_hist.add_argument("--seed", type=int, default=0)
    p_hist.add_argument("--force", action="store_true")
    p_hist.set_defaults(fn=cmd_histogram)

    p_cv = sub.add_parser("cv", help="grid search by validation NLL")
    p_cv.add_argument("config")
    p_cv.add_argument("--jobs", type=int, default=1,
                      help="worker processes for grid cells")
    p_cv.add_argument("--force", action="store_true")
    p_cv.set_defaults(fn=cmd_cv)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CONFIG_ERRORS as exc:
        sys.stderr.write(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n"
        )
        return 1
    except (TrainingAbort, ArithmeticError, OSError) as exc:
        sys.stderr.write(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n"
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
