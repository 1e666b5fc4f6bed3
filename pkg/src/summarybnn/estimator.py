"""scikit-learn compatible front end for the variational classifiers.

Wraps model construction, summary-prior assembly, and the training loop in a
single estimator so the method composes with pipelines, grid search, and
cross-validation utilities from the wider ecosystem.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .bnn import ConfigError, ObjectiveConfig, VariationalMLP
from .data import Dataset
from .metrics import mc_probabilities
from .summary import (
    SoftHistogramConfig,
    SummaryPrior,
    build_argmax_partition,
    build_equal_interval_partition,
)
from .train import TrainConfig, build_summary_prior, train


class VariationalMLPClassifier(BaseEstimator, ClassifierMixin):
    """Mean-field variational MLP classifier with optional summary likelihood.

    Parameters
    ----------
    method : {"elbo", "selbo", "ls", "map", "map-sl"}
        Training objective.  "selbo" and "map-sl" add a Dirichlet-process
        likelihood for the histogram of predicted scores.
    hidden_layers : tuple of int
        Hidden widths between the input and the class logits.
    activation : {"tanh", "relu"}
    mc_samples : int
        Monte Carlo draws per training step for the sampling methods.
    prior_std : float
        Scale of the zero-mean Gaussian weight prior.
    smoothing : float
        Label smoothing factor (only read by method "ls").
    summary_prior : SummaryPrior or None
        Explicit summary observation.  When None and the method needs one, a
        prior is built from ``summary_base`` over ``summary_bins`` equal bins
        (binary tasks) or the per-class regions (multiclass).
    summary_base : {"uniform", "auto"}
        Automatic base selection: "auto" derives it from the training labels.
    summary_bins : int
        Bin count for binary score histograms.
    concentration : float
        Dirichlet-process concentration for the summary term.
    histogram_slope : float
        Sigmoid steepness of the differentiable histogram.  The default suits
        interval bins; wide regions (the argmax partition spans [1/K, 1])
        train better with a gentler slope so membership does not saturate.
    expected_accuracy : float
        Prior belief used by the "auto" base on binary tasks.
    steps, batch_size, learning_rate : optimization protocol.
    eval_mc_samples : int
        Posterior draws averaged by ``predict_proba``.
    random_state : int
        Seeds initialization, batching, and reparameterization noise.
    """

    def __init__(self, method="elbo", hidden_layers=(32,), activation="tanh",
                 mc_samples=4, prior_std=1.0, smoothing=0.01, summary_prior=None,
                 summary_base="uniform", summary_bins=10, concentration=1000.0,
                 histogram_slope=500.0, expected_accuracy=0.97, steps=1000,
                 batch_size=256, learning_rate=1e-3, eval_mc_samples=32,
                 random_state=0):
        self.method = method
        self.hidden_layers = hidden_layers
        self.activation = activation
        self.mc_samples = mc_samples
        self.prior_std = prior_std
        self.smoothing = smoothing
        self.summary_prior = summary_prior
        self.summary_base = summary_base
        self.summary_bins = summary_bins
        self.concentration = concentration
        self.histogram_slope = histogram_slope
        self.expected_accuracy = expected_accuracy
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.eval_mc_samples = eval_mc_samples
        self.random_state = random_state

    def _resolve_summary(self, dataset: Dataset) -> SummaryPrior | None:
        if self.method not in ("selbo", "map-sl"):
            return None
        if self.summary_prior is not None:
            return self.summary_prior
        if dataset.num_classes == 2:
            partition = build_equal_interval_partition(self.summary_bins)
        else:
            partition = build_argmax_partition(dataset.num_classes)
        return build_summary_prior(
            dataset, partition, self.summary_base, self.concentration,
            self.expected_accuracy,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigError("need at least two classes to fit a classifier")
        self.n_features_in_ = X.shape[1]
        dataset = Dataset(
            X, y_idx, len(self.classes_),
            {"train": np.arange(len(y_idx)), "val": np.array([], int),
             "test": np.array([], int)},
            provenance="estimator-fit",
        )
        seeds = np.random.SeedSequence(self.random_state).generate_state(3)
        objective_cfg = ObjectiveConfig(
            method=self.method,
            dataset_size=len(y_idx),
            mc_samples=self.mc_samples,
            prior_std=self.prior_std,
            smoothing=self.smoothing if self.method == "ls" else None,
            summary=self._resolve_summary(dataset),
            softhist=SoftHistogramConfig(slope=self.histogram_slope),
        )
        model = VariationalMLP(
            (X.shape[1], *self.hidden_layers, len(self.classes_)),
            self.activation, prior_std=self.prior_std, seed=int(seeds[0]),
        )
        train_cfg = TrainConfig(
            steps=self.steps, batch_size=self.batch_size,
            learning_rate=self.learning_rate, seed=int(seeds[1]),
        )
        result = train(model, dataset, objective_cfg, train_cfg)
        self.model_ = result.model
        self.train_log_ = result.log
        self._eval_seed = int(seeds[2])
        self._point = self.method in ("map", "map-sl")
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return mc_probabilities(
            self.model_, X, self.eval_mc_samples, self._eval_seed, self._point
        )

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[probs.argmax(axis=1)]
