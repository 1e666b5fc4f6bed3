"""Variational MLP classifier and its training objectives.

Each weight and bias carries an independent Gaussian posterior (mean plus a
softplus-parameterized scale).  The objective of a method is the negative of

    (N/|B|) * (1/M) sum_{i,j} log Cat(y_i | softmax(f(x_i; theta_j)))
    + [summary] (1/M) sum_j log Dir(s_obs | alpha * hist(probs_j))
    - [bayes]   KL(q(theta) || N(0, prior_std^2 I))

with theta_j = mu + softplus(rho) * eps_j under externally supplied noise.
``map`` and ``map-sl`` evaluate the network at the posterior means with no KL
term; ``ls`` smooths the one-hot targets inside the categorical term.

Checkpoint layout (little-endian): magic ``SBNN``, uint32 format version,
uint32 header length, a UTF-8 JSON header with sorted keys (activation,
layer_sizes, method), then for each layer the arrays mu_w, rho_w, mu_b,
rho_b as raw float64 in row-major order.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .distributions import softplus_inverse
from .summary import (
    INTERVAL_BINS,
    SoftHistogramConfig,
    SummaryPrior,
    soft_histogram,
    summary_loglik,
)

METHODS = ("elbo", "selbo", "ls", "map", "map-sl")
BAYES_METHODS = ("elbo", "selbo", "ls")
SUMMARY_METHODS = ("selbo", "map-sl")
ACTIVATIONS = ("tanh", "relu")

CHECKPOINT_MAGIC = b"SBNN"
CHECKPOINT_VERSION = 1


class ConfigError(Exception):
    """Objective/model configuration violates a contract."""


class CheckpointError(Exception):
    """Unreadable or inconsistent checkpoint payload."""


@dataclass
class LayerParams:
    mu_w: np.ndarray
    rho_w: np.ndarray
    mu_b: np.ndarray
    rho_b: np.ndarray

    def arrays(self):
        return [self.mu_w, self.rho_w, self.mu_b, self.rho_b]


class VariationalMLP:
    """Fully connected classifier with per-parameter Gaussian posteriors.

    ``layer_sizes`` runs input width through hidden widths to the class
    count.  Means start at N(0, 1/fan_in) draws; scales start at
    0.05 * prior_std through the softplus parameterization.
    """

    def __init__(self, layer_sizes, activation: str = "tanh", prior_std: float = 1.0,
                 seed: int = 0):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise ConfigError(f"layer_sizes must chain positive extents, got {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        if prior_std <= 0:
            raise ConfigError("prior_std must be positive")
        self.layer_sizes = layer_sizes
        self.activation = activation
        rng = np.random.default_rng(seed)
        rho0 = softplus_inverse(0.05 * prior_std)
        self.layers = []
        for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
            std = np.sqrt(1.0 / fan_in)
            self.layers.append(
                LayerParams(
                    mu_w=rng.normal(0.0, std, size=(fan_in, fan_out)),
                    rho_w=np.full((fan_in, fan_out), rho0),
                    mu_b=rng.normal(0.0, std, size=fan_out),
                    rho_b=np.full(fan_out, rho0),
                )
            )

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_features(self) -> int:
        return self.layer_sizes[0]

    def parameter_arrays(self):
        """All parameter arrays in canonical order (shared with gradients)."""
        out = []
        for layer in self.layers:
            out.extend(layer.arrays())
        return out

    @property
    def parameter_count(self) -> int:
        """Variational parameter count: a mean and a scale per weight/bias."""
        return sum(a.size for a in self.parameter_arrays())

    def snapshot(self) -> "VariationalMLP":
        clone = VariationalMLP(self.layer_sizes, self.activation)
        for mine, theirs in zip(clone.parameter_arrays(), self.parameter_arrays()):
            mine[...] = theirs
        return clone

    def sample_noise(self, mc_samples: int, rng: np.random.Generator):
        """``mc_samples`` standard-normal draws shaped like the weight arrays."""
        draws = []
        for _ in range(mc_samples):
            draws.append(
                [
                    (rng.standard_normal(l.mu_w.shape), rng.standard_normal(l.mu_b.shape))
                    for l in self.layers
                ]
            )
        return draws


def _activation_fn(name):
    return T.tanh if name == "tanh" else T.relu


def _bind(model: VariationalMLP, tape):
    """Wrap parameter arrays as tape variables (or constants when no tape)."""
    wrap = tape.variable if tape is not None else T.Tensor
    return [[wrap(a) for a in layer.arrays()] for layer in model.layers]


def _layer_moments(bound):
    """Per layer (mu_w, sigma_w, mu_b, sigma_b); each scale computed once so
    the sampling path and the KL term share the softplus node."""
    return [
        (mu_w, T.softplus(rho_w), mu_b, T.softplus(rho_b))
        for mu_w, rho_w, mu_b, rho_b in bound
    ]


def _draw_weights(moments, noise):
    """Concrete per-layer (W, b) tensors for one posterior draw.

    ``noise`` is one entry of ``sample_noise`` output, or None for the
    posterior means (MAP-style point evaluation).
    """
    weights = []
    for (mu_w, sig_w, mu_b, sig_b), eps in zip(moments, noise or [None] * len(moments)):
        if eps is None:
            weights.append((mu_w, mu_b))
        else:
            weights.append(
                (
                    T.add(mu_w, T.mul(sig_w, T.Tensor(eps[0]))),
                    T.add(mu_b, T.mul(sig_b, T.Tensor(eps[1]))),
                )
            )
    return weights


def _kl_to_prior(mu: T.Tensor, sigma: T.Tensor, prior_std: float) -> T.Tensor:
    """Sum over entries of log(s0/s) + (s^2 + mu^2)/(2 s0^2) - 1/2."""
    quad = T.scale(T.add(T.mul(sigma, sigma), T.mul(mu, mu)), 1.0 / (2.0 * prior_std**2))
    per_entry = T.shift(T.add(T.neg(T.log(sigma)), quad), np.log(prior_std) - 0.5)
    return T.tsum(per_entry)


def _logits(x: T.Tensor, weights, activation: str) -> T.Tensor:
    act = _activation_fn(activation)
    h = x
    for i, (w, b) in enumerate(weights):
        h = T.add(T.matmul(h, w), b)
        if i < len(weights) - 1:
            h = act(h)
    return h


@dataclass
class ObjectiveConfig:
    """What to optimize: method, MC budget, prior scale, summary attachment.

    ``dataset_size`` is the N that rescales the minibatch categorical term.
    """

    method: str
    dataset_size: int
    mc_samples: int = 4
    prior_std: float = 1.0
    smoothing: float | None = None
    summary: SummaryPrior | None = None
    softhist: SoftHistogramConfig = field(default_factory=SoftHistogramConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.dataset_size < 1:
            raise ConfigError("dataset_size must be positive")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be at least 1")
        if self.prior_std <= 0:
            raise ConfigError("prior_std must be positive")
        if self.method in SUMMARY_METHODS and self.summary is None:
            raise ConfigError(f"method {self.method!r} requires a summary prior")
        if self.method == "ls":
            if self.smoothing is None:
                raise ConfigError("method 'ls' requires a smoothing factor")
            if not 0.0 <= self.smoothing < 1.0:
                raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")

    @property
    def is_bayesian(self) -> bool:
        return self.method in BAYES_METHODS

    @property
    def uses_summary(self) -> bool:
        return self.method in SUMMARY_METHODS

    @property
    def uses_sampling(self) -> bool:
        return self.method in BAYES_METHODS


@dataclass
class ObjectiveParts:
    """Scalar loss tensor plus its logged components.

    Invariant: loss value reconstructs exactly as
    -(categorical + summary - kl).
    """

    loss: T.Tensor
    categorical: float
    summary: float
    kl: float
    bound: list


def _positive_class_scores(probs: T.Tensor, num_classes: int) -> T.Tensor:
    mask = np.zeros(num_classes)
    mask[1] = 1.0
    return T.tsum(T.mul(probs, T.Tensor(mask)), axis=1)


def _summary_input(probs: T.Tensor, prior: SummaryPrior, num_classes: int):
    if prior.partition.kind == INTERVAL_BINS:
        if num_classes != 2:
            raise ConfigError("interval-bin summaries require a 2-class head")
        return _positive_class_scores(probs, num_classes)
    if prior.partition.num_classes != num_classes:
        raise ConfigError(
            f"summary partition covers {prior.partition.num_classes} classes, "
            f"model has {num_classes}"
        )
    return probs


def objective(model: VariationalMLP, x_batch, y_batch, cfg: ObjectiveConfig,
              noise_set=None, tape=None) -> ObjectiveParts:
    """Minibatch loss to minimize, with per-term breakdown.

    ``noise_set`` must hold ``cfg.mc_samples`` draws for sampling methods
    (freeze it to make the loss a deterministic function of the parameters);
    point-evaluation methods ignore it.  Without a ``tape`` the parameters
    bind as constants, which makes this a pure loss evaluation usable as a
    finite-difference oracle.
    """
    x_batch = np.asarray(x_batch, dtype=np.float64)
    y_batch = np.asarray(y_batch, dtype=np.int64)
    if x_batch.ndim != 2 or x_batch.shape[0] == 0:
        raise ConfigError(f"batch must be nonempty (n, d), got {x_batch.shape}")
    k = model.num_classes
    if y_batch.min() < 0 or y_batch.max() >= k:
        raise ConfigError(f"labels must lie in [0, {k})")

    if cfg.uses_sampling:
        if noise_set is None or len(noise_set) != cfg.mc_samples:
            raise ConfigError(f"need {cfg.mc_samples} noise draws, got "
                              f"{0 if noise_set is None else len(noise_set)}")
        draws = noise_set
    else:
        draws = [None]

    n = x_batch.shape[0]
    targets = np.zeros((n, k))
    targets[np.arange(n), y_batch] = 1.0
    if cfg.method == "ls":
        targets = (1.0 - cfg.smoothing) * targets + cfg.smoothing / k
    targets_t = T.Tensor(targets)
    x_const = T.Tensor(x_batch)

    bound = _bind(model, tape)
    moments = _layer_moments(bound)
    log_lik_sum = None
    summary_sum = None
    for eps in draws:
        logits = _logits(x_const, _draw_weights(moments, eps), model.activation)
        log_probs = T.log_softmax(logits)
        ll = T.tsum(T.mul(log_probs, targets_t))
        log_lik_sum = ll if log_lik_sum is None else T.add(log_lik_sum, ll)
        if cfg.uses_summary:
            probs = T.softmax(logits)
            hist = soft_histogram(
                _summary_input(probs, cfg.summary, k), cfg.summary.partition, cfg.softhist
            )
            sl = summary_loglik(hist, cfg.summary)
            summary_sum = sl if summary_sum is None else T.add(summary_sum, sl)

    m = len(draws)
    categorical = T.scale(log_lik_sum, cfg.dataset_size / (n * m))
    total = categorical
    summary_term = None
    if summary_sum is not None:
        summary_term = T.scale(summary_sum, 1.0 / m)
        total = T.add(total, summary_term)
    kl_term = None
    if cfg.is_bayesian:
        for mu_w, sig_w, mu_b, sig_b in moments:
            for mu, sig in ((mu_w, sig_w), (mu_b, sig_b)):
                kl = _kl_to_prior(mu, sig, cfg.prior_std)
                kl_term = kl if kl_term is None else T.add(kl_term, kl)
        loss = T.sub(kl_term, total)
    else:
        loss = T.neg(total)
    return ObjectiveParts(
        loss=loss,
        categorical=categorical.item(),
        summary=0.0 if summary_term is None else summary_term.item(),
        kl=0.0 if kl_term is None else kl_term.item(),
        bound=bound,
    )


# ---------------------------------------------------------------------------
# Fast numpy prediction path (no tape, bit-compatible with the tensor path)


def _np_softplus(x):
    # same expression as tensor.softplus so both paths agree bitwise
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _np_forward_probs(x, concrete, activation):
    h = x
    act = np.tanh if activation == "tanh" else lambda v: np.maximum(v, 0.0)
    for i, (w, b) in enumerate(concrete):
        h = h @ w + b
        if i < len(concrete) - 1:
            h = act(h)
    shifted = h - h.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict_probs(model: VariationalMLP, x, noise_set=None) -> np.ndarray:
    """Per-draw class probabilities, shape (M, n, K).

    ``noise_set`` comes from :meth:`VariationalMLP.sample_noise`; pass None
    to evaluate at the posterior means (point prediction, M = 1).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.num_features:
        raise ConfigError(f"expected (n, {model.num_features}) inputs, got {x.shape}")
    draws = noise_set if noise_set is not None else [None]
    out = np.empty((len(draws), x.shape[0], model.num_classes))
    for j, eps in enumerate(draws):
        concrete = []
        for layer, layer_eps in zip(model.layers, eps or [None] * len(model.layers)):
            if layer_eps is None:
                concrete.append((layer.mu_w, layer.mu_b))
            else:
                concrete.append(
                    (
                        layer.mu_w + _np_softplus(layer.rho_w) * layer_eps[0],
                        layer.mu_b + _np_softplus(layer.rho_b) * layer_eps[1],
                    )
                )
        out[j] = _np_forward_probs(x, concrete, model.activation)
    return out


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: VariationalMLP, path: str, method: str = "elbo") -> None:
    header = json.dumps(
        {
            "activation": model.activation,
            "layer_sizes": list(model.layer_sizes),
            "method": method,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for arr in model.parameter_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    """Rebuild (model, method) from a checkpoint; strict about layout."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
        layer_sizes = header["layer_sizes"]
        activation = header["activation"]
        method = header["method"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if method not in METHODS or activation not in ACTIVATIONS:
        raise CheckpointError(f"{path}: header carries unknown method/activation")
    model = VariationalMLP(layer_sizes, activation)
    expected = sum(a.size for a in model.parameter_arrays())
    payload = raw[12 + header_len :]
    if len(payload) != expected * 8:
        raise CheckpointError(
            f"{path}: payload holds {len(payload) // 8} values, "
            f"architecture {tuple(layer_sizes)} needs {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    offset = 0
    for arr in model.parameter_arrays():
        arr[...] = flat[offset : offset + arr.size].reshape(arr.shape)
        offset += arr.size
    return model, method


# ---------------------------------------------------------------------------
# Flat parameter views (finite-difference oracles, optimizer-free probing)


def get_flat_parameters(model: VariationalMLP) -> np.ndarray:
    return np.concatenate([a.ravel() for a in model.parameter_arrays()])


def set_flat_parameters(model: VariationalMLP, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != model.parameter_count:
        raise ConfigError(f"expected {model.parameter_count} values, got {flat.size}")
    offset = 0
    for arr in model.parameter_arrays():
        arr[...] = flat[offset : offset + arr.size].reshape(arr.shape)
        offset += arr.size
