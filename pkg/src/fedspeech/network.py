"""From-scratch feed-forward classifier in float64 numpy.

Implements the fixed stack used throughout the package: fully-connected
layers with train/eval batch normalization, ReLU, a softmax head, mean
cross-entropy loss, manual backpropagation, and bias-corrected Adam with
L2 weight decay on the weight matrices only.

All training math is 64-bit and bit-deterministic given the seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigurationError, DataError, ShapeError, TrainingError

ACTIVATIONS = ("relu", "softmax", "none")

HIDDEN_WIDTHS = (1024, 256, 64)
NUM_CLASSES = 2


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    has_batchnorm: bool = False
    activation: str = "none"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError(
                f"layer dims must be positive, got {self.input_dim}x{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")


def validate_stack(specs: Sequence[LayerSpec]) -> None:
    """Check that consecutive layer dimensions chain."""
    if not specs:
        raise ConfigurationError("empty layer stack")
    for i in range(len(specs) - 1):
        if specs[i].output_dim != specs[i + 1].input_dim:
            raise ConfigurationError(
                f"layer {i} output dim {specs[i].output_dim} does not chain "
                f"into layer {i + 1} input dim {specs[i + 1].input_dim}")


def classifier_stack(feature_dim: int = 4608) -> tuple[LayerSpec, ...]:
    """The fixed 4-layer architecture: 1024/256/64 hidden units with
    batchnorm+ReLU each, and a 2-way softmax head."""
    dims = (feature_dim,) + HIDDEN_WIDTHS + (NUM_CLASSES,)
    specs = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        specs.append(LayerSpec(
            input_dim=dims[i],
            output_dim=dims[i + 1],
            has_batchnorm=not last,
            activation="softmax" if last else "relu",
        ))
    return tuple(specs)


@dataclass
class TrainConfig:
    learning_rate: float = 8e-5
    weight_decay: float = 5e-6
    batch_size: int = 16
    epochs: int = 50
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigurationError("bn_momentum must lie in (0, 1)")


@dataclass
class LayerParams:
    weights: np.ndarray                  # (output_dim, input_dim)
    biases: np.ndarray                   # (output_dim,)
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def copy(self) -> "LayerParams":
        maybe = lambda a: None if a is None else a.copy()
        return LayerParams(self.weights.copy(), self.biases.copy(), maybe(self.gamma),
                           maybe(self.beta), maybe(self.running_mean), maybe(self.running_var))


@dataclass
class ParameterSet:
    """All trainable and normalization-statistic arrays of one classifier.

    bn_momentum/bn_epsilon travel with the parameters so that any holder of a
    ParameterSet (a federation server, an evaluator) normalizes consistently.
    """

    specs: tuple[LayerSpec, ...]
    layers: list[LayerParams]
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.specs, [lp.copy() for lp in self.layers],
                            self.bn_momentum, self.bn_epsilon)

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every array, running statistics included, in a fixed order."""
        for i, lp in enumerate(self.layers):
            yield f"layer{i}.weights", lp.weights
            yield f"layer{i}.biases", lp.biases
            if lp.gamma is not None:
                yield f"layer{i}.gamma", lp.gamma
                yield f"layer{i}.beta", lp.beta
                yield f"layer{i}.running_mean", lp.running_mean
                yield f"layer{i}.running_var", lp.running_var

    def trainable_arrays(self) -> Iterator[tuple[str, np.ndarray, bool]]:
        """(name, array, is_weight_matrix) for every array Adam updates."""
        for i, lp in enumerate(self.layers):
            yield f"layer{i}.weights", lp.weights, True
            yield f"layer{i}.biases", lp.biases, False
            if lp.gamma is not None:
                yield f"layer{i}.gamma", lp.gamma, False
                yield f"layer{i}.beta", lp.beta, False

    def check_finite(self) -> None:
        for name, arr in self.named_arrays():
            if not np.all(np.isfinite(arr)):
                raise TrainingError(f"non-finite values in {name}")


@dataclass
class LayerGrads:
    weights: np.ndarray
    biases: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None


@dataclass
class Gradients:
    layers: list[LayerGrads]

    def trainable_arrays(self) -> Iterator[np.ndarray]:
        for lg in self.layers:
            yield lg.weights
            yield lg.biases
            if lg.gamma is not None:
                yield lg.gamma
                yield lg.beta


def he_init(specs: Sequence[LayerSpec], rng: np.random.Generator,
            bn_momentum: float = 0.1, bn_epsilon: float = 1e-5) -> ParameterSet:
    """He-initialized weights (Normal(0, 2/fan_in)), zero biases, unit gamma,
    zero beta, zero running mean, unit running variance."""
    validate_stack(specs)
    layers = []
    for spec in specs:
        w = rng.normal(0.0, np.sqrt(2.0 / spec.input_dim),
                       size=(spec.output_dim, spec.input_dim))
        lp = LayerParams(weights=w, biases=np.zeros(spec.output_dim))
        if spec.has_batchnorm:
            lp.gamma = np.ones(spec.output_dim)
            lp.beta = np.zeros(spec.output_dim)
            lp.running_mean = np.zeros(spec.output_dim)
            lp.running_var = np.ones(spec.output_dim)
        layers.append(lp)
    return ParameterSet(tuple(specs), layers, bn_momentum, bn_epsilon)


@dataclass
class AdamState:
    """First/second moments per trainable array plus the shared step count."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros_for(cls, params: ParameterSet) -> "AdamState":
        m = [np.zeros_like(arr) for _, arr, _ in params.trainable_arrays()]
        v = [np.zeros_like(arr) for _, arr, _ in params.trainable_arrays()]
        return cls(first_moment=m, second_moment=v)


@dataclass
class _LayerCache:
    x: np.ndarray                       # layer input
    z: np.ndarray                       # pre-normalization linear output
    mean: np.ndarray | None = None      # train-mode batch mean (batchnorm layers)
    inv_std: np.ndarray | None = None
    z_hat: np.ndarray | None = None     # normalized pre-activation, before gamma/beta
    h: np.ndarray | None = None         # post-affine, pre-ReLU
    a: np.ndarray | None = None         # layer output


@dataclass
class ForwardCache:
    mode: str
    params: ParameterSet
    layers: list[_LayerCache]
    probabilities: np.ndarray


class Workspace:
    """Preallocated per-layer buffers so the epoch loop avoids large allocations.

    Holds activation and gradient buffers for up to max_rows samples. One
    workspace serves one training task at a time.
    """

    def __init__(self, specs: Sequence[LayerSpec], max_rows: int):
        self.max_rows = max_rows
        bn = [s.has_batchnorm for s in specs]
        out_dims = [s.output_dim for s in specs]
        in_dims = [s.input_dim for s in specs]
        self.z = [np.empty((max_rows, d)) for d in out_dims]
        self.z_hat = [np.empty((max_rows, d)) if b else None for d, b in zip(out_dims, bn)]
        self.h = [np.empty((max_rows, d)) if b else None for d, b in zip(out_dims, bn)]
        self.a = [np.empty((max_rows, d)) for d in out_dims]
        self.mean = [np.empty(d) if b else None for d, b in zip(out_dims, bn)]
        self.inv_std = [np.empty(d) if b else None for d, b in zip(out_dims, bn)]
        self.d_z = [np.empty((max_rows, d)) for d in out_dims]
        self.d_x = [np.empty((max_rows, d)) for d in in_dims]
        self.g_w = [np.empty((o, i)) for o, i in zip(out_dims, in_dims)]
        self.g_b = [np.empty(d) for d in out_dims]
        self.g_gamma = [np.empty(d) if b else None for d, b in zip(out_dims, bn)]
        self.g_beta = [np.empty(d) if b else None for d, b in zip(out_dims, bn)]


def forward(params: ParameterSet, batch: np.ndarray, mode: str,
            workspace: Workspace | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a batch of feature rows.

    Train mode normalizes with batch statistics and updates the running
    statistics in place; eval mode uses the stored running statistics and
    mutates nothing. Returns row-wise class probabilities plus the activation
    cache consumed by backward().
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.specs[0].input_dim:
        raise ShapeError(f"batch of shape {batch.shape} does not match "
                         f"input dim {params.specs[0].input_dim}")
    rows = batch.shape[0]
    if rows < 1:
        raise ShapeError("empty batch")
    if mode == "train" and rows < 2:
        raise TrainingError("train-mode batch needs at least 2 rows (batch variance undefined)")
    if workspace is not None and rows > workspace.max_rows:
        raise ShapeError(f"batch of {rows} rows exceeds workspace capacity {workspace.max_rows}")

    ws = workspace
    caches: list[_LayerCache] = []
    x = np.ascontiguousarray(batch)
    for i, (spec, lp) in enumerate(zip(params.specs, params.layers)):
        if ws is not None:
            z = ws.z[i][:rows]
            np.matmul(x, lp.weights.T, out=z)
            z += lp.biases
        else:
            z = x @ lp.weights.T + lp.biases
        cache = _LayerCache(x=x, z=z)
        if spec.has_batchnorm:
            if mode == "train":
                if ws is not None:
                    mean, inv_std = ws.mean[i], ws.inv_std[i]
                    z_hat, h, a = ws.z_hat[i][:rows], ws.h[i][:rows], ws.a[i][:rows]
                else:
                    mean = np.empty(spec.output_dim)
                    inv_std = np.empty(spec.output_dim)
                    z_hat, h, a = np.empty_like(z), np.empty_like(z), np.empty_like(z)
                _kernels.bn_relu_forward_train(
                    z, lp.gamma, lp.beta, params.bn_momentum, params.bn_epsilon,
                    lp.running_mean, lp.running_var, mean, inv_std, z_hat, h, a)
                cache.mean = mean
            else:
                inv_std = 1.0 / np.sqrt(lp.running_var + params.bn_epsilon)
                z_hat = (z - lp.running_mean) * inv_std
                h = lp.gamma * z_hat + lp.beta
                a = np.maximum(h, 0.0)
            cache.inv_std, cache.z_hat, cache.h, cache.a = inv_std, z_hat, h, a
        elif spec.activation == "softmax":
            zs = z - z.max(axis=1, keepdims=True)   # log-sum-exp stabilization
            e = np.exp(zs)
            cache.a = e / e.sum(axis=1, keepdims=True)
        elif spec.activation == "relu":
            cache.a = np.maximum(z, 0.0)
        else:
            cache.a = z
        caches.append(cache)
        x = cache.a
    return x, ForwardCache(mode=mode, params=params, layers=caches, probabilities=x)


def cross_entropy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean over rows of -log(p[label]), with p clamped to >= 1e-12."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape[0] != probabilities.shape[0]:
        raise ShapeError("one label per probability row required")
    if labels.size and (labels.min() < 0 or labels.max() >= probabilities.shape[1]):
        raise DataError("labels must be 0 or 1")
    picked = probabilities[np.arange(labels.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, 1e-12))))


def backward(cache: ForwardCache, labels: np.ndarray,
             workspace: Workspace | None = None) -> Gradients:
    """Gradients of the mean cross-entropy w.r.t. every trainable array.

    The softmax/cross-entropy pair is differentiated jointly; running
    statistics receive no gradient.
    """
    if cache.mode != "train":
        raise TrainingError("backward requires a cache produced by a train-mode forward")
    labels = np.asarray(labels)
    probs = cache.probabilities
    rows = probs.shape[0]
    if labels.shape[0] != rows:
        raise ShapeError("one label per cached row required")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise DataError("labels must be 0 or 1")

    ws = workspace
    params = cache.params
    n_layers = len(cache.layers)
    if ws is not None:
        delta = ws.d_z[n_layers - 1][:rows]
        np.copyto(delta, probs)
    else:
        delta = probs.copy()
    delta[np.arange(rows), labels] -= 1.0
    delta /= rows

    lin_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * n_layers  # type: ignore
    bn_grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        lc = cache.layers[i]
        if ws is not None:
            g_w, g_b = ws.g_w[i], ws.g_b[i]
            np.matmul(delta.T, lc.x, out=g_w)
            np.sum(delta, axis=0, out=g_b)
        else:
            g_w = delta.T @ lc.x
            g_b = delta.sum(axis=0)
        lin_grads[i] = (g_w, g_b)
        if i == 0:
            break
        if ws is not None:
            d_x = ws.d_x[i][:rows]
            np.matmul(delta, params.layers[i].weights, out=d_x)
        else:
            d_x = delta @ params.layers[i].weights
        prev = cache.layers[i - 1]
        prev_spec = cache.params.specs[i - 1]
        if prev_spec.has_batchnorm:
            if ws is not None:
                d_z = ws.d_z[i - 1][:rows]
                g_gamma, g_beta = ws.g_gamma[i - 1], ws.g_beta[i - 1]
            else:
                d_z = np.empty_like(d_x)
                g_gamma = np.empty_like(prev.mean)
                g_beta = np.empty_like(prev.mean)
            _kernels.bn_relu_backward(d_x, prev.h, prev.z_hat, prev.inv_std,
                                      params.layers[i - 1].gamma, d_z, g_gamma, g_beta)
            bn_grads[i - 1] = (g_gamma, g_beta)
            delta = d_z
        elif prev_spec.activation == "relu":
            delta = d_x * (prev.z > 0)
        else:
            delta = d_x

    layers = []
    for i in range(n_layers):
        g_w, g_b = lin_grads[i]
        if bn_grads[i] is not None:
            g_gamma, g_beta = bn_grads[i]
            layers.append(LayerGrads(g_w, g_b, g_gamma, g_beta))
        else:
            layers.append(LayerGrads(g_w, g_b))
    return Gradients(layers=layers)


def adam_step(params: ParameterSet, grads: Gradients, state: AdamState,
              cfg: TrainConfig) -> tuple[ParameterSet, AdamState]:
    """Standard bias-corrected Adam, in place. L2 decay couples into the
    gradient of weight matrices only (never biases, gamma, or beta)."""
    state.step_count += 1
    t = state.step_count
    lr_c1 = cfg.learning_rate / (1.0 - cfg.adam_beta1 ** t)
    inv_sqrt_c2 = 1.0 / np.sqrt(1.0 - cfg.adam_beta2 ** t)
    for idx, ((name, p_arr, is_weight), g_arr) in enumerate(
            zip(params.trainable_arrays(), grads.trainable_arrays())):
        if p_arr.shape != g_arr.shape:
            raise ShapeError(f"gradient shape {g_arr.shape} does not match {name} {p_arr.shape}")
        _kernels.adam_update(
            p_arr, g_arr, state.first_moment[idx], state.second_moment[idx],
            lr_c1, inv_sqrt_c2, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon,
            cfg.weight_decay if is_weight else 0.0)
    return params, state


def _batch_slices(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Contiguous batch bounds; a trailing remainder of one row is folded into
    the previous batch so train-mode batch statistics stay defined."""
    bounds = list(range(0, n, batch_size)) + [n]
    slices = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    if len(slices) > 1 and slices[-1][1] - slices[-1][0] < 2:
        slices = slices[:-2] + [(slices[-2][0], slices[-1][1])]
    return slices


def train_epoch(params: ParameterSet, state: AdamState, features: np.ndarray,
                labels: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
                workspace: Workspace | None = None,
                ) -> tuple[ParameterSet, AdamState, float]:
    """One epoch: shuffle, batch, forward/backward/Adam per batch.

    Returns the updated parameters and optimizer state plus the sample-weighted
    mean batch loss. Deterministic given (params, state, data order, rng state).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n < 2:
        raise TrainingError("dataset of fewer than 2 samples cannot form a train-mode batch")
    if features.shape[0] != n:
        raise ShapeError("features/labels length mismatch")
    order = rng.permutation(n)
    shuffled_x = np.ascontiguousarray(features[order])
    shuffled_y = labels[order]
    if workspace is None:
        workspace = Workspace(params.specs, min(n, cfg.batch_size + 1))
    loss_sum = 0.0
    for start, stop in _batch_slices(n, cfg.batch_size):
        bx = shuffled_x[start:stop]
        by = shuffled_y[start:stop]
        probs, cache = forward(params, bx, "train", workspace=workspace)
        loss_sum += cross_entropy(probs, by) * (stop - start)
        grads = backward(cache, by, workspace=workspace)
        adam_step(params, grads, state, cfg)
    return params, state, loss_sum / n


def train_model(specs: Sequence[LayerSpec], features: np.ndarray, labels: np.ndarray,
                cfg: TrainConfig, init_rng: np.random.Generator,
                shuffle_rng: np.random.Generator, epochs: int | None = None,
                persist_optimizer_state: bool = False,
                ) -> tuple[ParameterSet, list[float]]:
    """Train a fresh model for `epochs` epochs (cfg.epochs by default).

    Unless persist_optimizer_state is set, the Adam moments are reset at every
    epoch boundary, which makes one-client federated training coincide exactly
    with this loop.
    """
    params = he_init(specs, init_rng, cfg.bn_momentum, cfg.bn_epsilon)
    state = AdamState.zeros_for(params)
    workspace = Workspace(specs, min(labels.shape[0], cfg.batch_size + 1))
    losses = []
    for _ in range(epochs if epochs is not None else cfg.epochs):
        if not persist_optimizer_state:
            state = AdamState.zeros_for(params)
        params, state, loss = train_epoch(params, state, features, labels, cfg,
                                          shuffle_rng, workspace=workspace)
        losses.append(loss)
    return params, losses


def predict(params: ParameterSet, features: np.ndarray) -> np.ndarray:
    """Eval-mode positive-class probability for each feature row."""
    probs, _ = forward(params, features, "eval")
    return probs[:, 1]
