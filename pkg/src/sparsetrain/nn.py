"""Sparse MLP assembly, activations, dropout, loss and backpropagation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError, StaleError
from .sparse import GradientUpdate, backward_support_gradient, spmm_forward

ACTIVATIONS = ("relu", "all_relu")
INIT_SCHEMES = ("normal", "xavier", "he_uniform")
LOSSES = ("softmax_cross_entropy", "mse_sigmoid")


@dataclass
class NetworkConfig:
    layer_sizes: list
    epsilon: float = 20.0
    activation: str = "all_relu"
    alpha: float = 0.5
    dropout_rate: float = 0.3
    init_scheme: str = "normal"
    loss: str = "softmax_cross_entropy"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        self.validate()

    def validate(self):
        if len(self.layer_sizes) < 3:
            raise ValueError("need at least input, one hidden and output layer (L >= 3)")
        if min(self.layer_sizes) < 1:
            raise ValueError("layer sizes must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.activation == "all_relu" and not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)


# std of the "normal" scheme; 0.01 leaves deep sparse nets stuck at chance
NORMAL_STD = 0.1


def init_values(scheme: str, n: int, fan_in: int, fan_out: int, rng, dtype=np.float32) -> np.ndarray:
    """Draw ``n`` nonzero initial weights for a ``fan_in x fan_out`` layer."""

    def draw(k):
        if scheme == "normal":
            return rng.standard_normal(k) * NORMAL_STD
        if scheme == "xavier":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        elif scheme == "he_uniform":
            limit = np.sqrt(6.0 / fan_in)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        return rng.uniform(-limit, limit, k)

    vals = draw(n).astype(dtype)
    zero = np.flatnonzero(vals == 0)
    while zero.size:
        vals[zero] = draw(zero.size).astype(dtype)
        zero = zero[vals[zero] == 0]
    return vals


# -- activations -------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x):
    return (np.asarray(x) > 0).astype(np.result_type(x, np.float32))


def _check_hidden(layer_index, total_layers):
    if not 2 <= layer_index <= total_layers - 1:
        raise ValueError(
            f"All-ReLU applies to hidden layers 2..{total_layers - 1}, got layer {layer_index}"
        )


def all_relu(x, layer_index: int, total_layers: int, alpha: float):
    """Alternated left ReLU; the negative slope's sign follows layer parity.

    Layers are 1-indexed with the input as layer 1.
    """
    _check_hidden(layer_index, total_layers)
    slope = -alpha if layer_index % 2 == 0 else alpha
    x = np.asarray(x)
    return np.where(x > 0, x, slope * x)


def all_relu_grad(x, layer_index: int, total_layers: int, alpha: float):
    _check_hidden(layer_index, total_layers)
    slope = -alpha if layer_index % 2 == 0 else alpha
    x = np.asarray(x)
    return np.where(x > 0, 1.0, slope).astype(np.result_type(x, np.float32))


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- network -----------------------------------------------------------------


@dataclass(eq=False)
class SparseNetwork:
    layers: list
    biases: list
    config: NetworkConfig
    topology_version: int = 0
    timestamp: int = 0

    @classmethod
    def create(cls, config: NetworkConfig, rng=None) -> "SparseNetwork":
        """Erdos-Renyi sparse layers with zero biases."""
        from .topology import er_init

        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
        dtype = np.dtype(config.dtype)
        sizes = config.layer_sizes
        layers = [
            er_init(n_in, n_out, config.epsilon, config.init_scheme, rng, dtype=dtype)
            for n_in, n_out in zip(sizes[:-1], sizes[1:])
        ]
        biases = [np.zeros(n, dtype=dtype) for n in sizes[1:]]
        return cls(layers, biases, config)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    @property
    def nnz(self) -> list:
        return [w.nnz for w in self.layers]

    @property
    def n_params(self) -> int:
        return sum(self.nnz)

    def snapshot(self) -> "SparseNetwork":
        """Shallow copy sharing the (never mutated in place) arrays."""
        return SparseNetwork(
            [w.with_values(w.values) for w in self.layers],
            list(self.biases),
            self.config,
            self.topology_version,
            self.timestamp,
        )

    def copy(self) -> "SparseNetwork":
        return SparseNetwork(
            [w.copy() for w in self.layers],
            [b.copy() for b in self.biases],
            self.config,
            self.topology_version,
            self.timestamp,
        )

    def set_layers(self, layers) -> None:
        """Install new layer structures and bump the topology version."""
        for i, (old, new) in enumerate(zip(self.layers, layers)):
            if old.shape != new.shape:
                raise ShapeError(f"layer {i}: shape {new.shape} != {old.shape}")
        self.layers = list(layers)
        self.topology_version += 1

    def activation(self, m: int, z):
        """Hidden activation applied to the output of weight matrix ``m``."""
        cfg = self.config
        if cfg.activation == "relu":
            return relu(z)
        return all_relu(z, m + 2, cfg.n_layers, cfg.alpha)

    def activation_grad(self, m: int, z):
        cfg = self.config
        if cfg.activation == "relu":
            return relu_grad(z)
        return all_relu_grad(z, m + 2, cfg.n_layers, cfg.alpha)


@dataclass
class ForwardTrace:
    inputs: list  # input to each weight matrix (post-dropout)
    pre: list  # pre-activation output of each weight matrix
    masks: list  # scaled dropout mask per hidden layer, or None
    output: np.ndarray  # probabilities (softmax) or sigmoid outputs
    topology_version: int
    timestamp: int
    mode: str = "train"
    extras: dict = field(default_factory=dict)


def forward(network: SparseNetwork, batch, mode: str = "eval", rng=None) -> ForwardTrace:
    cfg = network.config
    batch = np.ascontiguousarray(batch, dtype=network.dtype)
    if batch.ndim != 2 or batch.shape[1] != cfg.layer_sizes[0]:
        raise ShapeError(f"input has shape {batch.shape}, expected (B, {cfg.layer_sizes[0]})")
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    drop = cfg.dropout_rate if mode == "train" else 0.0
    if drop > 0 and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    n_mats = len(network.layers)
    inputs, pre, masks = [], [], []
    a = batch
    for m, (w, b) in enumerate(zip(network.layers, network.biases)):
        inputs.append(a)
        z = spmm_forward(a, w, b, layer=m)
        pre.append(z)
        if m == n_mats - 1:
            break
        h = network.activation(m, z)
        if drop > 0:
            keep = rng.random(h.shape) >= drop
            mask = keep.astype(h.dtype) * h.dtype.type(1.0 / (1.0 - drop))
            h = h * mask
        else:
            mask = None
        masks.append(mask)
        a = h
    logits = pre[-1]
    out = softmax(logits) if cfg.loss == "softmax_cross_entropy" else sigmoid(logits)
    return ForwardTrace(inputs, pre, masks, out, network.topology_version, network.timestamp, mode)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = int(np.flatnonzero((labels < 0) | (labels >= n_classes))[0])
        raise DataError(f"label {labels[bad]} at row {bad} outside [0, {n_classes})", row=bad)
    return labels.astype(np.int64)


def loss_from_output(output, labels, loss="softmax_cross_entropy"):
    """Return ``(mean loss, per-sample output-layer delta)`` from probabilities."""
    n, c = output.shape
    labels = _check_labels(labels, c)
    onehot = np.zeros_like(output)
    onehot[np.arange(n), labels] = 1
    if loss == "softmax_cross_entropy":
        p = output[np.arange(n), labels].astype(np.float64)
        value = float(-np.mean(np.log(np.maximum(p, np.finfo(output.dtype).tiny))))
        delta = output - onehot
    elif loss == "mse_sigmoid":
        diff = output - onehot
        value = float(0.5 * np.mean(np.sum(diff.astype(np.float64) ** 2, axis=1)))
        delta = diff * output * (1 - output)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return value, delta


def loss_and_output_grad(logits, labels, loss="softmax_cross_entropy"):
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    out = softmax(logits) if loss == "softmax_cross_entropy" else sigmoid(logits)
    value, delta = loss_from_output(out, labels, loss)
    return value, delta / logits.shape[0]


def backward(network: SparseNetwork, trace: ForwardTrace, labels, weight_decay: float = 0.0) -> GradientUpdate:
    if trace.topology_version != network.topology_version:
        raise StaleError(
            f"trace from topology {trace.topology_version}, network is at {network.topology_version}"
        )
    loss_value, delta = loss_from_output(trace.output, labels, network.config.loss)
    batch = trace.output.shape[0]
    n_mats = len(network.layers)
    grads = [None] * n_mats
    bias_grads = [None] * n_mats
    for m in range(n_mats - 1, -1, -1):
        w = network.layers[m]
        gvals, gbias, gin = backward_support_gradient(trace.inputs[m], delta, w, need_input=m > 0, layer=m)
        if weight_decay:
            gvals = gvals + w.dtype.type(weight_decay) * w.values
        grads[m] = gvals
        bias_grads[m] = gbias
        if m > 0:
            mask = trace.masks[m - 1]
            if mask is not None:
                gin = gin * mask
            delta = gin * network.activation_grad(m - 1, trace.pre[m - 1])
    correct = int(np.sum(np.argmax(trace.output, axis=1) == np.asarray(labels)))
    return GradientUpdate(
        grads,
        bias_grads,
        timestamp=trace.timestamp,
        sample_count=batch,
        topology_version=trace.topology_version,
        supports=list(network.layers),
        loss_sum=loss_value * batch,
        correct=correct,
    )


def gradient_flow(update: GradientUpdate) -> float:
    """Squared L2 norm over all weight and bias gradients."""
    total = 0.0
    for g in list(update.layer_grads) + list(update.bias_grads):
        g = np.asarray(g, dtype=np.float64)
        total += float(np.dot(g, g))
    return total


def network_loss(network: SparseNetwork, batch, labels, weight_decay=0.0, mode="eval", rng=None) -> float:
    """Objective whose gradient :func:`backward` returns (data loss plus L2 term)."""
    trace = forward(network, batch, mode=mode, rng=rng)
    value, _ = loss_from_output(trace.output, labels, network.config.loss)
    if weight_decay:
        value += 0.5 * weight_decay * sum(float(np.dot(w.values, w.values)) for w in network.layers)
    return value


def evaluate(network: SparseNetwork, features, labels, chunk: int = 2048):
    """Eval-mode ``(mean loss, accuracy)``."""
    n = features.shape[0]
    if n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, chunk):
        xb = features[start : start + chunk]
        yb = labels[start : start + chunk]
        trace = forward(network, xb, mode="eval")
        value, _ = loss_from_output(trace.output, yb, network.config.loss)
        loss_sum += value * xb.shape[0]
        correct += int(np.sum(np.argmax(trace.output, axis=1) == yb))
    return loss_sum / n, correct / n
