"""Dense-network numerical core.

Activations are laid out batch-by-feature (one sample per row) and every
weight matrix is ``out_dim x in_dim``, so a layer computes
``psi(x @ W.T + b)``. All arithmetic is float64.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from fedsl.errors import DimensionError, InputError


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


# Stream tags mixed into the seed so each consumer gets an independent stream.
STREAM_INIT = 0
STREAM_DATA = 1
STREAM_SHUFFLE = 2
STREAM_DROPOUT = 3
STREAM_QUANT = 4
STREAM_CHANNEL = 5
STREAM_PARTITION = 6


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``(seed, *keys)``.

    SeedSequence hashing plus Philox gives the same stream on every platform,
    and distinct key tuples give statistically independent streams.
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise InputError("seed and stream keys must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2:
            raise DimensionError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class LayerGrads:
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_layers(dims, rng: np.random.Generator, activations=None) -> list[DenseLayer]:
    """Build ``len(dims) - 1`` layers; hidden layers ReLU, the last Identity by default."""
    dims = list(dims)
    if len(dims) < 2:
        raise InputError("need at least an input and an output width")
    n = len(dims) - 1
    if activations is None:
        activations = [Activation.RELU] * (n - 1) + [Activation.IDENTITY]
    if len(activations) != n:
        raise InputError(f"expected {n} activations, got {len(activations)}")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        w = glorot_uniform(rng, fan_in, fan_out)
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return layers


def _check_input(layer: DenseLayer, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"input shape {x.shape} incompatible with layer expecting {layer.in_dim} features"
        )


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def dense_forward_cached(layer: DenseLayer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(output, pre_activation)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(layer, x)
    z = x @ layer.weights.T + layer.bias
    return _activate(z, layer.activation), z


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return dense_forward_cached(layer, x)[0]


def dense_backward(
    layer: DenseLayer, x: np.ndarray, pre_activation: np.ndarray, upstream: np.ndarray
) -> LayerGrads:
    """Gradients of a scalar loss given ``upstream = dLoss/dOutput``.

    The ReLU subgradient at exactly zero is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(layer, x)
    expected = (x.shape[0], layer.out_dim)
    if pre_activation.shape != expected or upstream.shape != expected:
        raise DimensionError(
            f"pre_activation {pre_activation.shape} / upstream {upstream.shape}, expected {expected}"
        )
    if layer.activation is Activation.RELU:
        dz = np.where(pre_activation > 0.0, upstream, 0.0)
    else:
        dz = upstream
    return LayerGrads(d_weights=dz.T @ x, d_bias=dz.sum(axis=0), d_input=dz @ layer.weights)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise InputError("empty batch")
    if np.any(labels < 0) or np.any(labels >= c):
        raise InputError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    d_logits = np.exp(log_probs)
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    return float(loss), d_logits


def forward_stack(layers, x):
    """Run ``layers`` in order; return the output and per-layer ``(input, pre_activation)``."""
    caches = []
    for layer in layers:
        out, z = dense_forward_cached(layer, x)
        caches.append((x, z))
        x = out
    return x, caches


def backward_stack(layers, caches, upstream):
    """Backpropagate through ``layers``; return per-layer grads and dLoss/dInput."""
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        x, z = caches[i]
        g = dense_backward(layers[i], x, z, upstream)
        grads[i] = g
        upstream = g.d_input
    return grads, upstream


def predict(layers, x) -> np.ndarray:
    out, _ = forward_stack(layers, x)
    return out.argmax(axis=1)
