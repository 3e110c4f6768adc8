"""Dense feed-forward network with manual backpropagation.

Everything is float64 numpy. A batch is a 2-D array with one sample per row;
a single sample is a 1-row array. Hidden layers use the rectifier, the output
layer is linear (logits).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

SeedLike = Union[None, int, Sequence[int], np.random.Generator]

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class UnsupportedArchitectureError(ValueError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: expects width {w.shape[0]}, previous layer gives "
                    f"{self.weights[i - 1].shape[1]}"
                )

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: SeedLike = None) -> "MlpParams":
        """Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    post_activations: list[np.ndarray]
    logits: np.ndarray
    dropout_masks: list[np.ndarray] = field(default_factory=list)


@dataclass
class Gradients:
    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_input: np.ndarray


def forward(
    params: MlpParams,
    batch: np.ndarray,
    dropout_p: Optional[float] = None,
    rng_seed: SeedLike = None,
) -> ForwardTrace:
    """Run the network on ``batch`` and keep every intermediate.

    With ``dropout_p`` set, each hidden unit is dropped with that probability
    and survivors are scaled by ``1 / (1 - dropout_p)``. Masks are drawn
    layer by layer from ``rng_seed``, so a fixed seed gives identical output.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ShapeError(
            f"layer 0: input has width {x.shape[-1]}, expected {params.layer_dims[0]}"
        )
    use_dropout = dropout_p is not None and dropout_p > 0.0
    if dropout_p is not None and not 0.0 <= dropout_p < 1.0:
        raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
    rng = np.random.default_rng(rng_seed) if use_dropout else None

    pre, post, masks = [], [], []
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        pre.append(z)
        if i == last:
            break
        a = np.maximum(z, 0.0)
        if use_dropout:
            keep = rng.random(a.shape) >= dropout_p
            mask = keep / (1.0 - dropout_p)
            masks.append(mask)
            a = a * mask
        post.append(a)
    return ForwardTrace(x, pre, post, pre[-1], masks)


def softmax(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) / T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) / T
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_rows,):
        raise ShapeError(f"got {labels.shape[0] if labels.ndim else 0} labels for {n_rows} rows")
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IndexError(f"label {labels[i]} at row {i} is outside [0, {n_classes})")
    return labels


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log-probability of the true class, log argument clamped at 1e-12."""
    probs = np.atleast_2d(probs)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, LOG_CLAMP))))


def backward_from_logits(params: MlpParams, trace: ForwardTrace, d_logits: np.ndarray) -> Gradients:
    """Backpropagate an arbitrary upstream gradient on the logits."""
    if len(trace.pre_activations) != len(params.weights):
        raise ShapeError(
            f"trace has {len(trace.pre_activations)} layers, params have {len(params.weights)}"
        )
    if d_logits.shape != trace.logits.shape:
        raise ShapeError(f"logit gradient {d_logits.shape} vs logits {trace.logits.shape}")
    n_layers = len(params.weights)
    d_w: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    d_b: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = d_logits
    for i in range(n_layers - 1, -1, -1):
        a_prev = trace.inputs if i == 0 else trace.post_activations[i - 1]
        if a_prev.shape[1] != params.weights[i].shape[0]:
            raise ShapeError(f"layer {i}: trace width {a_prev.shape[1]} does not match params")
        d_w[i] = a_prev.T @ delta
        d_b[i] = delta.sum(axis=0)
        d_a = delta @ params.weights[i].T
        if i == 0:
            return Gradients(d_w, d_b, d_a)
        if trace.dropout_masks:
            d_a = d_a * trace.dropout_masks[i - 1]
        delta = d_a * (trace.pre_activations[i - 1] > 0.0)
    raise AssertionError("unreachable")


def backward(params: MlpParams, trace: ForwardTrace, labels) -> Gradients:
    """Gradients of mean cross-entropy (T=1) w.r.t. every parameter and the input batch."""
    n, k = trace.logits.shape
    labels = _check_labels(labels, n, k)
    d_logits = softmax(trace.logits)
    d_logits[np.arange(n), labels] -= 1.0
    return backward_from_logits(params, trace, d_logits / n)


def penultimate_features(trace: ForwardTrace) -> np.ndarray:
    if not trace.post_activations:
        raise UnsupportedArchitectureError("network has no hidden layer")
    return trace.post_activations[-1]
