"""Training: abstention (DAC) classifier, plain classifier, outlier exposure,
deep ensembles and post-hoc temperature fitting.

All runs use minibatch SGD with classical momentum and a constant learning
rate, and are deterministic functions of (data, config, seed).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .data import Dataset, concat, relabel_as_abstain
from .nn import MlpParams

MODEL_MAGIC = b"DACMLP\x00\x00"
MODEL_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden_dims: tuple[int, ...] = (64, 64)
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    weight_decay: float = 0.0
    dropout_p: Optional[float] = None
    seed: int = 0
    oe_lambda: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.weight_decay < 0 or self.oe_lambda < 0:
            raise ValueError("weight_decay and oe_lambda must be non-negative")
        if self.dropout_p is not None and not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown train config fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class MlpModel:
    params: MlpParams
    num_known_classes: int
    has_abstention: bool
    temperature: float = 1.0
    dropout_p: Optional[float] = None

    def __post_init__(self):
        expected = self.num_known_classes + (1 if self.has_abstention else 0)
        if self.params.layer_dims[-1] != expected:
            raise nn.ShapeError(
                f"output width {self.params.layer_dims[-1]} but K={self.num_known_classes}, "
                f"has_abstention={self.has_abstention}"
            )
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def layer_dims(self) -> list[int]:
        return self.params.layer_dims

    def logits(self, X: np.ndarray) -> np.ndarray:
        return nn.forward(self.params, X).logits

    def known_logits(self, X: np.ndarray) -> np.ndarray:
        return self.logits(X)[:, : self.num_known_classes]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Known-class prediction; the abstention column is ignored."""
        return np.argmax(self.known_logits(X), axis=1)

    def accuracy(self, d: Dataset) -> float:
        return float(np.mean(self.predict(d.X) == d.y))


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


# A batch objective returns (mean loss, gradient of the loss w.r.t. the logits).
LogitObjective = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def cross_entropy_objective(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    n = logits.shape[0]
    logp = nn.log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), y]))
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def oe_objective(K: int, lam: float) -> LogitObjective:
    """Cross-entropy on in-distribution rows plus ``lam`` times the cross-entropy
    between the uniform distribution over K classes and the softmax on outlier
    rows. Outlier rows carry label K; each term is a mean over its own rows."""

    def objective(logits, y):
        n = logits.shape[0]
        is_out = y == K
        n_out = int(is_out.sum())
        n_in = n - n_out
        logp = nn.log_softmax(logits)
        p = np.exp(logp)
        g = np.zeros_like(logits)
        loss = 0.0
        if n_in:
            rows = np.flatnonzero(~is_out)
            loss += -float(np.mean(logp[rows, y[rows]]))
            g[rows] = p[rows]
            g[rows, y[rows]] -= 1.0
            g[rows] /= n_in
        if n_out and lam > 0:
            loss += lam * -float(np.mean(logp[is_out].mean(axis=1)))
            g[is_out] = lam * (p[is_out] - 1.0 / K) / n_out
        return loss, g

    return objective


def loss_and_gradients(
    params: MlpParams,
    X: np.ndarray,
    y: np.ndarray,
    objective: LogitObjective = cross_entropy_objective,
    dropout_p: Optional[float] = None,
    rng_seed=None,
) -> tuple[float, nn.Gradients]:
    trace = nn.forward(params, X, dropout_p, rng_seed)
    loss, d_logits = objective(trace.logits, np.asarray(y, dtype=np.int64))
    return loss, nn.backward_from_logits(params, trace, d_logits)


def _sgd(
    train: Dataset,
    out_width: int,
    cfg: TrainConfig,
    objective: LogitObjective,
    val: Optional[Dataset],
    accuracy: Callable[[MlpParams, Dataset], float],
) -> tuple[MlpParams, TrainLog]:
    dims = [train.dim, *cfg.hidden_dims, out_width]
    params = MlpParams.init(dims, rng=cfg.seed)
    velocity_w = [np.zeros_like(w) for w in params.weights]
    velocity_b = [np.zeros_like(b) for b in params.biases]
    log = TrainLog()
    n = train.n
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng(cfg.seed + epoch).permutation(n)
        dropout_rng = np.random.default_rng([cfg.seed, epoch, 1])
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads = loss_and_gradients(
                params, train.X[idx], train.y[idx], objective, cfg.dropout_p, dropout_rng
            )
            if not math.isfinite(loss):
                raise TrainingError(f"loss became {loss} in epoch {epoch}")
            total += loss * len(idx)
            for i in range(len(params.weights)):
                g_w = grads.d_weights[i]
                if cfg.weight_decay:
                    g_w = g_w + cfg.weight_decay * params.weights[i]
                velocity_w[i] = cfg.momentum * velocity_w[i] - cfg.learning_rate * g_w
                velocity_b[i] = cfg.momentum * velocity_b[i] - cfg.learning_rate * grads.d_biases[i]
                params.weights[i] += velocity_w[i]
                params.biases[i] += velocity_b[i]
        epoch_loss = total / n
        if not math.isfinite(epoch_loss) or not all(np.isfinite(w).all() for w in params.weights):
            raise TrainingError(f"training diverged in epoch {epoch}")
        log.losses.append(epoch_loss)
        log.val_accuracy.append(accuracy(params, val if val is not None else train))
    return params, log


def _known_accuracy(K: int):
    def acc(params: MlpParams, d: Dataset) -> float:
        known = d.y < K
        if not known.any():
            return float("nan")
        logits = nn.forward(params, d.X[known]).logits[:, :K]
        return float(np.mean(np.argmax(logits, axis=1) == d.y[known]))

    return acc


def _check_in_labels(d_in: Dataset) -> int:
    K = d_in.num_known_classes
    if K < 1:
        raise ValueError("in-distribution data needs at least one known class")
    if d_in.n == 0:
        raise ValueError("in-distribution data is empty")
    if d_in.y.max() >= K:
        raise ValueError(f"in-distribution labels must lie in [0, {K - 1}]")
    return K


def dac_training_set(d_in: Dataset, d_out_tilde: Dataset) -> Dataset:
    """In-distribution data followed by the outliers relabeled to the abstention class."""
    K = _check_in_labels(d_in)
    if d_out_tilde.n == 0:
        raise ValueError("outlier-exposure set is empty")
    return concat(d_in, relabel_as_abstain(d_out_tilde, K))


def train_dac(
    d_in: Dataset, d_out_tilde: Dataset, cfg: TrainConfig, val: Optional[Dataset] = None
) -> tuple[MlpModel, TrainLog]:
    """Train a K+1-way classifier; outliers are just samples of class K."""
    train = dac_training_set(d_in, d_out_tilde)
    K = d_in.num_known_classes
    params, log = _sgd(train, K + 1, cfg, cross_entropy_objective, val, _known_accuracy(K))
    return MlpModel(params, K, True, 1.0, cfg.dropout_p), log


def train_plain(
    d_in: Dataset, cfg: TrainConfig, val: Optional[Dataset] = None
) -> tuple[MlpModel, TrainLog]:
    K = _check_in_labels(d_in)
    params, log = _sgd(d_in, K, cfg, cross_entropy_objective, val, _known_accuracy(K))
    return MlpModel(params, K, False, 1.0, cfg.dropout_p), log


def train_oe(
    d_in: Dataset, d_out_tilde: Dataset, cfg: TrainConfig, val: Optional[Dataset] = None
) -> tuple[MlpModel, TrainLog]:
    """K-way classifier whose outlier predictions are pulled toward uniform."""
    if not cfg.oe_lambda > 0:
        raise ValueError("outlier exposure needs oe_lambda > 0")
    train = dac_training_set(d_in, d_out_tilde)
    K = d_in.num_known_classes
    params, log = _sgd(train, K, cfg, oe_objective(K, cfg.oe_lambda), val, _known_accuracy(K))
    return MlpModel(params, K, False, 1.0, cfg.dropout_p), log


def train_ensemble(train_fn, M: int, base_seed: int, *args, cfg: TrainConfig, **kwargs) -> list[MlpModel]:
    """Train ``M`` members with seeds ``base_seed .. base_seed + M - 1``.

    ``train_fn`` is one of the ``train_*`` functions; ``args`` are its data
    arguments.
    """
    if M < 2:
        raise ValueError(f"an ensemble needs at least 2 members, got {M}")
    return [train_fn(*args, replace(cfg, seed=base_seed + m), **kwargs)[0] for m in range(M)]


def mean_cross_entropy_at(logits: np.ndarray, labels: np.ndarray, T: float) -> float:
    logp = nn.log_softmax(logits, T)
    return -float(np.mean(logp[np.arange(len(labels)), labels]))


def golden_section_min(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-7) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature_logits(
    logits: np.ndarray, labels, lo: float = 0.05, hi: float = 20.0
) -> float:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] == 0:
        raise ValueError("temperature fitting needs a non-empty validation set")
    # cross-entropy is convex in 1/T, hence unimodal in T on the bracket
    return golden_section_min(lambda t: mean_cross_entropy_at(logits, labels, t), lo, hi)


def fit_temperature(model: MlpModel, val: Dataset) -> MlpModel:
    """Return a copy of ``model`` whose temperature minimizes validation cross-entropy."""
    if val.n == 0:
        raise ValueError("temperature fitting needs a non-empty validation set")
    logits = model.logits(val.X)
    if val.y.max() >= logits.shape[1]:
        raise ValueError(f"validation labels exceed the model's {logits.shape[1]} outputs")
    return replace(model, temperature=fit_temperature_logits(logits, val.y))


def save_model(model: MlpModel, path) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header, then
    every weight matrix and bias vector as little-endian float64, row-major."""
    header = {
        "layer_dims": model.layer_dims,
        "num_known_classes": model.num_known_classes,
        "has_abstention": model.has_abstention,
        "temperature": float(model.temperature).hex(),
        "dropout_p": None if model.dropout_p is None else float(model.dropout_p).hex(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_FORMAT_VERSION, len(head)), head]
    for w, b in zip(model.params.weights, model.params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    off = len(MODEL_MAGIC)
    version, head_len = struct.unpack("<II", raw[off : off + 8])
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    off += 8
    header = json.loads(raw[off : off + head_len])
    off += head_len
    dims = header["layer_dims"]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, "<f8", fan_in * fan_out, off).reshape(fan_in, fan_out)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(raw, "<f8", fan_out, off)
        off += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    dp = header["dropout_p"]
    return MlpModel(
        MlpParams(weights, biases),
        header["num_known_classes"],
        header["has_abstention"],
        float.fromhex(header["temperature"]),
        None if dp is None else float.fromhex(dp),
    )


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden_dims"] = list(cfg.hidden_dims)
    return d
