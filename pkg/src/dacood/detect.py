"""OoD scorers and the thresholded detector.

Every scorer returns one score per input row, oriented so that higher means
more out-of-distribution. Confidence-style scores are reported as
``1 - max probability``. Baselines evaluated on an abstention model look at
the K known-class columns only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import nn
from .data import Dataset
from .nn import ShapeError
from .train import MlpModel

ORIENTATION = "higher = more OoD"

KIND_PARAMS = {
    "abstention": (),
    "max_softmax": (),
    "entropy": (),
    "temp_softmax": (),
    "odin": ("temperature", "epsilon"),
    "mahalanobis": (),
    "mc_dropout": ("n_passes", "dropout_p"),
    "ensemble": (),
    "outlier_exposure": (),
}
# temp_softmax without a temperature means "fit it on validation data"
OPTIONAL_PARAMS = {"ensemble": ("members",), "temp_softmax": ("temperature",)}


class UnsupportedDetectorError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorSpec:
    kind: str
    temperature: Optional[float] = None
    epsilon: Optional[float] = None
    n_passes: Optional[int] = None
    dropout_p: Optional[float] = None
    members: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KIND_PARAMS:
            raise ValueError(f"unknown detector kind {self.kind!r}; expected one of {list(KIND_PARAMS)}")
        allowed = KIND_PARAMS[self.kind] + OPTIONAL_PARAMS.get(self.kind, ())
        for f in fields(self):
            if f.name == "kind":
                continue
            value = getattr(self, f.name)
            if f.name in KIND_PARAMS[self.kind] and value is None:
                raise ValueError(f"detector {self.kind!r} requires {f.name}")
            if f.name not in allowed and value is not None:
                raise ValueError(f"detector {self.kind!r} does not take {f.name}")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.n_passes is not None and self.n_passes < 1:
            raise ValueError(f"n_passes must be at least 1, got {self.n_passes}")
        if self.members is not None and self.members < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {self.members}")

    @property
    def tag(self) -> str:
        parts = [self.kind]
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name != "kind" and value is not None:
                parts.append(f"{f.name}={value:g}")
        return ",".join(parts) if len(parts) > 1 else self.kind

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorSpec":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown detector fields: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class ScoreVector:
    scores: np.ndarray
    detector: DetectorSpec

    orientation = ORIENTATION

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class MahalanobisStats:
    means: np.ndarray  # (K, width)
    precision: np.ndarray  # inverse of covariance + ridge * I
    covariance: np.ndarray
    ridge: float


def _known_probs(model: MlpModel, logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    return nn.softmax(logits[:, : model.num_known_classes], T)


def _vector(scores: np.ndarray, kind: str, **params) -> ScoreVector:
    return ScoreVector(np.asarray(scores, dtype=np.float64), DetectorSpec(kind, **params))


def score_abstention(model: MlpModel, X: np.ndarray) -> ScoreVector:
    if not model.has_abstention:
        raise UnsupportedDetectorError("model has no abstention class")
    p = nn.softmax(model.logits(X), model.temperature)
    return _vector(p[:, model.num_known_classes], "abstention")


def score_max_softmax(model: MlpModel, X: np.ndarray) -> ScoreVector:
    p = _known_probs(model, model.logits(X))
    return _vector(1.0 - p.max(axis=1), "max_softmax")


def entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def score_entropy(model: MlpModel, X: np.ndarray) -> ScoreVector:
    return _vector(entropy(_known_probs(model, model.logits(X))), "entropy")


def score_temp_softmax(model: MlpModel, X: np.ndarray, T: float) -> ScoreVector:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    p = _known_probs(model, model.logits(X), T)
    return _vector(1.0 - p.max(axis=1), "temp_softmax", temperature=T)


def odin_perturb(
    model: MlpModel,
    X: np.ndarray,
    T: float,
    epsilon: float,
    bounds: Optional[tuple[float, float]] = None,
) -> np.ndarray:
    """Step every input against the sign of the gradient of the cross-entropy
    of its own predicted class at temperature T."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if epsilon == 0:
        return X
    K = model.num_known_classes
    trace = nn.forward(model.params, X)
    p = _known_probs(model, trace.logits, T)
    y_hat = p.argmax(axis=1)
    d_logits = np.zeros_like(trace.logits)
    d_logits[:, :K] = p
    d_logits[np.arange(len(X)), y_hat] -= 1.0
    d_logits /= T
    grad_x = nn.backward_from_logits(model.params, trace, d_logits).d_input
    X_new = X - epsilon * np.sign(grad_x)
    if bounds is not None:
        X_new = np.clip(X_new, bounds[0], bounds[1])
    return X_new


def score_odin(
    model: MlpModel,
    X: np.ndarray,
    T: float,
    epsilon: float,
    bounds: Optional[tuple[float, float]] = None,
) -> ScoreVector:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    X_new = odin_perturb(model, X, T, epsilon, bounds)
    p = _known_probs(model, model.logits(X_new), T)
    return _vector(1.0 - p.max(axis=1), "odin", temperature=T, epsilon=epsilon)


def features(model: MlpModel, X: np.ndarray) -> np.ndarray:
    return nn.penultimate_features(nn.forward(model.params, X))


def fit_mahalanobis(model: MlpModel, d_in: Dataset, ridge: float = 1e-4) -> MahalanobisStats:
    """Class means of penultimate features and a shared, pooled covariance."""
    if ridge < 1e-6:
        raise ValueError(f"ridge must be at least 1e-6, got {ridge}")
    K = model.num_known_classes
    if (d_in.y >= K).any():
        raise ValueError("Mahalanobis fit expects in-distribution labels only")
    phi = features(model, d_in.X)
    means = np.empty((K, phi.shape[1]))
    centered = np.empty_like(phi)
    for c in range(K):
        rows = d_in.y == c
        if rows.sum() < 2:
            raise ValueError(f"class {c} has {int(rows.sum())} samples; need at least 2")
        means[c] = phi[rows].mean(axis=0)
        centered[rows] = phi[rows] - means[c]
    cov = centered.T @ centered / phi.shape[0]
    precision = np.linalg.inv(cov + ridge * np.eye(cov.shape[0]))
    precision = 0.5 * (precision + precision.T)
    return MahalanobisStats(means, precision, cov, ridge)


def mahalanobis_distances(stats: MahalanobisStats, phi: np.ndarray) -> np.ndarray:
    """Squared distance of every row of ``phi`` to every class mean, shape (n, K)."""
    if phi.shape[1] != stats.means.shape[1]:
        raise ShapeError(f"feature width {phi.shape[1]} vs fitted width {stats.means.shape[1]}")
    diff = phi[:, None, :] - stats.means[None, :, :]
    return np.einsum("nkd,de,nke->nk", diff, stats.precision, diff)


def score_mahalanobis(model: MlpModel, stats: MahalanobisStats, X: np.ndarray) -> ScoreVector:
    d = mahalanobis_distances(stats, features(model, X))
    return _vector(np.maximum(d.min(axis=1), 0.0), "mahalanobis")


def mc_dropout_probs(
    model: MlpModel, X: np.ndarray, dropout_p: float, n_passes: int, seed: int
) -> np.ndarray:
    """Known-class softmax averaged over stochastic passes. Sample i draws its
    masks from a generator seeded with (seed, i) so any batching agrees."""
    if n_passes < 1:
        raise ValueError(f"n_passes must be at least 1, got {n_passes}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if dropout_p > 0 and not model.dropout_p:
        warnings.warn("MC dropout on a model trained without dropout", RuntimeWarning, stacklevel=2)
    out = np.empty((X.shape[0], model.num_known_classes))
    for i, x in enumerate(X):
        reps = np.broadcast_to(x, (n_passes, x.shape[0]))
        logits = nn.forward(model.params, reps, dropout_p, np.random.default_rng([seed, i])).logits
        out[i] = _known_probs(model, logits).mean(axis=0)
    return out


def score_mc_dropout(
    model: MlpModel, X: np.ndarray, dropout_p: float, n_passes: int, seed: int
) -> ScoreVector:
    p = mc_dropout_probs(model, X, dropout_p, n_passes, seed)
    return _vector(1.0 - p.max(axis=1), "mc_dropout", n_passes=n_passes, dropout_p=dropout_p)


def ensemble_probs(models: Sequence[MlpModel], X: np.ndarray) -> np.ndarray:
    if len(models) < 2:
        raise ValueError(f"an ensemble needs at least 2 members, got {len(models)}")
    first = models[0]
    for m in models[1:]:
        if (
            m.num_known_classes != first.num_known_classes
            or m.layer_dims[0] != first.layer_dims[0]
        ):
            raise ShapeError("ensemble members disagree on input width or class count")
    return np.mean([_known_probs(m, m.logits(X)) for m in models], axis=0)


def score_ensemble(models: Sequence[MlpModel], X: np.ndarray) -> ScoreVector:
    p = ensemble_probs(models, X)
    return _vector(1.0 - p.max(axis=1), "ensemble", members=len(models))


def detect(scores, delta: float) -> np.ndarray:
    """1 (OoD) where the score is at least ``delta``, else 0."""
    s = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    return (s >= delta).astype(np.int64)
