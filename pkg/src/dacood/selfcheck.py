"""Brute-force oracles used by ``dacood self-test``.

The metric oracles count pairs and sweep thresholds directly; the gradient
check compares backprop against central finite differences.
"""

from __future__ import annotations

import numpy as np

from . import metrics, nn


def brute_auroc(pos, neg) -> float:
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def brute_fpr_at_tpr(pos, neg, target: float = 0.95) -> float:
    best = None
    for t in sorted(set(pos) | set(neg)):
        if sum(p >= t for p in pos) / len(pos) >= target:
            best = t
    return sum(q >= best for q in neg) / len(neg)


def random_score_instances(n_instances: int = 200, max_size: int = 50, seed: int = 0):
    """Score lists drawn from a coarse grid so ties are frequent, some
    instances also duplicate values across the two lists."""
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        n_pos = int(rng.integers(1, max_size + 1))
        n_neg = int(rng.integers(1, max_size + 1))
        shift = rng.uniform(-1, 1)
        pos = np.round(rng.normal(shift, 1.0, n_pos), 1)
        neg = np.round(rng.normal(0.0, 1.0, n_neg), 1)
        if rng.random() < 0.5:
            k = int(rng.integers(1, min(n_pos, n_neg) + 1))
            pos[:k] = neg[:k]
        yield pos.tolist(), neg.tolist()


def check_metrics(n_instances: int = 200) -> tuple[bool, str]:
    worst = 0.0
    for i, (pos, neg) in enumerate(random_score_instances(n_instances)):
        worst = max(worst, abs(metrics.auroc(pos, neg) - brute_auroc(pos, neg)))
        if metrics.fpr_at_tpr(pos, neg) != brute_fpr_at_tpr(pos, neg):
            return False, f"fpr_at_tpr disagrees with the threshold sweep on instance {i}"
    if worst > 1e-12:
        return False, f"auroc differs from pair counting by {worst:.3g}"
    return True, f"{n_instances} instances, max |auroc diff| = {worst:.3g}, fpr@95 exact"


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_gradients(params: nn.MlpParams, X: np.ndarray, y, h: float = 1e-5):
    """Central differences of mean cross-entropy (logits at T=1)."""

    def loss(p, x):
        return nn.cross_entropy(nn.softmax(nn.forward(p, x).logits), y)

    d_w, d_b = [], []
    for w_list, out in ((params.weights, d_w), (params.biases, d_b)):
        for arr in w_list:
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss(params, X)
                arr[idx] = orig - h
                down = loss(params, X)
                arr[idx] = orig
                g[idx] = (up - down) / (2 * h)
            out.append(g)
    d_x = np.zeros_like(X)
    for idx in np.ndindex(*X.shape):
        Xp = X.copy()
        Xp[idx] += h
        Xm = X.copy()
        Xm[idx] -= h
        d_x[idx] = (loss(params, Xp) - loss(params, Xm)) / (2 * h)
    return d_w, d_b, d_x


def check_gradients(dims=(2, 16, 8, 3), batch: int = 4, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    params = nn.MlpParams.init(list(dims), rng)
    for b in params.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    X = rng.normal(size=(batch, dims[0]))
    y = rng.integers(0, dims[-1], batch)
    grads = nn.backward(params, nn.forward(params, X), y)
    fd_w, fd_b, fd_x = finite_difference_gradients(params, X, y)
    errs = [relative_error(a, b).max() for a, b in zip(grads.d_weights, fd_w)]
    errs += [relative_error(a, b).max() for a, b in zip(grads.d_biases, fd_b)]
    errs.append(relative_error(grads.d_input, fd_x).max())
    worst = float(max(errs))
    net = "-".join(map(str, dims))
    return worst < 1e-6, f"{net} net, batch {batch}: max relative error {worst:.3g}"


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in (("metric oracles", check_metrics), ("gradient check", check_gradients)):
        ok, msg = fn()
        results.append((name, ok, msg))
    return results
