import json
import os
from pathlib import Path

import numpy as np
import pytest

from dacood.data import Dataset, SyntheticSpec, gen_synthetic
from dacood.nn import MlpParams
from dacood.train import MlpModel

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def random_model(dims, K, has_abstention, seed=0, dropout_p=None):
    rng = np.random.default_rng(seed)
    params = MlpParams.init(dims, rng)
    for b in params.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    return MlpModel(params, K, has_abstention, dropout_p=dropout_p)


def linear_model(W, b=None, K=None, has_abstention=False):
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    K = W.shape[1] - (1 if has_abstention else 0) if K is None else K
    return MlpModel(MlpParams([W], [b]), K, has_abstention)


def clusters(n=300, seed=0, means=((0, 0), (4, 0), (2, 3.5)), scale=0.6):
    return gen_synthetic(SyntheticSpec("gaussian_clusters", n, seed, [list(m) for m in means], scale))


def ring(n=300, seed=0, K=3):
    return gen_synthetic(
        SyntheticSpec("ring", n, seed, r_inner=5, r_outer=8, center=(2, 1.2), num_known_classes=K)
    )


def load_config(name, out_dir, **overrides):
    raw = json.loads((CONFIGS / name).read_text())
    raw["output_dir"] = str(out_dir)
    raw.update(overrides)
    return raw


def prepare_mnist_idx(directory: Path) -> Path:
    """Directory holding the four standard MNIST IDX files.

    Uses ``$DACOOD_MNIST_DIR`` when it has them; otherwise writes an IDX pair
    built from the 5000-image MNIST sample bundled with mlxtend, split 80/20.
    """
    env = os.environ.get("DACOOD_MNIST_DIR")
    if env and all((Path(env) / f).exists() for f in MNIST_FILES):
        return Path(env)
    mlxtend_data = pytest.importorskip("mlxtend.data")
    from dacood.data import write_idx

    X, y = mlxtend_data.mnist_data()
    images = X.reshape(-1, 28, 28).astype(np.uint8)
    perm = np.random.default_rng(0).permutation(len(y))
    cut = int(0.8 * len(y))
    tr, te = np.sort(perm[:cut]), np.sort(perm[cut:])
    directory.mkdir(parents=True, exist_ok=True)
    write_idx(images[tr], y[tr], directory / MNIST_FILES[0], directory / MNIST_FILES[1])
    write_idx(images[te], y[te], directory / MNIST_FILES[2], directory / MNIST_FILES[3])
    return directory


def mnist_is_full(directory: Path) -> bool:
    return (directory / MNIST_FILES[0]).stat().st_size > 10_000_000
