"""Datasets: synthetic generators, IDX/CSV loaders, standardization, splits.

Labels are 0-based. A dataset with ``num_known_classes = K`` uses labels
``0..K-1`` for known classes and ``K`` for the abstention class.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
STD_FLOOR = 1e-8

Seed = Union[int, Sequence[int]]


class SpecError(ValueError):
    pass


class IdxFormatError(ValueError):
    pass


class CsvParseError(ValueError):
    pass


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_known_classes: int
    name: str = ""
    # (low, high) input range, when the data has one (e.g. pixels in [0, 1])
    bounds: Optional[tuple[float, float]] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} rows but {y.shape[0]} labels")
        if not np.isfinite(X).all():
            raise ValueError(f"dataset {self.name!r} contains non-finite features")
        if y.size and (y.min() < 0 or y.max() > self.num_known_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_known_classes}], got "
                f"[{y.min()}, {y.max()}]"
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def abstain_index(self) -> int:
        return self.num_known_classes

    def subset(self, idx, name: Optional[str] = None) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx], name=name or self.name)

    def filter_classes(self, classes: Sequence[int], num_known_classes: Optional[int] = None) -> "Dataset":
        keep = np.isin(self.y, classes)
        k = self.num_known_classes if num_known_classes is None else num_known_classes
        return Dataset(self.X[keep], self.y[keep], k, self.name, self.bounds)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_known_classes == other.num_known_classes
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for one synthetic population.

    ``gaussian_clusters`` uses ``means`` and ``scale`` and labels samples by
    cluster. ``uniform_box`` uses ``low``/``high`` and ``ring`` uses
    ``r_inner``/``r_outer`` around ``center``; both label every sample with the
    abstention index ``num_known_classes``.
    """

    kind: str
    n: int
    seed: Seed = 0
    means: Optional[Sequence[Sequence[float]]] = None
    scale: float = 1.0
    low: Optional[Sequence[float]] = None
    high: Optional[Sequence[float]] = None
    r_inner: float = 1.0
    r_outer: float = 2.0
    center: Sequence[float] = (0.0, 0.0)
    num_known_classes: Optional[int] = None
    name: str = ""

    KINDS = ("gaussian_clusters", "uniform_box", "ring")

    def validate(self) -> None:
        if self.kind not in self.KINDS:
            raise SpecError(f"unknown synthetic kind {self.kind!r}; expected one of {self.KINDS}")
        if self.n < 1:
            raise SpecError(f"sample count must be positive, got {self.n}")
        if self.kind == "gaussian_clusters":
            if not self.means:
                raise SpecError("gaussian_clusters needs at least one mean")
            if len({len(m) for m in self.means}) != 1:
                raise SpecError("cluster means have different dimensions")
            if not self.scale > 0:
                raise SpecError(f"cluster scale must be positive, got {self.scale}")
        elif self.kind == "uniform_box":
            if self.low is None or self.high is None or len(self.low) != len(self.high):
                raise SpecError("uniform_box needs low and high of equal length")
            if any(lo >= hi for lo, hi in zip(self.low, self.high)):
                raise SpecError("uniform_box needs low < high in every dimension")
        else:
            if not 0 <= self.r_inner < self.r_outer:
                raise SpecError(
                    f"ring needs 0 <= r_inner < r_outer, got {self.r_inner}, {self.r_outer}"
                )
            if len(self.center) != 2:
                raise SpecError("ring is two-dimensional; center must have 2 coordinates")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown synthetic spec fields: {sorted(extra)}")
        d = dict(d)
        if isinstance(d.get("seed"), list):
            d["seed"] = tuple(d["seed"])
        return cls(**d)


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    name = spec.name or spec.kind
    if spec.kind == "gaussian_clusters":
        means = np.asarray(spec.means, dtype=np.float64)
        k = len(means)
        y = np.arange(spec.n) % k
        X = means[y] + spec.scale * rng.standard_normal((spec.n, means.shape[1]))
        K = k if spec.num_known_classes is None else spec.num_known_classes
        if K < k:
            raise SpecError(f"num_known_classes={K} is smaller than the {k} clusters")
        return Dataset(X, y, K, name)

    K = 1 if spec.num_known_classes is None else spec.num_known_classes
    if spec.kind == "uniform_box":
        low = np.asarray(spec.low, dtype=np.float64)
        high = np.asarray(spec.high, dtype=np.float64)
        X = rng.uniform(low, high, size=(spec.n, len(low)))
    else:
        # area-uniform radius
        u = rng.random(spec.n)
        r = np.sqrt(spec.r_inner**2 + u * (spec.r_outer**2 - spec.r_inner**2))
        r = np.clip(r, spec.r_inner, spec.r_outer)
        theta = rng.uniform(0.0, 2.0 * np.pi, spec.n)
        X = np.column_stack([r * np.cos(theta), r * np.sin(theta)]) + np.asarray(spec.center)
    return Dataset(X, np.full(spec.n, K), K, name)


def _open_maybe_gz(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int, expected_ndim: int) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated at byte offset {len(raw)}, no magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}"
        )
    header_end = 4 + 4 * expected_ndim
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated header, file ends at byte offset {len(raw)}")
    dims = struct.unpack(f">{expected_ndim}I", raw[4:header_end])
    size = math.prod(dims)
    if len(raw) < header_end + size:
        raise IdxFormatError(
            f"{path}: truncated data, expected {size} bytes from offset {header_end}, "
            f"file ends at byte offset {len(raw)}"
        )
    if len(raw) > header_end + size:
        raise IdxFormatError(f"{path}: trailing bytes after offset {header_end + size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end, count=size).reshape(dims)


def load_idx(images_path, labels_path, num_known_classes: Optional[int] = None, name: str = "") -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1] and flattened row-major."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images_path} holds {images.shape[0]} images (header offset 4), "
            f"{labels_path} holds {labels.shape[0]} labels (header offset 4)"
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    K = int(y.max()) + 1 if num_known_classes is None else num_known_classes
    return Dataset(X, y, K, name or Path(images_path).name, bounds=(0.0, 1.0))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, h, w) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_csv(
    path,
    label_column: Optional[str] = None,
    num_known_classes: Optional[int] = None,
    name: str = "",
) -> Dataset:
    """Load a numeric CSV with a header row.

    Without ``label_column`` every row gets the abstention label
    ``num_known_classes`` (default 1).
    """
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise CsvParseError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise CsvParseError(f"{path}: no data rows")
    values = np.empty((len(body), len(header)), dtype=np.float64)
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise CsvParseError(f"{path}: row {i + 2} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise CsvParseError(
                    f"{path}: non-numeric cell {cell!r} at row {i + 2}, column {j + 1} ({header[j]})"
                ) from None
    name = name or Path(path).stem
    if label_column is None:
        K = 1 if num_known_classes is None else num_known_classes
        return Dataset(values, np.full(len(body), K), K, name)
    if label_column not in header:
        raise CsvParseError(f"{path}: label column {label_column!r} not in header {header}")
    j = header.index(label_column)
    raw_y = values[:, j]
    if not np.all(raw_y == np.round(raw_y)) or raw_y.min() < 0:
        raise CsvParseError(f"{path}: label column {label_column!r} must hold non-negative integers")
    y = raw_y.astype(np.int64)
    K = int(y.max()) + 1 if num_known_classes is None else num_known_classes
    return Dataset(np.delete(values, j, axis=1), y, K, name)


def write_csv(d: Dataset, path, label_column: str = "y") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(",".join([f"x{j + 1}" for j in range(d.dim)] + [label_column]) + "\n")
        for row, label in zip(d.X, d.y):
            f.write(",".join([f"{v:.17g}" for v in row] + [str(int(label))]) + "\n")


def relabel_as_abstain(d: Dataset, K: int) -> Dataset:
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    return Dataset(d.X, np.full(d.n, K), K, d.name, d.bounds)


def concat(a: Dataset, b: Dataset) -> Dataset:
    if a.dim != b.dim:
        raise ValueError(f"feature width mismatch: {a.dim} vs {b.dim}")
    if a.num_known_classes != b.num_known_classes:
        raise ValueError(
            f"num_known_classes mismatch: {a.num_known_classes} vs {b.num_known_classes}"
        )
    return Dataset(
        np.vstack([a.X, b.X]),
        np.concatenate([a.y, b.y]),
        a.num_known_classes,
        a.name if not b.n else f"{a.name}+{b.name}" if a.n else b.name,
        a.bounds if a.bounds == b.bounds else None,
    )


def empty_like(d: Dataset, name: str = "") -> Dataset:
    return Dataset(np.empty((0, d.dim)), np.empty(0, dtype=np.int64), d.num_known_classes, name, d.bounds)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray = field(repr=False)

    def apply(self, d: Dataset) -> Dataset:
        return apply_standardizer(self, d)


def fit_standardizer(d: Dataset) -> Standardizer:
    if d.n < 2:
        raise FitError(f"standardizer needs at least 2 samples, got {d.n}")
    return Standardizer(d.X.mean(axis=0), np.maximum(d.X.std(axis=0), STD_FLOOR))


def apply_standardizer(s: Standardizer, d: Dataset) -> Dataset:
    if d.dim != s.mean.shape[0]:
        raise ValueError(f"standardizer fitted on width {s.mean.shape[0]}, data has {d.dim}")
    # declared bounds refer to raw inputs and do not survive the affine map
    return Dataset((d.X - s.mean) / s.std, d.y, d.num_known_classes, d.name)


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or fractions.size == 0 or (fractions <= 0).any():
        raise SpecError(f"fractions must be positive, got {fractions.tolist()}")
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise SpecError(f"fractions must sum to 1, got {fractions.sum()!r}")
    exact = n * fractions
    sizes = np.floor(exact).astype(int)
    # largest remainders get the leftover samples, ties to the earlier part
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    return sizes.tolist()


def split(d: Dataset, fractions: Sequence[float], seed: Seed) -> list[Dataset]:
    sizes = split_sizes(d.n, fractions)
    perm = np.random.default_rng(seed).permutation(d.n)
    bounds = np.cumsum([0] + sizes)
    return [
        d.subset(perm[lo:hi], name=f"{d.name}[{i}]")
        for i, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:]))
    ]
