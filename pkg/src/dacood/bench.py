"""Config-driven benchmark runs and report writing.

One JSON file describes an experiment::

    {
      "name": "synthetic",
      "seeds": [0, 1, 2, 3, 4],
      "in_distribution": {"train": SOURCE, "test": SOURCE, "val_fraction": 0.1},
      "outlier_exposure": SOURCE,
      "ood_test_sets": [{"name": "far_box", ...SOURCE}],
      "detectors": [{"kind": "abstention"}, {"kind": "max_softmax"}],
      "train": {"hidden_dims": [32, 32], "epochs": 30},
      "standardize": true,
      "balance": true,
      "hist_bins": 50,
      "delta": null,
      "output_dir": "out"
    }

A SOURCE is one of ``{"synthetic": {...}}``, ``{"idx": {"images": ..., "labels": ...}}``
or ``{"csv": {"path": ..., "label_column": ...}}``, optionally with ``"name"`` and
``"classes"`` (keep only these labels, renumbered 0..len-1 in list order).
Relative paths are resolved against the config file's directory. Synthetic
sources are re-seeded per run as ``(source seed, run seed)``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import detect as det
from . import metrics
from .data import (
    Dataset,
    SyntheticSpec,
    fit_standardizer,
    gen_synthetic,
    load_csv,
    load_idx,
    split,
)
from .detect import DetectorSpec
from .train import (
    MlpModel,
    TrainConfig,
    config_dict,
    fit_temperature,
    save_model,
    train_dac,
    train_ensemble,
    train_oe,
    train_plain,
)

OUTPUT_DIR_ENV = "DACOOD_OUTPUT_DIR"
STD_LABEL = "sample std (n-1) across seeds"
TABLE_COLUMNS = ["ood_set", "detector", "auroc_mean", "auroc_std", "fpr95_mean", "fpr95_std", "n_seeds"]
DEFAULT_ENSEMBLE_SIZE = 5
ENSEMBLE_SEED_STRIDE = 1000


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


def fmt(x: float) -> str:
    return f"{x:.17g}"


@dataclass(frozen=True)
class BenchDetector:
    label: str
    spec: DetectorSpec


@dataclass
class ExperimentConfig:
    name: str
    in_distribution: dict
    outlier_exposure: dict
    ood_test_sets: list[dict]
    detectors: list[BenchDetector]
    train: TrainConfig
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    delta: Optional[float] = None
    output_dir: Optional[str] = None
    standardize: bool = True
    balance: bool = True
    hist_bins: int = 50
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ExperimentConfig":
        known = {
            "name", "in_distribution", "outlier_exposure", "ood_test_sets", "detectors",
            "train", "seeds", "delta", "output_dir", "standardize", "balance", "hist_bins",
        }
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        for key in ("in_distribution", "outlier_exposure", "ood_test_sets", "detectors"):
            if key not in raw:
                raise ConfigError(f"config is missing {key!r}")
        ind = raw["in_distribution"]
        if "train" not in ind or "test" not in ind:
            raise ConfigError("in_distribution needs 'train' and 'test' sources")
        ood = raw["ood_test_sets"]
        if not ood:
            raise ConfigError("at least one OoD test set is required")
        names = [s.get("name") for s in ood]
        if any(not n for n in names):
            raise ConfigError("every OoD test set needs a name")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate OoD test set names: {names}")
        oe_name = raw["outlier_exposure"].get("name", "outlier_exposure")
        if oe_name in names:
            raise ConfigError(f"OoD test set name {oe_name!r} collides with the outlier-exposure set")
        if not raw["detectors"]:
            raise ConfigError("at least one detector is required")
        detectors = []
        for d in raw["detectors"]:
            d = dict(d)
            label = d.pop("label", None)
            try:
                spec = DetectorSpec.from_dict(d)
            except ValueError as e:
                raise ConfigError(str(e)) from None
            detectors.append(BenchDetector(label or _file_tag(spec), spec))
        labels = [d.label for d in detectors]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate detector labels: {labels}")
        for lab in labels:
            if not re.fullmatch(r"[A-Za-z0-9._=-]+", lab):
                raise ConfigError(f"detector label {lab!r} is not filename-safe")
        seeds = [int(s) for s in raw.get("seeds", [0, 1, 2, 3, 4])]
        if not seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"duplicate seeds: {seeds}")
        try:
            train = TrainConfig.from_dict(raw.get("train", {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"train: {e}") from None
        return cls(
            name=raw.get("name", "experiment"),
            in_distribution=ind,
            outlier_exposure=raw["outlier_exposure"],
            ood_test_sets=ood,
            detectors=detectors,
            train=train,
            seeds=seeds,
            delta=raw.get("delta"),
            output_dir=raw.get("output_dir"),
            standardize=bool(raw.get("standardize", True)),
            balance=bool(raw.get("balance", True)),
            hist_bins=int(raw.get("hist_bins", 50)),
            base_dir=Path(base_dir),
            raw=raw,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def resolve_output_dir(self) -> Path:
        out = self.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "out"
        out = Path(out)
        return out if out.is_absolute() else Path(os.path.normpath(self.base_dir / out))


def _file_tag(spec: DetectorSpec) -> str:
    short = {"temperature": "T", "epsilon": "eps", "n_passes": "n", "dropout_p": "p", "members": "m"}
    parts = [spec.kind]
    for key, abbrev in short.items():
        value = getattr(spec, key)
        if value is not None:
            parts.append(f"{abbrev}{value:g}")
    return "-".join(parts)


def load_source(src: dict, base_dir: Path, run_seed: int, K: Optional[int] = None) -> Dataset:
    """Materialize one dataset description."""
    kinds = [k for k in ("synthetic", "idx", "csv") if k in src]
    if len(kinds) != 1:
        raise ConfigError(f"a source needs exactly one of synthetic/idx/csv, got {sorted(src)}")
    kind = kinds[0]
    body = src[kind]
    name = src.get("name", "")
    if kind == "synthetic":
        spec = SyntheticSpec.from_dict(body)
        base = spec.seed if isinstance(spec.seed, tuple) else (spec.seed,)
        d = gen_synthetic(replace(spec, seed=(*base, run_seed), name=name or spec.name))
    elif kind == "idx":
        d = load_idx(base_dir / body["images"], base_dir / body["labels"], name=name)
    else:
        d = load_csv(base_dir / body["path"], body.get("label_column"), name=name)
    if "classes" in src:
        # keep the listed labels and renumber them 0..len-1 in list order
        classes = [int(c) for c in src["classes"]]
        if len(set(classes)) != len(classes):
            raise ConfigError(f"source {name or kind!r} lists duplicate classes {classes}")
        d = d.filter_classes(classes)
        if d.n == 0:
            raise ConfigError(f"source {name or kind!r} has no samples of classes {classes}")
        lookup = {c: i for i, c in enumerate(classes)}
        d = Dataset(d.X, np.array([lookup[int(v)] for v in d.y]), len(classes), d.name, d.bounds)
    if K is not None:
        if d.y.max() >= K:
            raise ConfigError(f"source {name or kind!r} has labels outside the {K} known classes")
        d = Dataset(d.X, d.y, K, d.name, d.bounds)
    return d


@dataclass
class ReportRow:
    ood_set: str
    detector: str
    auroc_mean: float
    auroc_std: float
    fpr95_mean: float
    fpr95_std: float
    n_seeds: int
    auroc_per_seed: list[float] = field(default_factory=list)
    fpr95_per_seed: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    name: str
    rows: list[ReportRow]
    id_accuracy: dict[str, dict[str, float]] = field(default_factory=dict)
    temperatures: dict[str, dict[str, float]] = field(default_factory=dict)
    delta_rates: dict = field(default_factory=dict)
    architecture: str = ""
    config: dict = field(default_factory=dict)
    version: str = __version__
    std_convention: str = STD_LABEL

    def row(self, ood_set: str, detector: str) -> ReportRow:
        for r in self.rows:
            if r.ood_set == ood_set and r.detector == detector:
                return r
        raise KeyError((ood_set, detector))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["rows"] = [ReportRow(**r) for r in d["rows"]]
        return cls(**d)


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _atomic_write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def score_dump_text(sample_ids, scores, is_ood_flags) -> str:
    sample_ids = list(sample_ids)
    scores = list(scores)
    flags = list(is_ood_flags)
    if not len(sample_ids) == len(scores) == len(flags):
        raise ValueError("sample_ids, scores and is_ood flags must have equal length")
    lines = ["sample_id,score,is_ood"]
    for sid, s, f in zip(sample_ids, scores, flags):
        if f not in (0, 1, True, False):
            raise ValueError(f"is_ood must be 0 or 1, got {f!r}")
        lines.append(f"{sid},{fmt(float(s))},{int(f)}")
    return "\n".join(lines) + "\n"


def dump_scores(path, sample_ids, scores, is_ood_flags) -> Path:
    path = Path(path)
    text = score_dump_text(sample_ids, scores, is_ood_flags)
    try:
        _atomic_write(path, text)
    except OSError as e:
        raise OSError(f"cannot write score dump {path}: {e.strerror}") from e
    return path


def histogram_text(edges: np.ndarray, counts: np.ndarray) -> str:
    lines = ["bin_left,bin_right,count"]
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        lines.append(f"{fmt(lo)},{fmt(hi)},{int(c)}")
    return "\n".join(lines) + "\n"


def emit_table(report: EvalReport, format: str = "csv") -> str:
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in report.rows:
            w.writerow([r.ood_set, r.detector, fmt(r.auroc_mean), fmt(r.auroc_std),
                        fmt(r.fpr95_mean), fmt(r.fpr95_std), r.n_seeds])
        return buf.getvalue()
    if format in ("md", "markdown"):
        lines = [
            f"# {report.name}",
            "",
            f"- toolkit version: {report.version}",
            f"- architecture: {report.architecture}",
            f"- std: {report.std_convention}",
            "",
            "| " + " | ".join(TABLE_COLUMNS) + " |",
            "|" + "---|" * len(TABLE_COLUMNS),
        ]
        for r in report.rows:
            cells = [r.ood_set, r.detector, fmt(r.auroc_mean), fmt(r.auroc_std),
                     fmt(r.fpr95_mean), fmt(r.fpr95_std), str(r.n_seeds)]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {format!r}; use csv or markdown")


def parse_table_csv(text: str, name: str = "report") -> EvalReport:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(ReportRow(
            rec["ood_set"], rec["detector"], float(rec["auroc_mean"]), float(rec["auroc_std"]),
            float(rec["fpr95_mean"]), float(rec["fpr95_std"]), int(rec["n_seeds"]),
        ))
    return EvalReport(name, rows)


def load_report(path) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".csv":
        return parse_table_csv(text, path.stem)
    return EvalReport.from_json(text)


class _SeedRun:
    """Datasets, models and scores for one seed."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.models: dict = {}
        self.temperatures: dict[str, float] = {}
        base = cfg.base_dir
        ind = cfg.in_distribution
        train = load_source(ind["train"], base, seed)
        K = train.num_known_classes
        test = load_source(ind["test"], base, seed, K)
        val_fraction = float(ind.get("val_fraction", 0.1))
        if "val" in ind:
            val = load_source(ind["val"], base, seed, K)
        elif val_fraction > 0:
            train, val = split(train, [1.0 - val_fraction, val_fraction], seed)
        else:
            val = None
        oe = load_source(cfg.outlier_exposure, base, seed)
        oods = [load_source(s, base, seed) for s in cfg.ood_test_sets]
        self.standardizer = None
        if cfg.standardize:
            st = self.standardizer = fit_standardizer(train)
            train, test, oe = st.apply(train), st.apply(test), st.apply(oe)
            val = st.apply(val) if val is not None else None
            oods = [st.apply(o) for o in oods]
        self.K = K
        self.train, self.val, self.test, self.oe = train, val, test, oe
        self.oods = oods
        self.bounds = train.bounds

    def _cfg(self, dropout_p=None) -> TrainConfig:
        return replace(self.cfg.train, seed=self.seed, dropout_p=dropout_p)

    def model(self, key) -> MlpModel:
        if key not in self.models:
            kind = key[0]
            if kind == "dac":
                self.models[key] = train_dac(self.train, self.oe, self._cfg(), self.val)[0]
            elif kind == "plain":
                self.models[key] = train_plain(self.train, self._cfg(key[1]), self.val)[0]
            elif kind == "oe":
                self.models[key] = train_oe(self.train, self.oe, self._cfg(), self.val)[0]
            elif kind == "ensemble":
                # spaced base seed keeps members of different run seeds disjoint
                self.models[key] = train_ensemble(
                    train_plain, key[1], ENSEMBLE_SEED_STRIDE * self.seed, self.train,
                    cfg=self._cfg(), val=self.val,
                )
            else:
                raise AssertionError(kind)
        return self.models[key]

    def score(self, bd: BenchDetector, X: np.ndarray) -> np.ndarray:
        spec = bd.spec
        kind = spec.kind
        if kind == "abstention":
            return det.score_abstention(self.model(("dac",)), X).scores
        if kind == "outlier_exposure":
            return det.score_max_softmax(self.model(("oe",)), X).scores
        if kind == "ensemble":
            members = self.model(("ensemble", spec.members or DEFAULT_ENSEMBLE_SIZE))
            return det.score_ensemble(members, X).scores
        if kind == "mc_dropout":
            m = self.model(("plain", spec.dropout_p))
            return det.score_mc_dropout(m, X, spec.dropout_p, spec.n_passes, self.seed).scores
        plain = self.model(("plain", None))
        if kind == "max_softmax":
            return det.score_max_softmax(plain, X).scores
        if kind == "entropy":
            return det.score_entropy(plain, X).scores
        if kind == "temp_softmax":
            T = spec.temperature
            if T is None:
                if bd.label not in self.temperatures:
                    if self.val is None:
                        raise ConfigError("fitting a temperature needs validation data")
                    self.temperatures[bd.label] = fit_temperature(plain, self.val).temperature
                T = self.temperatures[bd.label]
            return det.score_temp_softmax(plain, X, T).scores
        if kind == "odin":
            return det.score_odin(plain, X, spec.temperature, spec.epsilon, self.bounds).scores
        if kind == "mahalanobis":
            key = ("mahalanobis",)
            if key not in self.models:
                self.models[key] = det.fit_mahalanobis(plain, self.train)
            return det.score_mahalanobis(plain, self.models[key], X).scores
        raise AssertionError(kind)

    def id_accuracy(self) -> dict[str, float]:
        out = {}
        for key, m in sorted(self.models.items(), key=lambda kv: repr(kv[0])):
            if isinstance(m, MlpModel):
                tag = key[0] if key[0] != "plain" or key[1] is None else f"plain_dropout{key[1]:g}"
                out[tag] = m.accuracy(self.test)
        return out


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> EvalReport:
    out_dir = cfg.resolve_output_dir()
    evals: dict[tuple[str, str], list[metrics.DetectionEval]] = {}
    id_acc: dict[str, dict[str, float]] = {}
    temps: dict[str, dict[str, float]] = {}
    delta_rates: dict = {}
    architecture = ""
    files: dict[Path, object] = {}
    for seed in cfg.seeds:
        try:
            run = _SeedRun(cfg, seed)
            dac = run.model(("dac",))
            architecture = (
                "MLP " + "-".join(str(d) for d in dac.layer_dims)
                + " (rectifier hidden layers, linear output; last output = abstention class)"
            )
            files[out_dir / f"model_{seed}.bin"] = dac
            id_scores = {bd.label: run.score(bd, run.test.X) for bd in cfg.detectors}
            for j, (src, ood) in enumerate(zip(cfg.ood_test_sets, run.oods)):
                set_name = src["name"]
                X = ood.X
                if cfg.balance and ood.n > run.test.n:
                    pick = np.sort(np.random.default_rng([seed, j, 7]).choice(ood.n, run.test.n, replace=False))
                    X = X[pick]
                for bd in cfg.detectors:
                    neg = id_scores[bd.label]
                    pos = run.score(bd, X)
                    evals.setdefault((set_name, bd.label), []).append(metrics.evaluate(pos, neg, bd.label))
                    stem = f"{seed}_{set_name}_{bd.label}"
                    n_neg = len(neg)
                    files[out_dir / f"scores_{stem}.csv"] = score_dump_text(
                        range(n_neg + len(pos)),
                        np.concatenate([neg, pos]),
                        [0] * n_neg + [1] * len(pos),
                    )
                    lo = float(min(neg.min(), pos.min()))
                    hi = float(max(neg.max(), pos.max()))
                    e_id, c_id = metrics.histogram(neg, cfg.hist_bins, (lo, hi))
                    e_ood, c_ood = metrics.histogram(pos, cfg.hist_bins, (lo, hi))
                    files[out_dir / f"hist_{stem}_id.csv"] = histogram_text(e_id, c_id)
                    files[out_dir / f"hist_{stem}_ood.csv"] = histogram_text(e_ood, c_ood)
                    if cfg.delta is not None:
                        delta_rates.setdefault(f"{set_name}/{bd.label}", {})[str(seed)] = {
                            "tpr": float(det.detect(pos, cfg.delta).mean()),
                            "fpr": float(det.detect(neg, cfg.delta).mean()),
                        }
            id_acc[str(seed)] = run.id_accuracy()
            if run.temperatures:
                temps[str(seed)] = dict(run.temperatures)
        except (ConfigError, ExperimentError):
            raise
        except Exception as e:
            raise ExperimentError(f"seed {seed} failed: {type(e).__name__}: {e}") from e

    rows = []
    for src in cfg.ood_test_sets:
        for bd in cfg.detectors:
            ev = evals[(src["name"], bd.label)]
            au = [e.auroc for e in ev]
            fp = [e.fpr_at_95tpr for e in ev]
            rows.append(ReportRow(src["name"], bd.label, float(np.mean(au)), _std(au),
                                  float(np.mean(fp)), _std(fp), len(ev), au, fp))
    echo = dict(cfg.raw)
    echo["train"] = config_dict(cfg.train)
    report = EvalReport(cfg.name, rows, id_acc, temps, delta_rates, architecture, echo)
    if write:
        for path, payload in files.items():
            if isinstance(payload, MlpModel):
                _write_model(path, payload)
            else:
                _atomic_write(path, payload)
        _atomic_write(out_dir / "report.csv", emit_table(report, "csv"))
        _atomic_write(out_dir / "report.md", emit_table(report, "markdown"))
        _atomic_write(out_dir / "report.json", report.to_json())
    return report


def _write_model(path: Path, model: MlpModel) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    save_model(model, tmp)
    os.replace(tmp, path)
