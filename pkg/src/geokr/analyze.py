"""Land-cover product change statistics and linear-probe evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nnet
from .errors import ArchitectureMismatch, DivisionByZeroProportion, KeyMismatch
from .geoknow import class_names
from .ingest import TileRecord, read_manifest
from .raster import PathLike
from .trainer import normalize

# GlobeLand30 class proportions for the 2010 and 2020 releases, active-class order
GLOBELAND30_PROPORTIONS = {
    2010: (0.0102, 0.1645, 0.1617, 0.3212, 0.2634, 0.0204, 0.0301, 0.0285),
    2020: (0.0129, 0.1608, 0.1669, 0.3262, 0.2501, 0.0227, 0.0311, 0.0293),
}
# changes as published alongside those proportions
GLOBELAND30_PUBLISHED_CHANGE = {
    "mae": (0.0026, 0.0037, 0.0053, 0.005, 0.0133, 0.0023, 0.001, 0.0007),
    "mape": (0.2582, 0.0227, 0.0326, 0.0156, 0.0504, 0.114, 0.0341, 0.0256),
}


@dataclass
class ChangeRow:
    name: str
    proportion_old: float
    proportion_new: float
    mae: float
    mape: float


@dataclass
class ChangeReport:
    rows: list[ChangeRow]
    category_change_rate: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "classes": [vars(r) for r in self.rows],
            "category_change_rate": self.category_change_rate,
        }

    def to_text(self, old_label: str = "old", new_label: str = "new") -> str:
        """Aligned columns: one column per class, rows old / new / MAE / MAPE."""
        names = [r.name for r in self.rows]
        width = max(10, *(len(n) for n in names))
        lines = [" " * 6 + "".join(f"{n:>{width + 2}}" for n in names)]
        for label, attr in ((old_label, "proportion_old"), (new_label, "proportion_new"), ("MAE", "mae"), ("MAPE", "mape")):
            lines.append(f"{label:<6}" + "".join(f"{getattr(r, attr):>{width + 2}.4f}" for r in self.rows))
        if self.category_change_rate is not None:
            lines.append(f"category change rate: {self.category_change_rate:.4f}")
        return "\n".join(lines)


def product_change_stats(
    proportions_old: Sequence[float],
    proportions_new: Sequence[float],
    names: Optional[Sequence[str]] = None,
) -> ChangeReport:
    """Per-class absolute change and change relative to the older product."""
    old = [float(v) for v in proportions_old]
    new = [float(v) for v in proportions_new]
    if len(old) != len(new):
        raise ValueError(f"class count mismatch: {len(old)} vs {len(new)}")
    names = list(names) if names is not None else (class_names() if len(old) == len(class_names()) else [str(i) for i in range(len(old))])
    rows = []
    for name, o, n in zip(names, old, new):
        if o <= 0:
            raise DivisionByZeroProportion(f"old proportion of {name!r} is {o}")
        mae = abs(n - o)
        rows.append(ChangeRow(name, o, n, mae, mae / o))
    return ChangeReport(rows)


def _records(manifest) -> list[TileRecord]:
    if isinstance(manifest, (list, tuple)):
        return list(manifest)
    return read_manifest(manifest)


def category_change_rate(manifest_a, manifest_b) -> float:
    """Fraction of tiles whose dominant class differs between two supervision sources."""
    a = {r.key(): int(np.argmax(r.representation)) for r in _records(manifest_a)}
    b = {r.key(): int(np.argmax(r.representation)) for r in _records(manifest_b)}
    if a.keys() != b.keys():
        only_a, only_b = len(a.keys() - b.keys()), len(b.keys() - a.keys())
        raise KeyMismatch(f"manifests cover different tiles ({only_a} only in first, {only_b} only in second)")
    if not a:
        raise KeyMismatch("manifests are empty")
    return sum(a[k] != b[k] for k in a) / len(a)


@dataclass
class ProbeResult:
    accuracy: float
    per_class_accuracy: dict[int, float]
    source: str
    seeds: list[int]
    per_seed_accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": {str(k): v for k, v in self.per_class_accuracy.items()},
            "source": self.source,
            "seeds": self.seeds,
            "per_seed_accuracy": self.per_seed_accuracy,
        }


def _train_linear(features, labels, n_classes, rng, epochs, lr, batch_size):
    d = features.shape[1]
    w = rng.standard_normal((d, n_classes)) * 0.01
    b = np.zeros(n_classes)
    n = len(features)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x, y = features[idx], labels[idx]
            p = nnet.softmax(x @ w + b)
            p[np.arange(len(idx)), y] -= 1.0
            g = p / len(idx)
            w -= lr * (x.T @ g)
            b -= lr * g.sum(axis=0)
    return w, b


def linear_probe(
    params: nnet.ParameterSet,
    cfg: nnet.EncoderConfig,
    tiles: np.ndarray,
    labels: np.ndarray,
    seeds: Sequence[int] = (0, 1, 2),
    epochs: int = 200,
    lr: float = 1e-2,
    batch_size: int = 32,
    train_fraction: float = 0.5,
    source: str = "pretrained",
) -> ProbeResult:
    """Freeze the encoder, fit a linear classifier on h, report held-out top-1 accuracy.

    ``tiles`` are u8 (N, 3, H, W).  Features are standardized with the
    training split's statistics.  Accuracy is averaged over ``seeds``; each
    seed draws its own split and initialization.
    """
    if tiles.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise ArchitectureMismatch(f"tiles {tiles.shape[1:]} do not fit encoder input {(cfg.in_channels, cfg.height, cfg.width)}")
    before = params.checksum()
    x = normalize(tiles.astype(np.float64) / 255.0, np.float64)
    feats = nnet.encode(params, cfg, x.astype(params.dtype)).astype(np.float64)
    if params.checksum() != before:
        raise RuntimeError("encoder weights changed during probing")
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1

    per_seed, hits, totals = [], {}, {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(labels))
        n_train = int(round(train_fraction * len(labels)))
        tr, te = order[:n_train], order[n_train:]
        mu = feats[tr].mean(axis=0)
        sd = feats[tr].std(axis=0)
        sd[sd == 0] = 1.0
        z = (feats - mu) / sd
        w, b = _train_linear(z[tr], labels[tr], n_classes, rng, epochs, lr, batch_size)
        pred = np.argmax(z[te] @ w + b, axis=1)
        correct = pred == labels[te]
        per_seed.append(float(correct.mean()))
        for c in np.unique(labels[te]):
            m = labels[te] == c
            hits[int(c)] = hits.get(int(c), 0) + int(correct[m].sum())
            totals[int(c)] = totals.get(int(c), 0) + int(m.sum())
    per_class = {c: hits[c] / totals[c] for c in sorted(totals)}
    return ProbeResult(float(np.mean(per_seed)), per_class, source, list(seeds), per_seed)


def load_proportions(path: PathLike) -> list[float]:
    """Proportions from JSON: a list, ``{"proportions": [...]}`` or ``{class name: value}``."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict) and "proportions" in data:
        data = data["proportions"]
    if isinstance(data, dict):
        names = class_names()
        missing = [n for n in names if n not in data]
        if missing:
            raise KeyMismatch(f"{path}: missing classes {missing}")
        return [float(data[n]) for n in names]
    return [float(v) for v in data]
