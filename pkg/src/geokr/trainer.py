"""Mean-teacher pre-training against knowledge-representation targets."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nnet
from .errors import NonFiniteLoss, NonSquareTile, SourceUnreadable
from .geoknow import NUM_CLASSES
from .ingest import read_manifest
from .raster import PathLike, read_raster

log = logging.getLogger(__name__)

MODES = ("classification", "representation", "mean_teacher")
EXPORTS = ("student", "teacher")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    lr_decay_per_epoch: float = 0.9
    batch_size: int = 32
    ema_alpha: float = 0.95
    ema_interval: Optional[int] = 50  # batches between teacher updates; None = never
    gamma1: float = 1.0
    gamma2: float = 1.0
    epochs: int = 10
    mode: str = "mean_teacher"
    export: str = "teacher"
    seed: int = 0
    precision: str = "f32"
    augment: bool = True
    stages: tuple[tuple[int, int, int], ...] = nnet.EncoderConfig().stages

    def __post_init__(self):
        if not 0 <= self.ema_alpha <= 1:
            raise ValueError("ema_alpha must be in [0, 1]")
        if self.ema_interval is not None and self.ema_interval < 1:
            raise ValueError("ema_interval must be >= 1 (or None to disable)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.export not in EXPORTS:
            raise ValueError(f"export must be one of {EXPORTS}")
        if self.precision not in nnet.DTYPES:
            raise ValueError(f"precision must be one of {sorted(nnet.DTYPES)}")
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Full-scale settings: batch 128, teacher update every 3000 batches."""
        return cls(**{"batch_size": 128, "ema_interval": 3000, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        return cls(**known)

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_per_epoch**epoch

    def encoder(self, height: int, width: int) -> nnet.EncoderConfig:
        return nnet.EncoderConfig(3, height, width, self.stages, NUM_CLASSES)


@dataclass
class TrainerState:
    student: nnet.ParameterSet
    teacher: nnet.ParameterSet
    encoder: nnet.EncoderConfig
    rng: np.random.Generator
    global_step: int = 0
    epoch: int = 0


def init_state(cfg: TrainConfig, encoder: nnet.EncoderConfig) -> TrainerState:
    """Student from the seed; the teacher starts as an exact copy."""
    rng = np.random.default_rng(cfg.seed)
    student = nnet.init_params(encoder, rng, nnet.DTYPES[cfg.precision])
    return TrainerState(student, student.copy(), encoder, rng)


@dataclass(frozen=True)
class AugmentParams:
    rotation: int = 0  # quarter turns
    flip_ud: bool = False
    flip_lr: bool = False
    scale: tuple[float, ...] = (1.0, 1.0, 1.0)
    shift: tuple[float, ...] = (0.0, 0.0, 0.0)


def sample_augment(rng: np.random.Generator, channels: int = 3) -> AugmentParams:
    return AugmentParams(
        rotation=int(rng.integers(4)),
        flip_ud=bool(rng.integers(2)),
        flip_lr=bool(rng.integers(2)),
        scale=tuple(rng.uniform(0.8, 1.2, channels)),
        shift=tuple(rng.uniform(-0.1, 0.1, channels)),
    )


def apply_augment(tile: np.ndarray, p: AugmentParams, value_range: float = 1.0) -> np.ndarray:
    """Rotate, flip, then per-channel affine colour jitter clamped to [0, value_range]."""
    if p.rotation % 2 and tile.shape[1] != tile.shape[2]:
        raise NonSquareTile(f"cannot rotate a {tile.shape[1]}x{tile.shape[2]} tile by 90 degrees")
    out = np.rot90(tile, p.rotation, axes=(1, 2)) if p.rotation else tile
    if p.flip_ud:
        out = out[:, ::-1, :]
    if p.flip_lr:
        out = out[:, :, ::-1]
    scale = np.asarray(p.scale, dtype=tile.dtype)[:, None, None]
    shift = np.asarray(p.shift, dtype=tile.dtype)[:, None, None] * value_range
    if np.all(scale == 1) and np.all(shift == 0):
        return np.array(out)
    return np.clip(out * scale + shift, 0, value_range).astype(tile.dtype, copy=False)


def augment(tile: np.ndarray, rng: np.random.Generator, value_range: float = 1.0) -> np.ndarray:
    return apply_augment(tile, sample_augment(rng, tile.shape[0]), value_range)


def ema_update(teacher: nnet.ParameterSet, student: nnet.ParameterSet, alpha: float) -> nnet.ParameterSet:
    """In place: teacher <- alpha * teacher + (1 - alpha) * student."""
    teacher.check_compatible(student)
    for k, t in teacher.values.items():
        t[...] = alpha * t + (1 - alpha) * student.values[k]
    return teacher


def normalize(tiles: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map [0, 1] tiles to roughly zero-mean, unit-scale network input."""
    return ((tiles - 0.5) / 0.25).astype(dtype, copy=False)


def targets_for(cfg: TrainConfig, representations: np.ndarray) -> np.ndarray:
    if cfg.mode == "classification":
        return nnet.onehot(np.argmax(representations, axis=1), representations.shape[1])
    return representations


def train_step(state: TrainerState, tiles: np.ndarray, representations: np.ndarray, cfg: TrainConfig):
    """One student update (plus a teacher EMA on interval boundaries).

    ``tiles`` are already augmented and normalized, shape (B, 3, H, W).
    Returns ``(state, metrics)``.
    """
    lr = cfg.lr_at(state.epoch)
    targets = targets_for(cfg, np.asarray(representations, dtype=np.float64))
    graph = nnet.forward(state.student, state.encoder, tiles)
    teacher_probs = None
    if cfg.mode == "mean_teacher":
        teacher_probs = nnet.softmax(nnet.forward(state.teacher, state.encoder, tiles, record=False).logits)
    terms, dlogits = nnet.objective_grad(graph, targets, teacher_probs, cfg.gamma1, cfg.gamma2)
    if not all(math.isfinite(v) for v in terms.values()):
        raise NonFiniteLoss(f"non-finite loss at step {state.global_step}: {terms}")
    nnet.backward(graph, dlogits)
    nnet.sgd_step(state.student, lr)
    state.global_step += 1
    if cfg.mode == "mean_teacher" and cfg.ema_interval is not None and state.global_step % cfg.ema_interval == 0:
        ema_update(state.teacher, state.student, cfg.ema_alpha)
    metrics = {"step": state.global_step, "epoch": state.epoch, "lr": lr, **terms}
    return state, metrics


@dataclass
class TileDataset:
    """Tiles (N, 3, H, W) u8 with their supervision vectors and balancing factors."""

    tiles: np.ndarray
    representations: np.ndarray
    labels: np.ndarray
    dup_factors: np.ndarray
    keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tiles)

    @property
    def tile_shape(self) -> tuple[int, int]:
        return self.tiles.shape[2], self.tiles.shape[3]

    @classmethod
    def from_manifest(
        cls,
        manifest: PathLike,
        scenes: Optional[dict] = None,
        tile_size: Optional[int] = None,
    ) -> "TileDataset":
        """Load tiles listed in an ingest manifest.

        Scene paths and tile size default to the ``summary.json`` written
        next to the manifest.
        """
        manifest = Path(manifest)
        try:
            records = read_manifest(manifest)
            summary_path = manifest.parent / "summary.json"
            summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
            scenes = scenes or summary.get("scenes")
            tile_size = tile_size or summary.get("config", {}).get("tile_size")
            if not scenes or not tile_size:
                raise SourceUnreadable(f"{manifest}: scene paths and tile size are unknown (no summary.json)")
            cache = {}
            tiles = np.empty((len(records), 3, tile_size, tile_size), dtype=np.uint8)
            for n, r in enumerate(records):
                if r.scene_id not in cache:
                    cache[r.scene_id] = read_raster(scenes[r.scene_id]).values
                col, row = r.offset
                tiles[n] = cache[r.scene_id][:, row : row + tile_size, col : col + tile_size]
        except (OSError, KeyError, ValueError) as exc:
            raise SourceUnreadable(f"cannot load {manifest}: {exc}") from exc
        return cls(
            tiles,
            np.array([r.representation for r in records], dtype=np.float64),
            np.array([r.label for r in records], dtype=np.int64),
            np.array([r.dup_factor for r in records], dtype=np.int64),
            [r.key() for r in records],
        )

    def epoch_order(self, rng: np.random.Generator) -> np.ndarray:
        """Every record repeated by its dup factor, shuffled."""
        return rng.permutation(np.repeat(np.arange(len(self)), self.dup_factors))


def prepare_batch(
    tiles: np.ndarray, rng: np.random.Generator, do_augment: bool, dtype=np.float32
) -> np.ndarray:
    x = tiles.astype(dtype) / 255.0
    if do_augment:
        x = np.stack([augment(t, rng) for t in x])
    return normalize(x, dtype)


@dataclass
class PretrainResult:
    state: TrainerState
    checkpoints: list[Path]
    metrics_path: Path
    export_path: Optional[Path]
    history: list[dict]


def _save_pair(state: TrainerState, out: Path, tag: str, cfg: TrainConfig) -> list[Path]:
    extra = {"epoch": state.epoch, "mode": cfg.mode}
    return [
        nnet.save_checkpoint(state.student, state.encoder, out / f"{tag}_student", state.global_step, {**extra, "network": "student"}),
        nnet.save_checkpoint(state.teacher, state.encoder, out / f"{tag}_teacher", state.global_step, {**extra, "network": "teacher"}),
    ]


def export_network(state: TrainerState, cfg: TrainConfig) -> nnet.ParameterSet:
    """The network handed to downstream use: teacher only when one was trained."""
    if cfg.mode == "mean_teacher" and cfg.export == "teacher":
        return state.teacher
    return state.student


def run_pretraining(dataset: TileDataset, cfg: TrainConfig, out_dir: PathLike) -> PretrainResult:
    """Train for ``cfg.epochs`` epochs, writing checkpoints and a JSON-lines metrics log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(dataset) == 0:
        raise SourceUnreadable("dataset is empty")
    h, w = dataset.tile_shape
    state = init_state(cfg, cfg.encoder(h, w))
    dtype = nnet.DTYPES[cfg.precision]
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    checkpoints = _save_pair(state, out, "initial", cfg)
    metrics_path = out / "metrics.jsonl"
    history = []
    with open(metrics_path, "w") as log_fh:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            order = dataset.epoch_order(state.rng)
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                x = prepare_batch(dataset.tiles[idx], state.rng, cfg.augment, dtype)
                state, metrics = train_step(state, x, dataset.representations[idx], cfg)
                log_fh.write(json.dumps(metrics) + "\n")
                history.append(metrics)
            log.info(
                "epoch %d done: step %d, lr %.3g, last loss %.4f",
                epoch,
                state.global_step,
                cfg.lr_at(epoch),
                history[-1]["loss_total"] if history else float("nan"),
            )
            checkpoints += _save_pair(state, out, f"epoch_{epoch + 1:03d}", cfg)
    export_path = None
    if cfg.epochs > 0:
        export_path = nnet.save_checkpoint(
            export_network(state, cfg),
            state.encoder,
            out / "export",
            state.global_step,
            {"epoch": state.epoch, "mode": cfg.mode, "network": cfg.export if cfg.mode == "mean_teacher" else "student"},
        )
    return PretrainResult(state, checkpoints, metrics_path, export_path, history)


def epoch_medians(history: Sequence[dict], key: str = "loss_s") -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for m in history:
        by_epoch.setdefault(m["epoch"], []).append(m[key])
    return [float(np.median(by_epoch[e])) for e in sorted(by_epoch)]
