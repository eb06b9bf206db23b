"""Scene tiling, cloud / contrast filtering and manifest construction."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import geoknow
from .errors import GeoKRError, SceneTooSmall, WrongBandCount
from .raster import GeoTransform, PathLike, RasterGrid, read_raster

log = logging.getLogger(__name__)

DISCARD_REASONS = ("cloud", "low_contrast", "supervision")


@dataclass(frozen=True)
class IngestConfig:
    tile_size: int = 256
    overlap_rate: float = 0.2
    cloud_threshold: int = 230
    cloud_discard_ratio: float = 0.5
    contrast_percentiles: tuple[float, float] = (1.0, 99.0)
    contrast_fraction_threshold: float = 0.05
    max_duplication_factor: int = 50  # 0 disables the cap

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")
        if not 0 <= self.overlap_rate < 1:
            raise ValueError("overlap_rate must be in [0, 1)")
        if not 0 < self.cloud_discard_ratio <= 1:
            raise ValueError("cloud_discard_ratio must be in (0, 1]")
        object.__setattr__(self, "contrast_percentiles", tuple(self.contrast_percentiles))

    @property
    def stride(self) -> int:
        return max(1, math.floor(self.tile_size * (1 - self.overlap_rate)))


@dataclass(frozen=True)
class TileWindow:
    tile_row: int
    tile_col: int
    offset: tuple[int, int]  # (col, row) in the scene
    geotransform: GeoTransform


@dataclass(frozen=True)
class TileRecord:
    scene_id: str
    tile_row: int
    tile_col: int
    offset: tuple[int, int]
    geotransform: GeoTransform
    representation: tuple[float, ...]
    label: int
    cloud_ratio: float
    low_contrast: bool
    dup_factor: int = 1

    def key(self) -> tuple[str, int, int]:
        return self.scene_id, self.tile_row, self.tile_col

    def to_json(self) -> str:
        return json.dumps(
            {
                "scene_id": self.scene_id,
                "tile_row": self.tile_row,
                "tile_col": self.tile_col,
                "offset": list(self.offset),
                "geotransform": self.geotransform.to_list(),
                "representation": list(self.representation),
                "label": self.label,
                "cloud_ratio": self.cloud_ratio,
                "low_contrast": self.low_contrast,
                "dup_factor": self.dup_factor,
            }
        )

    @classmethod
    def from_dict(cls, row: dict) -> "TileRecord":
        return cls(
            scene_id=row["scene_id"],
            tile_row=int(row["tile_row"]),
            tile_col=int(row["tile_col"]),
            offset=tuple(row["offset"]),
            geotransform=GeoTransform.from_sequence(row["geotransform"]),
            representation=tuple(float(v) for v in row["representation"]),
            label=int(row["label"]),
            cloud_ratio=float(row["cloud_ratio"]),
            low_contrast=bool(row["low_contrast"]),
            dup_factor=int(row["dup_factor"]),
        )


def _starts(extent: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, extent - tile + 1, stride))
    if starts[-1] != extent - tile:
        starts.append(extent - tile)
    return starts


def tile_scene(scene: RasterGrid, cfg: IngestConfig) -> list[TileWindow]:
    """Row-major tile windows; the last row and column are clamped to the scene edge."""
    ts = cfg.tile_size
    if scene.width < ts or scene.height < ts:
        raise SceneTooSmall(f"scene {scene.width}x{scene.height} smaller than tile size {ts}")
    rows = _starts(scene.height, ts, cfg.stride)
    cols = _starts(scene.width, ts, cfg.stride)
    return [
        TileWindow(i, j, (c, r), scene.geotransform.translated(c, r))
        for i, r in enumerate(rows)
        for j, c in enumerate(cols)
    ]


def cloud_ratio(tile: RasterGrid | np.ndarray, t: int = 230) -> float:
    """Fraction of pixels whose darkest channel is still brighter than ``t``."""
    values = tile.values if isinstance(tile, RasterGrid) else np.asarray(tile)
    if values.ndim != 3 or values.shape[0] != 3:
        raise WrongBandCount(f"cloud test needs a 3-band tile, got shape {values.shape}")
    n = values.shape[1] * values.shape[2]
    if n == 0:
        return 0.0
    return int(np.count_nonzero(values.min(axis=0) > t)) / n


def _value_range(dtype) -> float:
    info = np.iinfo(dtype)
    return float(info.max - info.min)


def is_low_contrast(tile: RasterGrid | np.ndarray, cfg: IngestConfig = IngestConfig()) -> bool:
    values = tile.values if isinstance(tile, RasterGrid) else np.asarray(tile)
    if values.size == 0:
        raise ValueError("empty tile")
    if values.ndim == 2:
        values = values[np.newaxis]
    luminance = values.mean(axis=0, dtype=np.float64)
    lo, hi = np.percentile(luminance, cfg.contrast_percentiles)
    return bool((hi - lo) / _value_range(values.dtype) < cfg.contrast_fraction_threshold)


def duplication_factors(label_counts: dict[int, int], cap: int = 50) -> dict[int, int]:
    if not label_counts:
        return {}
    biggest = max(label_counts.values())
    factors = {}
    for label, n in label_counts.items():
        f = max(1, math.floor(biggest / n + 0.5))
        factors[label] = min(cap, f) if cap > 0 else f
    return factors


def balance_classes(records: Sequence[TileRecord], cap: int = 50) -> list[TileRecord]:
    """Annotate each record with its class's duplication factor; nothing is copied."""
    counts: dict[int, int] = {}
    for r in records:
        counts[r.label] = counts.get(r.label, 0) + 1
    factors = duplication_factors(counts, cap)
    return [replace(r, dup_factor=factors[r.label]) for r in records]


@dataclass
class SceneResult:
    scene_id: str
    records: list[TileRecord]
    discarded: dict[str, int]
    error: Optional[str] = None


def process_scene(scene_id: str, scene_path: str, area_index: geoknow.AreaIndex, cfg: IngestConfig) -> SceneResult:
    discarded = dict.fromkeys(DISCARD_REASONS, 0)
    try:
        scene = read_raster(scene_path)
        if scene.bands != 3:
            raise WrongBandCount(f"scene {scene_id} has {scene.bands} bands, expected 3")
        windows = tile_scene(scene, cfg)
    except (GeoKRError, OSError) as exc:
        return SceneResult(scene_id, [], discarded, f"{type(exc).__name__}: {exc}")

    records = []
    ts = cfg.tile_size
    for w in windows:
        col, row = w.offset
        values = scene.values[:, row : row + ts, col : col + ts]
        rc = cloud_ratio(values, cfg.cloud_threshold)
        if rc > cfg.cloud_discard_ratio:
            discarded["cloud"] += 1
            continue
        if is_low_contrast(values, cfg):
            discarded["low_contrast"] += 1
            continue
        try:
            rep = geoknow.supervise_image(area_index, w.geotransform, ts)
        except GeoKRError as exc:
            log.debug("scene %s tile (%d, %d): %s", scene_id, w.tile_row, w.tile_col, exc)
            discarded["supervision"] += 1
            continue
        records.append(
            TileRecord(
                scene_id,
                w.tile_row,
                w.tile_col,
                w.offset,
                w.geotransform,
                tuple(rep.tolist()),
                geoknow.argmax_label(rep),
                rc,
                False,
            )
        )
    return SceneResult(scene_id, records, discarded)


def _process_args(args):
    return process_scene(*args)


def scene_id_of(path: PathLike) -> str:
    name = Path(path).name
    for suffix in (".rhdr", ".rblob"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def find_scenes(paths: Iterable[PathLike]) -> dict[str, Path]:
    """Map scene id -> header path; directories are searched for ``*.rhdr``."""
    found: dict[str, Path] = {}
    for p in paths:
        p = Path(p)
        headers = sorted(p.glob("*.rhdr")) if p.is_dir() else [p]
        for h in headers:
            sid = scene_id_of(h)
            if sid in found:
                raise ValueError(f"duplicate scene id {sid!r}")
            found[sid] = h
    return found


def build_manifest(
    scenes: dict[str, PathLike] | Iterable[PathLike],
    area_index: geoknow.AreaIndex | PathLike,
    cfg: IngestConfig,
    out_path: PathLike,
    workers: int = 1,
) -> dict:
    """Write the tile manifest (JSON lines) and return the summary dict.

    The summary is also written next to the manifest as ``summary.json``.
    """
    if not isinstance(scenes, dict):
        scenes = find_scenes(scenes)
    if not isinstance(area_index, geoknow.AreaIndex):
        area_index = geoknow.AreaIndex.from_manifest(area_index)
    jobs = [(sid, str(scenes[sid]), area_index, cfg) for sid in sorted(scenes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_process_args, jobs))
    else:
        results = [_process_args(j) for j in jobs]

    records: list[TileRecord] = []
    discarded = dict.fromkeys(DISCARD_REASONS, 0)
    failed = {}
    for res in results:
        if res.error is not None:
            log.warning("skipping scene %s: %s", res.scene_id, res.error)
            failed[res.scene_id] = res.error
        records.extend(res.records)
        for k, n in res.discarded.items():
            discarded[k] += n
    records.sort(key=TileRecord.key)
    records = balance_classes(records, cfg.max_duplication_factor)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")

    summary = summarize(records, discarded, failed)
    summary["config"] = asdict(cfg)
    summary["scenes"] = {sid: str(scenes[sid]) for sid in sorted(scenes)}
    (out_path.parent / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def summarize(records: Sequence[TileRecord], discarded: dict[str, int], failed: dict[str, str]) -> dict:
    n = len(records)
    classes = []
    for cls in geoknow.ACTIVE_CLASSES:
        count = sum(1 for r in records if r.label == cls.index)
        dup = next((r.dup_factor for r in records if r.label == cls.index), 0)
        classes.append(
            {
                "index": cls.index,
                "name": cls.name,
                "number": count,
                "ratio": count / n if n else 0.0,
                "dup_factor": dup,
            }
        )
    return {
        "kept": n,
        "discarded": dict(discarded),
        "failed_scenes": dict(failed),
        "classes": classes,
    }


def read_manifest(path: PathLike) -> list[TileRecord]:
    with open(path) as fh:
        return [TileRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
