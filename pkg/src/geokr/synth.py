"""Seeded synthetic scenes paired with land-cover products.

Scenes are mosaics of square cells.  Each cell has a dominant land-cover
class plus one or two secondary classes laid out in blocks; every image
pixel is rendered from the class under it (base colour, oriented sine
texture, Gaussian noise).  A fraction of cells get their dominant class
recoded in the supervision product, emulating a land-cover map that is
out of date or too coarse for the image.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geoknow
from .raster import GeoTransform, PathLike, RasterGrid, write_raster

# (R, G, B), texture angle in degrees, texture period in pixels; active-class index order
DEFAULT_CLASS_STYLES = (
    ((140, 130, 130), 0.0, 6.0),  # artificial surface
    ((150, 135, 110), 45.0, 10.0),  # bare land
    ((120, 140, 100), 90.0, 6.0),  # cultivated land
    ((95, 120, 95), 135.0, 10.0),  # forest
    ((125, 145, 105), 0.0, 14.0),  # grassland
    ((170, 170, 175), 90.0, 14.0),  # permanent snow
    ((85, 100, 130), 45.0, 6.0),  # water body
    ((105, 122, 115), 135.0, 14.0),  # wetland
)


@dataclass(frozen=True)
class SynthConfig:
    tile_size: int = 64  # cell edge, image pixels
    cells_per_side: int = 8  # scene edge in cells
    tiles_per_class: int = 250
    landcover_scale: int = 2  # image pixels per land-cover pixel
    blocks_per_side: int = 4  # composition blocks per cell edge
    dominant_blocks: tuple[int, int] = (7, 12)  # inclusive range
    class_styles: tuple = DEFAULT_CLASS_STYLES
    texture_amplitude: float = 25.0
    noise_amplitude: float = 20.0
    illumination_gain: tuple[float, float] = (0.6, 1.4)  # per-cell contrast about mid-grey
    illumination_offset: float = 30.0  # per-cell, per-channel shift bound
    label_noise_rate: float = 0.05
    label_noise: str = "swap"  # "swap": exchange dominant and largest secondary; "recode": dominant -> absent class
    scenes_per_area_side: int = 2
    origin: tuple[float, float] = (100.0, 40.0)
    resolution: float = 2.0**-13  # degrees per image pixel; a power of two keeps bounds exact

    def __post_init__(self):
        if not 0 <= self.label_noise_rate < 1:
            raise ValueError("label_noise_rate must be in [0, 1)")
        if self.label_noise not in ("swap", "recode"):
            raise ValueError(f"unknown label_noise {self.label_noise!r}")
        cell_lc = self.tile_size // self.landcover_scale
        if self.tile_size % self.landcover_scale or cell_lc % self.blocks_per_side:
            raise ValueError("tile_size must split evenly into land-cover pixels and blocks")
        lo, hi = self.dominant_blocks
        n_blocks = self.blocks_per_side**2
        if not (n_blocks / 3 < lo <= hi <= n_blocks):
            raise ValueError("dominant_blocks must leave the dominant class a strict majority of blocks")
        if len(self.class_styles) != geoknow.NUM_CLASSES:
            raise ValueError(f"need {geoknow.NUM_CLASSES} class styles")
        object.__setattr__(self, "dominant_blocks", tuple(self.dominant_blocks))
        object.__setattr__(self, "origin", tuple(self.origin))
        object.__setattr__(self, "illumination_gain", tuple(self.illumination_gain))
        object.__setattr__(self, "class_styles", tuple((tuple(c), float(a), float(p)) for c, a, p in self.class_styles))

    @property
    def scene_size(self) -> int:
        return self.tile_size * self.cells_per_side

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class SynthResult:
    root: Path
    scenes: dict[str, Path]
    areas: Path  # supervision product (with perturbed cells)
    areas_clean: Path
    cells: list[dict] = field(default_factory=list)

    @property
    def perturbed_fraction(self) -> float:
        return sum(c["perturbed"] for c in self.cells) / len(self.cells)


def _cell_layout(cfg: SynthConfig, dominant: int, rng: np.random.Generator) -> np.ndarray:
    """Active-class index per composition block, shape (blocks, blocks)."""
    n_blocks = cfg.blocks_per_side**2
    n_dom = int(rng.integers(cfg.dominant_blocks[0], cfg.dominant_blocks[1] + 1))
    others = rng.permutation([c for c in range(geoknow.NUM_CLASSES) if c != dominant])
    rest = n_blocks - n_dom
    first = math.ceil(rest / 2)
    blocks = [dominant] * n_dom + [int(others[0])] * first + [int(others[1])] * (rest - first)
    return rng.permutation(np.array(blocks)).reshape(cfg.blocks_per_side, cfg.blocks_per_side)


def _perturbed_class(cfg: SynthConfig, layout: np.ndarray, dominant: int, rng: np.random.Generator) -> int:
    """Class the dominant one is relabelled as in a perturbed cell."""
    counts = np.bincount(layout.ravel(), minlength=geoknow.NUM_CLASSES)
    if cfg.label_noise == "swap":
        counts[dominant] = -1
        return int(np.argmax(counts))  # largest secondary; ties go to the lower index
    return int(rng.choice(np.flatnonzero(counts == 0)))


def render_texture(
    cfg: SynthConfig,
    classes: np.ndarray,
    x0: int,
    y0: int,
    rng: np.random.Generator,
    gain: np.ndarray | float = 1.0,
    offset: np.ndarray | float = 0.0,
) -> np.ndarray:
    """RGB u8 (3, H, W) for a per-pixel class-index map anchored at global pixel (x0, y0).

    ``gain`` (H, W) and ``offset`` (3, H, W) model acquisition conditions.
    """
    h, w = classes.shape
    yy, xx = np.mgrid[y0 : y0 + h, x0 : x0 + w].astype(np.float64)
    colors = np.array([s[0] for s in cfg.class_styles], dtype=np.float64)
    angles = np.deg2rad([s[1] for s in cfg.class_styles])
    periods = np.array([s[2] for s in cfg.class_styles])
    theta = angles[classes]
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / periods[classes])
    img = colors[classes].transpose(2, 0, 1) + cfg.texture_amplitude * wave
    img = 128.0 + gain * (img - 128.0) + offset
    img += cfg.noise_amplitude * rng.standard_normal(img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(cfg: SynthConfig, seed: int, out_dir: PathLike) -> SynthResult:
    """Write scenes, both land-cover products and their area indexes under ``out_dir``."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    n_classes = geoknow.NUM_CLASSES
    cps = cfg.cells_per_side
    n_cells = n_classes * cfg.tiles_per_class
    n_scenes = math.ceil(n_cells / cps**2)
    dominants = np.concatenate(
        [np.repeat(np.arange(n_classes), cfg.tiles_per_class), np.arange(n_scenes * cps**2 - n_cells) % n_classes]
    )
    dominants = rng.permutation(dominants)

    lc_cell = cfg.tile_size // cfg.landcover_scale
    block = lc_cell // cfg.blocks_per_side
    codes = np.array(geoknow.ACTIVE_CODES, dtype=np.uint8)

    scene_cols = math.ceil(math.sqrt(n_scenes))
    span = cfg.scenes_per_area_side
    area_rows = math.ceil(math.ceil(n_scenes / scene_cols) / span)
    area_cols = math.ceil(scene_cols / span)
    area_lc = span * cps * lc_cell
    lc_clean = np.zeros((area_rows, area_cols, area_lc, area_lc), dtype=np.uint8)  # 0 = no data

    cells = []
    layouts = [_cell_layout(cfg, int(d), rng) for d in dominants]
    n_noisy = int(round(cfg.label_noise_rate * len(dominants)))
    noisy = set(int(i) for i in rng.choice(len(dominants), size=n_noisy, replace=False))
    lc_noisy = lc_clean.copy()

    scenes: dict[str, Path] = {}
    res = cfg.resolution
    for k in range(n_scenes):
        sr, sc = divmod(k, scene_cols)
        ar, ac = sr // span, sc // span
        scene_classes = np.zeros((cps * lc_cell, cps * lc_cell), dtype=np.int64)
        scene_noisy = np.zeros_like(scene_classes)
        for i in range(cps):
            for j in range(cps):
                c = k * cps**2 + i * cps + j
                layout = layouts[c]
                pix = np.kron(layout, np.ones((block, block), dtype=np.int64))
                scene_classes[i * lc_cell : (i + 1) * lc_cell, j * lc_cell : (j + 1) * lc_cell] = pix
                recoded = int(dominants[c])
                if c in noisy:
                    recoded = _perturbed_class(cfg, layout, int(dominants[c]), rng)
                    pix = np.where(pix == dominants[c], recoded, np.where(pix == recoded, dominants[c], pix))
                scene_noisy[i * lc_cell : (i + 1) * lc_cell, j * lc_cell : (j + 1) * lc_cell] = pix
                cells.append(
                    {
                        "scene_id": f"scene_{k:04d}",
                        "cell_row": i,
                        "cell_col": j,
                        "dominant": int(dominants[c]),
                        "supervised_dominant": recoded,
                        "perturbed": c in noisy,
                    }
                )
        r0 = (sr % span) * cps * lc_cell
        c0 = (sc % span) * cps * lc_cell
        lc_clean[ar, ac, r0 : r0 + cps * lc_cell, c0 : c0 + cps * lc_cell] = codes[scene_classes]
        lc_noisy[ar, ac, r0 : r0 + cps * lc_cell, c0 : c0 + cps * lc_cell] = codes[scene_noisy]

        px_classes = np.kron(scene_classes, np.ones((cfg.landcover_scale,) * 2, dtype=np.int64))
        x0_px, y0_px = sc * cfg.scene_size, sr * cfg.scene_size
        up = np.ones((cfg.tile_size, cfg.tile_size))
        gain = np.kron(rng.uniform(*cfg.illumination_gain, (cps, cps)), up)
        offset = np.stack(
            [np.kron(rng.uniform(-cfg.illumination_offset, cfg.illumination_offset, (cps, cps)), up) for _ in range(3)]
        )
        rgb = render_texture(cfg, px_classes, x0_px, y0_px, rng, gain, offset)
        gt = GeoTransform.north_up(cfg.origin[0] + x0_px * res, cfg.origin[1] - y0_px * res, res, res)
        sid = f"scene_{k:04d}"
        scenes[sid] = write_raster(RasterGrid(rgb, gt), out / "scenes" / sid)

    lc_res = res * cfg.landcover_scale
    area_px = span * cfg.scene_size
    products = {}
    for name, grids in (("landcover", lc_noisy), ("landcover_clean", lc_clean)):
        entries = []
        for ar in range(area_rows):
            for ac in range(area_cols):
                gt = GeoTransform.north_up(
                    cfg.origin[0] + ac * area_px * res, cfg.origin[1] - ar * area_px * res, lc_res, lc_res
                )
                grid = RasterGrid(grids[ar, ac], gt, nodata=0)
                aid = f"area_{ar:02d}_{ac:02d}"
                path = write_raster(grid, out / name / aid)
                entries.append(geoknow.AreaEntry(aid, grid.bounds, path))
        index_path = out / ("areas.json" if name == "landcover" else "areas_clean.json")
        geoknow.AreaIndex(tuple(entries)).to_manifest(index_path, relative_to=out)
        products[name] = index_path

    result = SynthResult(out, scenes, products["landcover"], products["landcover_clean"], cells)
    (out / "truth.json").write_text(
        json.dumps({"seed": seed, "config": cfg.to_dict(), "cells": cells}, indent=1, sort_keys=True) + "\n"
    )
    return result
