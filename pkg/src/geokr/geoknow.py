"""Land-cover supervision for a geolocated image.

Given the geotransform of an image, find the land-cover area that fully
encloses it, cut the matching window out of the land-cover raster, count
the classes and turn the counts into a proportion vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Optional, Sequence

import numpy as np

from .errors import NoHostingArea, NoSupportedClasses, NotLandCover, WindowOutOfBounds
from .raster import GeoBounds, GeoTransform, PathLike, RasterGrid, bounds_of, contains, read_raster


@dataclass(frozen=True)
class LandCoverClass:
    code: int
    name: str
    index: Optional[int]  # None for dropped classes

    @property
    def dropped(self) -> bool:
        return self.index is None


LAND_COVER_CLASSES = (
    LandCoverClass(10, "cultivated land", 2),
    LandCoverClass(20, "forest", 3),
    LandCoverClass(30, "grassland", 4),
    LandCoverClass(40, "shrubland", None),
    LandCoverClass(50, "wetland", 7),
    LandCoverClass(60, "water body", 6),
    LandCoverClass(70, "tundra", None),
    LandCoverClass(80, "artificial surface", 0),
    LandCoverClass(90, "bare land", 1),
    LandCoverClass(100, "permanent snow", 5),
)
CLASS_BY_CODE = {c.code: c for c in LAND_COVER_CLASSES}
ACTIVE_CLASSES = tuple(sorted((c for c in LAND_COVER_CLASSES if not c.dropped), key=lambda c: c.index))
ACTIVE_CODES = tuple(c.code for c in ACTIVE_CLASSES)
DROPPED_CODES = tuple(c.code for c in LAND_COVER_CLASSES if c.dropped)
NUM_CLASSES = len(ACTIVE_CLASSES)


def class_names() -> list[str]:
    return [c.name for c in ACTIVE_CLASSES]


@dataclass(frozen=True)
class AreaEntry:
    area_id: Hashable
    bounds: GeoBounds
    raster: Path


@dataclass
class AreaIndex:
    """Immutable list of land-cover areas; rasters are loaded on first use."""

    entries: tuple[AreaEntry, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.entries = tuple(self.entries)
        ids = [e.area_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("area ids must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, area_id) -> AreaEntry:
        for e in self.entries:
            if e.area_id == area_id:
                return e
        raise KeyError(area_id)

    def raster(self, area_id) -> RasterGrid:
        if area_id not in self._cache:
            self._cache[area_id] = read_raster(self.entry(area_id).raster)
        return self._cache[area_id]

    @classmethod
    def from_manifest(cls, path: PathLike) -> "AreaIndex":
        path = Path(path)
        rows = json.loads(path.read_text())
        entries = []
        for row in rows:
            raster = Path(row["raster"])
            if not raster.is_absolute():
                raster = path.parent / raster
            entries.append(AreaEntry(row["area_id"], GeoBounds.from_extent(row["bounds"]), raster))
        return cls(tuple(entries))

    def to_manifest(self, path: PathLike, relative_to: Optional[PathLike] = None) -> None:
        rows = []
        for e in self.entries:
            raster = e.raster
            if relative_to is not None:
                raster = Path(raster).relative_to(relative_to)
            rows.append({"area_id": e.area_id, "raster": str(raster), "bounds": e.bounds.to_extent()})
        Path(path).write_text(json.dumps(rows, indent=1) + "\n")


@dataclass(frozen=True)
class PixelWindow:
    x_left: float
    x_top: float
    x_right: float
    x_bottom: float


@dataclass
class ClassHistogram:
    counts: dict[int, int]  # code -> pixel count, for all ten land-cover codes
    invalid: int = 0  # no-data or unknown codes

    @property
    def active_total(self) -> int:
        return sum(self.counts[c] for c in ACTIVE_CODES)

    @property
    def dropped_total(self) -> int:
        return sum(self.counts[c] for c in DROPPED_CODES)

    @property
    def total(self) -> int:
        return self.active_total + self.dropped_total + self.invalid

    def nonzero(self) -> dict[int, int]:
        return {c: n for c, n in self.counts.items() if n}


@dataclass(frozen=True)
class KnowledgeRepresentation:
    """Per-class proportions in active-class index order."""

    proportions: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.proportions, dtype=np.float64)
        if p.shape != (NUM_CLASSES,):
            raise ValueError(f"expected {NUM_CLASSES} proportions, got shape {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("proportions must be nonnegative and sum to 1")
        object.__setattr__(self, "proportions", p)

    def tolist(self) -> list[float]:
        return [float(v) for v in self.proportions]


def locate_area(index: AreaIndex, image_gt: GeoTransform, size: int):
    """Return the id of an area enclosing the image; smallest id wins on overlap."""
    if len(index) == 0:
        raise ValueError("area index is empty")
    image_bounds = bounds_of(image_gt, size, size)
    hosts = [e.area_id for e in index.entries if contains(e.bounds, image_bounds)]
    if not hosts:
        raise NoHostingArea(f"no area contains image bounds {image_bounds}")
    return min(hosts)


def pixel_window(image_gt: GeoTransform, size: int, area_gt: GeoTransform) -> PixelWindow:
    x_left = (image_gt.gt0 - area_gt.gt0) / area_gt.gt1
    x_top = (image_gt.gt3 - area_gt.gt3) / area_gt.gt5
    x_right = x_left + image_gt.gt1 * size / area_gt.gt1
    x_bottom = x_top + image_gt.gt5 * size / area_gt.gt5
    return PixelWindow(x_left, x_top, x_right, x_bottom)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def extract_landcover(area: RasterGrid, window: PixelWindow) -> RasterGrid:
    """Sub-grid M over rows [top, bottom) and cols [left, right) after rounding."""
    left, right = round_half_away(window.x_left), round_half_away(window.x_right)
    top, bottom = round_half_away(window.x_top), round_half_away(window.x_bottom)
    if left < 0 or top < 0 or right > area.width or bottom > area.height or right < left or bottom < top:
        raise WindowOutOfBounds(
            f"window cols [{left}, {right}) rows [{top}, {bottom}) outside {area.width}x{area.height} grid"
        )
    return area.window(left, top, right - left, bottom - top)


def class_histogram(m: RasterGrid) -> ClassHistogram:
    if m.bands != 1:
        raise NotLandCover(f"land-cover grid must have 1 band, got {m.bands}")
    tally = np.bincount(m.values.ravel(), minlength=65536 if m.sample_type == "u16" else 256)
    counts = {c.code: int(tally[c.code]) for c in LAND_COVER_CLASSES}
    if m.nodata is not None and int(m.nodata) in counts:
        counts[int(m.nodata)] = 0
    invalid = int(m.values.size) - sum(counts.values())
    return ClassHistogram(counts, invalid)


def knowledge_representation(hist: ClassHistogram) -> KnowledgeRepresentation:
    total = hist.active_total
    if total == 0:
        raise NoSupportedClasses("no pixels of any active land-cover class")
    s = np.array([hist.counts[code] for code in ACTIVE_CODES], dtype=np.float64)
    return KnowledgeRepresentation(s / total)


def argmax_label(a: KnowledgeRepresentation | Sequence[float]) -> int:
    p = a.proportions if isinstance(a, KnowledgeRepresentation) else np.asarray(a)
    return int(np.argmax(p))  # first maximum wins


@dataclass
class Supervision:
    area_id: Hashable
    window: PixelWindow
    histogram: ClassHistogram
    representation: KnowledgeRepresentation

    @property
    def label(self) -> int:
        return argmax_label(self.representation)


def supervise(index: AreaIndex, image_gt: GeoTransform, size: int) -> Supervision:
    """Run every step of the supervision procedure, keeping intermediates."""
    area_id = locate_area(index, image_gt, size)
    area = index.raster(area_id)
    window = pixel_window(image_gt, size, area.geotransform)
    hist = class_histogram(extract_landcover(area, window))
    return Supervision(area_id, window, hist, knowledge_representation(hist))


def supervise_image(index: AreaIndex, image_gt: GeoTransform, size: int) -> KnowledgeRepresentation:
    return supervise(index, image_gt, size).representation

