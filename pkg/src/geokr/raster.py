"""Raster container, geotransform algebra and bounds containment.

A raster lives in two files: ``<name>.rhdr`` (JSON header) and
``<name>.rblob`` (little-endian samples, band-sequential, row-major
within each band).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .errors import MalformedHeader, SizeMismatch, UnsupportedSampleType

PathLike = Union[str, os.PathLike]

SAMPLE_TYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2")}
CRS_TAG = "WGS-84"
HEADER_SUFFIX = ".rhdr"
BLOB_SUFFIX = ".rblob"


@dataclass(frozen=True)
class GeoTransform:
    """Six-term pixel-to-geographic affine map (north-up, no rotation)."""

    gt0: float
    gt1: float
    gt2: float
    gt3: float
    gt4: float
    gt5: float

    def __post_init__(self):
        for name in ("gt0", "gt1", "gt2", "gt3", "gt4", "gt5"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.gt2 != 0 or self.gt4 != 0:
            raise ValueError("rotated geotransforms are not supported")
        if self.gt1 == 0 or self.gt5 == 0:
            raise ValueError("pixel resolution terms must be nonzero")

    @classmethod
    def from_sequence(cls, seq: Sequence[float]) -> "GeoTransform":
        if len(seq) != 6:
            raise ValueError(f"geotransform needs 6 terms, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @classmethod
    def north_up(cls, x0: float, y0: float, xres: float, yres: float) -> "GeoTransform":
        """Upper-left corner at (x0, y0); ``yres`` is the positive pixel height."""
        return cls(float(x0), float(xres), 0.0, float(y0), 0.0, -float(yres))

    def __iter__(self) -> Iterator[float]:
        return iter((self.gt0, self.gt1, self.gt2, self.gt3, self.gt4, self.gt5))

    def __getitem__(self, i: int) -> float:
        return tuple(self)[i]

    def to_list(self) -> list[float]:
        return list(self)

    def translated(self, col: float, row: float) -> "GeoTransform":
        """Geotransform of a sub-grid whose upper-left pixel is (col, row)."""
        x, y = forward_map(self, col, row)
        return GeoTransform(x, self.gt1, 0.0, y, 0.0, self.gt5)


@dataclass(frozen=True)
class GeoBounds:
    min_x: float
    max_x: float
    min_y: float
    max_y: float

    def __post_init__(self):
        for name in ("min_x", "max_x", "min_y", "max_y"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise ValueError(f"degenerate bounds {self}")

    @classmethod
    def from_extent(cls, seq: Sequence[float]) -> "GeoBounds":
        """Build from ``[min_x, min_y, max_x, max_y]`` (manifest order)."""
        min_x, min_y, max_x, max_y = (float(v) for v in seq)
        return cls(min_x, max_x, min_y, max_y)

    def to_extent(self) -> list[float]:
        return [self.min_x, self.min_y, self.max_x, self.max_y]


def forward_map(gt: GeoTransform, col: float, row: float) -> tuple[float, float]:
    """Geographic coordinate of the upper-left corner of pixel (col, row)."""
    return gt.gt0 + col * gt.gt1, gt.gt3 + row * gt.gt5


def inverse_map(gt: GeoTransform, x: float, y: float) -> tuple[float, float]:
    """Fractional (col, row) of geographic point (x, y)."""
    return (x - gt.gt0) / gt.gt1, (y - gt.gt3) / gt.gt5


def bounds_of(gt: GeoTransform, width: int, height: int) -> GeoBounds:
    if width <= 0 or height <= 0:
        raise ValueError(f"width and height must be positive, got {width}x{height}")
    x0, y0 = forward_map(gt, 0, 0)
    x1, y1 = forward_map(gt, width, height)
    return GeoBounds(min(x0, x1), max(x0, x1), min(y0, y1), max(y0, y1))


def contains(outer: GeoBounds, inner: GeoBounds) -> bool:
    """True iff ``inner`` lies within ``outer``; touching edges count as inside."""
    return (
        outer.min_x <= inner.min_x
        and inner.max_x <= outer.max_x
        and outer.min_y <= inner.min_y
        and inner.max_y <= outer.max_y
    )


def _sample_type_of(dtype: np.dtype) -> str:
    for name, dt in SAMPLE_TYPES.items():
        if np.dtype(dtype).newbyteorder("<") == dt:
            return name
    raise UnsupportedSampleType(f"no container sample type for dtype {dtype}")


@dataclass(eq=False)
class RasterGrid:
    """A geolocated raster; ``values`` has shape (bands, height, width)."""

    values: np.ndarray
    geotransform: GeoTransform
    nodata: Optional[float] = None
    crs_tag: str = CRS_TAG
    sample_type: str = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[np.newaxis]
        if values.ndim != 3:
            raise ValueError(f"values must be (bands, height, width), got shape {values.shape}")
        self.sample_type = _sample_type_of(values.dtype)
        self.values = values

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def bounds(self) -> GeoBounds:
        return bounds_of(self.geotransform, self.width, self.height)

    def window(self, col: int, row: int, width: int, height: int) -> "RasterGrid":
        """Integer sub-grid with its geotransform translated accordingly."""
        sub = self.values[:, row : row + height, col : col + width]
        return RasterGrid(sub, self.geotransform.translated(col, row), self.nodata, self.crs_tag)

    def header(self) -> dict:
        hdr = {
            "width": self.width,
            "height": self.height,
            "bands": self.bands,
            "sample_type": self.sample_type,
            "geotransform": self.geotransform.to_list(),
            "crs": self.crs_tag,
        }
        if self.nodata is not None:
            hdr["nodata"] = self.nodata
        return hdr

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (
            self.header() == other.header()
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )


def _stem(path: PathLike) -> Path:
    path = Path(path)
    if path.suffix in (HEADER_SUFFIX, BLOB_SUFFIX):
        return path.with_suffix("")
    return path


def raster_paths(path: PathLike) -> tuple[Path, Path]:
    """Header and blob paths for a raster given either file or the bare stem."""
    stem = _stem(path)
    return stem.with_name(stem.name + HEADER_SUFFIX), stem.with_name(stem.name + BLOB_SUFFIX)


def _parse_header(text: str) -> dict:
    try:
        hdr = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(hdr, dict):
        raise MalformedHeader("header must be a JSON object")
    for key in ("width", "height", "bands", "sample_type", "geotransform"):
        if key not in hdr:
            raise MalformedHeader(f"header missing key {key!r}")
    for key in ("width", "height", "bands"):
        if not isinstance(hdr[key], int) or isinstance(hdr[key], bool) or hdr[key] < 0:
            raise MalformedHeader(f"header key {key!r} must be a non-negative integer")
    if hdr["sample_type"] not in SAMPLE_TYPES:
        raise UnsupportedSampleType(f"sample_type {hdr['sample_type']!r} not in {sorted(SAMPLE_TYPES)}")
    gt = hdr["geotransform"]
    if not isinstance(gt, list) or len(gt) != 6 or not all(isinstance(v, (int, float)) for v in gt):
        raise MalformedHeader("geotransform must be an array of 6 numbers")
    if hdr.get("crs", CRS_TAG) != CRS_TAG:
        raise MalformedHeader(f"unsupported crs {hdr['crs']!r}")
    return hdr


def read_raster(path: PathLike) -> RasterGrid:
    hdr_path, blob_path = raster_paths(path)
    hdr = _parse_header(hdr_path.read_text())
    try:
        geotransform = GeoTransform.from_sequence(hdr["geotransform"])
    except ValueError as exc:
        raise MalformedHeader(str(exc)) from exc
    dtype = SAMPLE_TYPES[hdr["sample_type"]]
    shape = (hdr["bands"], hdr["height"], hdr["width"])
    blob = blob_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(blob) != expected:
        raise SizeMismatch(f"{blob_path}: blob has {len(blob)} bytes, header implies {expected}")
    values = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
    return RasterGrid(values, geotransform, hdr.get("nodata"), hdr.get("crs", CRS_TAG))


def write_raster(grid: RasterGrid, path: PathLike) -> Path:
    """Write ``grid``; returns the header path."""
    hdr_path, blob_path = raster_paths(path)
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    dtype = SAMPLE_TYPES[grid.sample_type]
    blob_path.write_bytes(np.ascontiguousarray(grid.values, dtype=dtype).tobytes())
    hdr_path.write_text(json.dumps(grid.header(), sort_keys=True) + "\n")
    return hdr_path
