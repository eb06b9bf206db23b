import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geokr import synth
from geokr.errors import SceneTooSmall, WrongBandCount
from geokr.geoknow import AreaEntry, AreaIndex
from geokr.ingest import (
    IngestConfig,
    balance_classes,
    build_manifest,
    cloud_ratio,
    duplication_factors,
    is_low_contrast,
    read_manifest,
    tile_scene,
)
from geokr.raster import GeoTransform, RasterGrid, write_raster

GT = GeoTransform(100, 0.001, 0, 50, 0, -0.001)


def scene(h, w, fill=0):
    return RasterGrid(np.full((3, h, w), fill, dtype=np.uint8), GT)


# tiling


def test_single_tile():
    tiles = tile_scene(scene(256, 256), IngestConfig())
    assert [t.offset for t in tiles] == [(0, 0)]


def test_stride_floor_and_edge_clamp():
    cfg = IngestConfig()
    assert cfg.stride == 204
    tiles = tile_scene(scene(256, 460), cfg)
    assert [t.offset for t in tiles] == [(0, 0), (204, 0)]
    assert tiles[1].geotransform == GT.translated(204, 0)


def test_zero_overlap_is_disjoint():
    cfg = IngestConfig(tile_size=64, overlap_rate=0)
    tiles = tile_scene(scene(128, 192), cfg)
    assert [t.offset for t in tiles] == [(c, r) for r in (0, 64) for c in (0, 64, 128)]
    assert [(t.tile_row, t.tile_col) for t in tiles][:4] == [(0, 0), (0, 1), (0, 2), (1, 0)]


def test_scene_too_small():
    with pytest.raises(SceneTooSmall):
        tile_scene(scene(100, 300), IngestConfig())


@settings(max_examples=100)
@given(st.integers(8, 40), st.floats(0, 0.9), st.integers(0, 60), st.integers(0, 60))
def test_tiles_cover_scene_and_stay_inside(size, overlap, extra_h, extra_w):
    h, w = size + extra_h, size + extra_w
    cfg = IngestConfig(tile_size=size, overlap_rate=overlap)
    covered = np.zeros((h, w), dtype=bool)
    for t in tile_scene(scene(h, w), cfg):
        c, r = t.offset
        assert 0 <= c and c + size <= w and 0 <= r and r + size <= h
        covered[r : r + size, c : c + size] = True
    assert covered.all()


# cloud test


def test_cloud_extremes():
    assert cloud_ratio(scene(10, 10, 0)) == 0.0
    assert cloud_ratio(scene(10, 10, 255), 230) == 1.0


def test_cloud_sixty_percent_white():
    tile = np.zeros((3, 10, 10), dtype=np.uint8)
    tile[:, :6, :] = 255
    assert cloud_ratio(tile, 230) == 0.6


def test_cloud_needs_every_channel_bright():
    tile = np.full((3, 4, 4), 255, dtype=np.uint8)
    tile[2, :2] = 230  # not strictly above the threshold
    assert cloud_ratio(tile, 230) == 0.5


def test_cloud_band_count():
    with pytest.raises(WrongBandCount):
        cloud_ratio(np.zeros((1, 4, 4), dtype=np.uint8))


@given(st.integers(0, 10_000), st.integers(0, 254), st.integers(0, 254))
def test_cloud_ratio_range_and_monotone(seed, t1, t2):
    tile = np.random.default_rng(seed).integers(0, 256, (3, 8, 8)).astype(np.uint8)
    lo, hi = sorted((t1, t2))
    brute = np.mean([all(tile[:, i, j] > lo) for i in range(8) for j in range(8)])
    assert cloud_ratio(tile, lo) == brute
    assert 0 <= cloud_ratio(tile, hi) <= cloud_ratio(tile, lo) <= 1


# low contrast


def test_low_contrast_constant():
    assert is_low_contrast(scene(16, 16, 77))


def test_full_range_not_low_contrast():
    ramp = np.broadcast_to(np.arange(256, dtype=np.uint8), (3, 256, 256))
    assert not is_low_contrast(ramp)


def test_narrow_band_low_contrast():
    values = np.random.default_rng(0).integers(120, 131, (3, 64, 64)).astype(np.uint8)
    values[:, 0, 0], values[:, 0, 1] = 120, 130  # pin the extremes
    lum = values.mean(axis=0)
    spread = (np.percentile(lum, 99) - np.percentile(lum, 1)) / 255
    assert spread < 10 / 255 < 0.05
    assert is_low_contrast(values)


def test_low_contrast_u16_range():
    values = np.zeros((3, 10, 10), dtype=np.uint16)
    values[:, :5] = 3000  # spread 3000/65535 < 0.05
    assert is_low_contrast(values)
    values[:, :5] = 4000
    assert not is_low_contrast(values)


# balancing


def test_duplication_factors():
    assert duplication_factors({0: 100, 1: 100}) == {0: 1, 1: 1}
    assert duplication_factors({0: 100, 1: 25}) == {0: 1, 1: 4}
    assert duplication_factors({0: 10000, 1: 10}, cap=50) == {0: 1, 1: 50}
    assert duplication_factors({0: 10000, 1: 10}, cap=0) == {0: 1, 1: 1000}
    assert duplication_factors({0: 100, 1: 40}) == {0: 1, 1: 3}  # 2.5 rounds up


@given(st.dictionaries(st.integers(0, 7), st.integers(1, 5000), min_size=1))
def test_balancing_rounding_bound(counts):
    biggest = max(counts.values())
    for label, f in duplication_factors(counts, cap=50).items():
        n = counts[label]
        assert f >= 1
        if f < 50:
            assert abs(f * n - biggest) <= n / 2


# manifest building on synthetic data


@pytest.fixture(scope="module")
def small_synth(tmp_path_factory):
    cfg = synth.SynthConfig(tile_size=32, cells_per_side=4, tiles_per_class=4)
    return synth.synth_generate(cfg, 3, tmp_path_factory.mktemp("synth"))


def test_clean_scene_keeps_every_tile(small_synth, tmp_path):
    cfg = IngestConfig(tile_size=32, overlap_rate=0)
    summary = build_manifest(small_synth.scenes, small_synth.areas_clean, cfg, tmp_path / "m.jsonl")
    assert summary["kept"] == 32 and sum(summary["discarded"].values()) == 0
    records = read_manifest(tmp_path / "m.jsonl")
    assert [r.key() for r in records] == sorted(r.key() for r in records)
    truth = {(c["scene_id"], c["cell_row"], c["cell_col"]): c["dominant"] for c in small_synth.cells}
    assert all(truth[r.key()] == r.label for r in records)
    row = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert sorted(row) == sorted(
        ["scene_id", "tile_row", "tile_col", "offset", "geotransform", "representation", "label", "cloud_ratio", "low_contrast", "dup_factor"]
    )
    assert sum(c["number"] for c in summary["classes"]) == 32


def test_kept_tiles_pass_filters(small_synth, tmp_path):
    cfg = IngestConfig(tile_size=32)
    build_manifest(small_synth.scenes, small_synth.areas, cfg, tmp_path / "m.jsonl")
    for r in read_manifest(tmp_path / "m.jsonl"):
        assert r.cloud_ratio <= 0.5 and not r.low_contrast


def test_white_region_is_discarded_as_cloud(tmp_path):
    values = np.random.default_rng(0).integers(0, 200, (3, 64, 128)).astype(np.uint8)
    values[:, :, 64:] = 255
    gt = GeoTransform(0, 1, 0, 64, 0, -1)
    path = write_raster(RasterGrid(values, gt), tmp_path / "scenes" / "s0")
    lc = RasterGrid(np.full((64, 128), 10, dtype=np.uint8), gt)
    area = AreaIndex((AreaEntry("a", lc.bounds, write_raster(lc, tmp_path / "lc")),))
    summary = build_manifest({"s0": path}, area, IngestConfig(tile_size=64, overlap_rate=0), tmp_path / "m.jsonl")
    assert summary["kept"] == 1 and summary["discarded"]["cloud"] == 1


def test_failing_scene_does_not_abort(small_synth, tmp_path):
    scenes = dict(small_synth.scenes)
    bad = tmp_path / "broken.rhdr"
    bad.write_text("{nope")
    scenes["broken"] = bad
    summary = build_manifest(scenes, small_synth.areas, IngestConfig(tile_size=32, overlap_rate=0), tmp_path / "m.jsonl")
    assert "broken" in summary["failed_scenes"] and summary["kept"] == 32


def test_manifest_deterministic_across_runs_and_workers(small_synth, tmp_path):
    cfg = IngestConfig(tile_size=32)
    outputs = []
    for n, workers in enumerate((1, 1, 3)):
        build_manifest(small_synth.scenes, small_synth.areas, cfg, tmp_path / f"r{n}" / "m.jsonl", workers=workers)
        outputs.append((tmp_path / f"r{n}" / "m.jsonl").read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


def test_balance_sets_factors_without_copying(small_synth, tmp_path):
    build_manifest(small_synth.scenes, small_synth.areas, IngestConfig(tile_size=32, overlap_rate=0), tmp_path / "m.jsonl")
    records = read_manifest(tmp_path / "m.jsonl")
    again = balance_classes(records)
    assert len(again) == len(records)
    assert [r.dup_factor for r in again] == [r.dup_factor for r in records]
