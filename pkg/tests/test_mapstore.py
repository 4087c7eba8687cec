import json
import math

import numpy as np
import pytest
from PIL import Image

from bevlocate.geometry import GeoTransform, Pose2, pixel_to_utm, pose_to_pixel
from bevlocate.mapstore import (GeoRaster, MapLoadError, crop_rotated, label_for_pose, load_map,
                                rotate_to_north_up, save_map, search_region)


def checkerboard(n=64, square=4):
    r, c = np.indices((n, n))
    board = ((r // square + c // square) % 2).astype(np.float32)
    return np.stack([board, 1 - board, board], axis=-1)


def raster_of(pixels, mpp=0.25):
    return GeoRaster(pixels, GeoTransform(1000.0, 2000.0, mpp))


def pose_at(raster, row, col, azimuth=0.0):
    e, n = pixel_to_utm(raster.geo, row, col)
    return Pose2(float(e), float(n), azimuth)


def test_load_spans_expected_meters(tmp_path):
    Image.fromarray(np.zeros((100, 100, 3), np.uint8)).save(tmp_path / "m.png")
    (tmp_path / "m.json").write_text(json.dumps({"origin_easting": 10.0, "origin_northing": 20.0,
                                                 "m_per_px": 0.229}))
    r = load_map(tmp_path / "m.png", tmp_path / "m.json")
    assert r.extent_m == pytest.approx((22.9, 22.9))
    assert r.pixels.min() >= 0.0 and r.pixels.max() <= 1.0


def test_load_rejects_missing_scale(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "m.png")
    (tmp_path / "m.json").write_text(json.dumps({"origin_easting": 0, "origin_northing": 0}))
    with pytest.raises(MapLoadError):
        load_map(tmp_path / "m.png", tmp_path / "m.json")


def test_load_rejects_bad_scale_and_missing_file(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "m.png")
    (tmp_path / "m.json").write_text(json.dumps({"origin_easting": 0, "origin_northing": 0, "m_per_px": -1}))
    with pytest.raises(MapLoadError):
        load_map(tmp_path / "m.png", tmp_path / "m.json")
    with pytest.raises(MapLoadError):
        load_map(tmp_path / "m.png", tmp_path / "absent.json")


def test_checkerboard_round_trip_bit_exact(tmp_path):
    raster = GeoRaster(checkerboard(), GeoTransform(500000.0, 4480000.0, 0.229))
    save_map(raster, tmp_path / "a.png", tmp_path / "a.json")
    first = load_map(tmp_path / "a.png", tmp_path / "a.json")
    save_map(first, tmp_path / "b.png", tmp_path / "b.json")
    second = load_map(tmp_path / "b.png", tmp_path / "b.json")
    assert np.array_equal(first.pixels, raster.pixels)
    assert np.array_equal(first.pixels, second.pixels)
    assert first.geo == second.geo == raster.geo
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_axis_aligned_crop_is_exact_copy():
    pixels = np.random.default_rng(0).random((80, 90, 3))
    raster = raster_of(pixels)
    for out_px in (1, 7, 31):
        h = out_px // 2
        crop = crop_rotated(raster, pose_at(raster, 40, 33), out_px)
        assert np.array_equal(crop, pixels[40 - h:40 + h + 1, 33 - h:33 + h + 1])


def test_axis_aligned_crop_at_map_resolution():
    pixels = np.random.default_rng(1).random((80, 90, 3))
    raster = raster_of(pixels, 0.229)
    crop = crop_rotated(raster, pose_at(raster, 40, 33), 21)
    assert np.abs(crop - pixels[30:51, 23:44]).max() < 1e-9


def test_half_turn_on_symmetric_pattern():
    base = np.random.default_rng(2).random((41, 41, 3))
    sym = base + base[::-1, ::-1]
    raster = raster_of(sym)
    centre = pose_at(raster, 20, 20)
    a = crop_rotated(raster, centre, 31)
    b = crop_rotated(raster, Pose2(centre.easting, centre.northing, math.pi), 31)
    assert np.abs(a - b).max() < 1e-6


def test_quarter_turn_on_checkerboard():
    raster = raster_of(checkerboard(64, 3))
    centre = pose_at(raster, 32, 30)
    axis = crop_rotated(raster, centre, 21)
    east = crop_rotated(raster, Pose2(centre.easting, centre.northing, math.pi / 2), 21)
    # heading east puts the map's east side at the top of the image
    assert np.abs(east - np.rot90(axis, k=1))[1:-1, 1:-1].max() < 1e-6


def test_crop_outside_map_is_zero():
    raster = raster_of(np.ones((10, 10, 3)))
    crop = crop_rotated(raster, pose_at(raster, 0, 0), 5)
    assert np.all(crop[:2] == 0) and np.all(crop[:, :2] == 0)
    assert np.all(crop[2:, 2:] == 1)
    with pytest.raises(ValueError):
        crop_rotated(raster, pose_at(raster, 0, 0), 0)


def test_label_delegates_to_crop():
    raster = raster_of(np.random.default_rng(3).random((300, 300, 3)), 0.229)
    pose = pose_at(raster, 150.3, 149.6, 0.8)
    assert np.array_equal(label_for_pose(raster, pose), crop_rotated(raster, pose, 224))
    assert label_for_pose(raster, pose).shape == (224, 224, 3)


@pytest.mark.parametrize("extent, size", [(200.0, 874), (100.0, 437)])
def test_search_region_size(extent, size):
    raster = raster_of(np.zeros((1000, 1000, 3), np.float32), 0.229)
    region, _ = search_region(raster, pose_at(raster, 500, 500), extent)
    assert region.shape == (size, size, 3)


def test_search_region_georeference_recovers_prior():
    rng = np.random.default_rng(4)
    raster = raster_of(rng.random((600, 600, 3)).astype(np.float32), 0.229)
    for _ in range(20):
        prior = pose_at(raster, *rng.uniform(140, 460, 2))
        region, geo = search_region(raster, prior, 60.0)
        c = (region.shape[0] - 1) / 2.0
        e, n = pixel_to_utm(geo, c, c)
        assert abs(e - prior.easting) <= 0.5 * 0.229 + 1e-9
        assert abs(n - prior.northing) <= 0.5 * 0.229 + 1e-9
        # copied pixels line up with the parent raster
        r0, c0 = pose_to_pixel(raster.geo, Pose2(geo.origin_easting, geo.origin_northing))
        r0, c0 = round(r0), round(c0)
        assert np.array_equal(region, raster.pixels[r0:r0 + region.shape[0], c0:c0 + region.shape[1]])


def test_search_region_zero_fill_outside():
    raster = raster_of(np.ones((100, 100, 3), np.float32))
    region, _ = search_region(raster, pose_at(raster, 2, 2), 10.0)
    assert region.shape == (40, 40, 3)
    assert region[0, 0].sum() == 0 and region[-1, -1].sum() == 3


def test_north_up_inverts_heading_up():
    raster = raster_of(checkerboard(64, 3))
    centre = pose_at(raster, 32, 30)
    axis = crop_rotated(raster, centre, 21)
    for az in (math.pi / 2, -math.pi / 2, -math.pi):
        heading_up = crop_rotated(raster, Pose2(centre.easting, centre.northing, az), 21)
        north_up, valid = rotate_to_north_up(heading_up, az)
        assert valid.all()
        assert np.abs(north_up - axis)[1:-1, 1:-1].max() < 1e-6


def test_north_up_mask_covers_inscribed_disc():
    img = np.random.default_rng(5).random((64, 64))
    out, valid = rotate_to_north_up(img, 0.7)
    n = 64
    r, c = np.indices((n, n)) - (n - 1) / 2.0
    assert valid[np.hypot(r, c) <= (n - 1) / 2.0].all()
    assert not valid[0, 0]
    assert np.all(out[~valid] == 0)
