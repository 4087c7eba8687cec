import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevlocate.dataset import synth_raster
from bevlocate.geometry import Pose2, pixel_to_utm
from bevlocate.mapstore import label_for_pose
from bevlocate.registration import (DegenerateTemplateError, MatchResult, inscribed_square, localize,
                                    ncc_map, ncc_map_fast, peak_of, read_predictions, to_gray,
                                    write_predictions)

from oracles import ncc_loops


@pytest.fixture(scope="module")
def world():
    return synth_raster(11, 320.0)


def test_self_match_scores_one():
    rng = np.random.default_rng(0)
    t = rng.random((12, 12))
    assert ncc_map(t, t)[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert ncc_map_fast(t, t)[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert ncc_map(t, 1.0 - t)[0, 0] == pytest.approx(-1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0), st.integers(0, 10_000))
def test_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    region = rng.random((30, 30))
    tmpl = rng.random((8, 8))
    base = ncc_map(tmpl, region)
    assert np.allclose(ncc_map(a * tmpl + b, region), base, atol=1e-6)
    assert np.allclose(ncc_map_fast(tmpl, a * region + b), base, atol=1e-6)


def test_fast_matches_loop_oracle_small():
    rng = np.random.default_rng(1)
    region, tmpl = rng.random((64, 64)), rng.random((16, 16))
    ref = ncc_loops(tmpl, region)
    assert np.abs(ncc_map(tmpl, region) - ref).max() <= 1e-5
    assert np.abs(ncc_map_fast(tmpl, region) - ref).max() <= 1e-5


def test_fast_matches_reference_random_cases():
    rng = np.random.default_rng(2)
    for _ in range(50):
        h, w = rng.integers(20, 60, 2)
        th, tw = rng.integers(2, 16, 2)
        region = rng.random((h, w)) * rng.uniform(0.1, 100)
        tmpl = rng.random((th, tw))
        assert np.abs(ncc_map_fast(tmpl, region) - ncc_map(tmpl, region)).max() <= 1e-5


def test_masked_reference_matches_oracle():
    rng = np.random.default_rng(3)
    region, tmpl = rng.random((30, 30)), rng.random((10, 10))
    yy, xx = np.mgrid[:10, :10]
    disc = (yy - 4.5) ** 2 + (xx - 4.5) ** 2 <= 20
    assert np.abs(ncc_map(tmpl, region, disc) - ncc_loops(tmpl, region, disc)).max() <= 1e-10
    # a rectangular mask on the fast path crops the template
    rect = np.zeros((10, 10), bool)
    rect[2:7, 3:9] = True
    assert np.abs(ncc_map_fast(tmpl, region, rect) - ncc_loops(tmpl, region, rect)).max() <= 1e-5
    assert np.abs(ncc_map_fast(tmpl, region, disc) - ncc_loops(tmpl, region, disc)).max() <= 1e-10


def test_scores_bounded():
    rng = np.random.default_rng(4)
    for _ in range(10):
        s = ncc_map_fast(rng.random((9, 9)), rng.random((40, 40)) ** 3)
        assert s.min() >= -1.0 - 1e-9 and s.max() <= 1.0 + 1e-9


def test_flat_region_scores_zero():
    tmpl = np.random.default_rng(5).random((5, 5))
    assert np.all(ncc_map(tmpl, np.full((20, 20), 0.3)) == 0.0)
    assert np.all(ncc_map_fast(tmpl, np.full((20, 20), 0.3)) == 0.0)


def test_degenerate_template_raises():
    with pytest.raises(DegenerateTemplateError):
        ncc_map(np.ones((4, 4)), np.random.default_rng(0).random((10, 10)))
    with pytest.raises(DegenerateTemplateError):
        ncc_map_fast(np.ones((4, 4)), np.random.default_rng(0).random((10, 10)))
    with pytest.raises(ValueError):
        ncc_map(np.ones((11, 4)), np.ones((10, 10)))


def test_peak_tie_break():
    s = np.zeros((4, 5))
    s[2, 1] = s[1, 3] = s[1, 4] = 1.0
    assert peak_of(s) == (1, 3)


def test_inscribed_square():
    assert inscribed_square(224) == 158
    assert inscribed_square(64) == 45


def test_gray_conversion():
    assert to_gray(np.ones((2, 2, 3))) == pytest.approx(np.ones((2, 2)))
    g = np.arange(4.0).reshape(2, 2)
    assert np.array_equal(to_gray(g), g)


def test_localize_exact_at_north_up(world):
    # an even template centres on a pixel corner, so this truth is sampled without interpolation
    truth = Pose2(*pixel_to_utm(world.geo, 655.5, 699.5), 0.0)
    bev = label_for_pose(world, truth)
    prior = Pose2(truth.easting + 23.0, truth.northing - 31.0, 0.0)
    res = localize(bev, prior, world, extent_m=120.0)
    assert abs(res.position.easting - truth.easting) <= 1e-6
    assert abs(res.position.northing - truth.northing) <= 1e-6
    assert res.score > 0.99 and res.valid


def test_localize_off_grid_within_half_pixel_per_axis(world):
    truth = Pose2(world.geo.origin_easting + 160.0, world.geo.origin_northing - 150.0, 0.0)
    res = localize(label_for_pose(world, truth), truth, world, extent_m=120.0)
    assert abs(res.position.easting - truth.easting) <= 0.115
    assert abs(res.position.northing - truth.northing) <= 0.115


@pytest.mark.parametrize("method", ["fast", "reference"])
def test_localize_rotated(world, method):
    truth = Pose2(world.geo.origin_easting + 170.0, world.geo.origin_northing - 160.0, math.pi / 3)
    bev = label_for_pose(world, truth)
    prior = Pose2(truth.easting - 4.0, truth.northing + 3.0, truth.azimuth)
    res = localize(bev, prior, world, extent_m=70.0 if method == "reference" else 120.0, method=method)
    assert math.hypot(res.position.easting - truth.easting, res.position.northing - truth.northing) <= 0.229


def test_localize_invariant_to_bev_affine(world):
    truth = Pose2(world.geo.origin_easting + 150.0, world.geo.origin_northing - 170.0, -1.1)
    bev = label_for_pose(world, truth)
    prior = Pose2(truth.easting + 10.0, truth.northing, truth.azimuth)
    a = localize(bev, prior, world, extent_m=100.0)
    b = localize(0.5 * bev + 0.2, prior, world, extent_m=100.0)
    assert a.peak == b.peak


def test_truth_outside_region_scores_lower(world):
    truth = Pose2(world.geo.origin_easting + 160.0, world.geo.origin_northing - 160.0, 0.0)
    bev = label_for_pose(world, truth)
    # prior far enough that the true position is outside the search region
    prior = Pose2(truth.easting + 80.0, truth.northing, 0.0)
    res = localize(bev, prior, world, extent_m=60.0)
    assert res.score < 0.99


def test_prediction_csv_round_trip(tmp_path):
    rows = [(0.5, MatchResult(Pose2(10.25, 20.5, 0.0), 0.75, (3, 4), (10, 10), False)),
            (1.0, MatchResult(Pose2(11.0, 21.0, 0.0), -0.1, (0, 4), (10, 10), True))]
    write_predictions(tmp_path / "p.csv", rows)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == \
        "timestamp,pred_easting,pred_northing,peak_score,valid_flag"
    ts, e, n, s, v = read_predictions(tmp_path / "p.csv")
    assert ts.tolist() == [0.5, 1.0]
    assert e.tolist() == [10.25, 11.0] and n.tolist() == [20.5, 21.0]
    assert s.tolist() == [0.75, -0.1] and v.tolist() == [True, False]
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_predictions(tmp_path / "bad.csv")
