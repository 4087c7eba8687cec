"""NCC template matching of rendered BEV images against aerial search regions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import GeoTransform, Pose2, pixel_to_utm
from .mapstore import GeoRaster, rotate_to_north_up, search_region

# per-pixel window variance at or below this is treated as zero variance
ZERO_VAR = 1e-12
LUMA = np.array([0.299, 0.587, 0.114])
CSV_HEADER = ("timestamp", "pred_easting", "pred_northing", "peak_score", "valid_flag")


class DegenerateTemplateError(ValueError):
    pass


def to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image.astype(np.float64)
    return np.asarray(image, dtype=np.float64)[..., :3] @ LUMA


def _template_stats(template, mask):
    vals = template[mask]
    if vals.size < 2 or np.ptp(vals) == 0:
        raise DegenerateTemplateError("template needs at least two distinct valid values")
    tz = np.where(mask, template - vals.mean(), 0.0)
    return tz, math.sqrt(float((tz[mask] ** 2).sum())), int(mask.sum())


def ncc_map(template, region, mask=None) -> np.ndarray:
    """Brute-force zero-normalized cross-correlation over every valid placement.

    Statistics use only template pixels where `mask` is True. Windows with
    zero variance score 0. Output shape is (R - t + 1, C - t + 1).
    """
    template = np.asarray(template, dtype=np.float64)
    region = np.asarray(region, dtype=np.float64)
    if template.shape[0] > region.shape[0] or template.shape[1] > region.shape[1]:
        raise ValueError("template larger than region")
    mask = np.ones(template.shape, bool) if mask is None else np.asarray(mask, bool)
    tz, tnorm, n = _template_stats(template, mask)
    tv = tz[mask]
    windows = sliding_window_view(region, template.shape)
    out = np.zeros(windows.shape[:2])
    for r in range(windows.shape[0]):
        w = windows[r][:, mask]  # (cols, n)
        wz = w - w.mean(axis=1, keepdims=True)
        ss = (wz ** 2).sum(axis=1)
        num = wz @ tv
        ok = ss > ZERO_VAR * n
        out[r] = np.where(ok, num / (np.sqrt(np.where(ok, ss, 1.0)) * tnorm), 0.0)
    return out


def _box_sums(img, th, tw):
    s = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    s[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    return s[th:, tw:] - s[:-th, tw:] - s[th:, :-tw] + s[:-th, :-tw]


def _rect_bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    if not mask[r0:r1, c0:c1].all():
        return None
    return r0, r1, c0, c1


def ncc_map_fast(template, region, mask=None, workers: int | None = None) -> np.ndarray:
    """Same scores as `ncc_map`, via FFT correlation and integral-image window sums.

    A mask that is a filled rectangle is handled by cropping the template;
    any other mask falls back to `ncc_map`.
    """
    template = np.asarray(template, dtype=np.float64)
    region = np.asarray(region, dtype=np.float64)
    th0, tw0 = template.shape
    if th0 > region.shape[0] or tw0 > region.shape[1]:
        raise ValueError("template larger than region")
    r_off = c_off = 0
    if mask is not None:
        mask = np.asarray(mask, bool)
        if not mask.all():
            box = _rect_bbox(mask)
            if box is None:
                return ncc_map(template, region, mask)
            r_off, r1, c_off, c1 = box
            template = template[r_off:r1, c_off:c1]
    th, tw = template.shape
    n = th * tw
    tz, tnorm, _ = _template_stats(template, np.ones(template.shape, bool))
    # centering the region keeps the integral images small
    reg = region - region.mean()
    out_h = region.shape[0] - th + 1
    out_w = region.shape[1] - tw + 1
    shape = (sfft.next_fast_len(region.shape[0], True), sfft.next_fast_len(region.shape[1], True))
    fr = sfft.rfft2(reg, shape, workers=workers)
    ft = sfft.rfft2(tz[::-1, ::-1], shape, workers=workers)
    full = sfft.irfft2(fr * ft, shape, workers=workers)
    num = full[th - 1:th - 1 + out_h, tw - 1:tw - 1 + out_w]
    s1 = _box_sums(reg, th, tw)
    s2 = _box_sums(reg * reg, th, tw)
    ss = np.maximum(s2 - s1 * s1 / n, 0.0)
    ok = ss > ZERO_VAR * n
    scores = np.where(ok, num / (np.sqrt(np.where(ok, ss, 1.0)) * tnorm), 0.0)
    if r_off or c_off or scores.shape != (region.shape[0] - th0 + 1, region.shape[1] - tw0 + 1):
        scores = scores[r_off:r_off + region.shape[0] - th0 + 1, c_off:c_off + region.shape[1] - tw0 + 1]
    return scores


def inscribed_square(size: int) -> int:
    """Side of the axis-aligned square that stays valid under any rotation (224 -> 158)."""
    return int(math.floor(size / math.sqrt(2.0)))


@dataclass(frozen=True)
class MatchResult:
    position: Pose2  # azimuth copied from the prior
    score: float
    peak: tuple[int, int]
    map_shape: tuple[int, int]
    on_border: bool

    @property
    def valid(self) -> bool:
        return not self.on_border


def peak_of(scores: np.ndarray) -> tuple[int, int]:
    """Argmax with ties broken by smallest row, then smallest column."""
    idx = int(np.argmax(scores))
    return divmod(idx, scores.shape[1])


def match_template(template, template_mask, region, region_geo: GeoTransform, prior: Pose2,
                   method: str = "fast", workers: int | None = None) -> MatchResult:
    t = template.shape[0]
    if method == "fast":
        side = inscribed_square(t)
        o = (t - side) // 2
        tmpl = template[o:o + side, o:o + side]
        scores = ncc_map_fast(tmpl, region, workers=workers)
        # scores index the crop's top-left corner, whose centre is the template's
        centre = (side - 1) / 2.0
    elif method == "reference":
        scores = ncc_map(template, region, template_mask)
        centre = (t - 1) / 2.0
    else:
        raise ValueError(f"unknown match method {method!r}")
    r, c = peak_of(scores)
    e, n = pixel_to_utm(region_geo, r + centre, c + centre)
    border = r in (0, scores.shape[0] - 1) or c in (0, scores.shape[1] - 1)
    return MatchResult(Pose2(float(e), float(n), prior.azimuth), float(scores[r, c]), (r, c),
                       scores.shape, border)


def localize(bev_rgb: np.ndarray, prior: Pose2, raster: GeoRaster, extent_m: float = 200.0,
             method: str = "fast", workers: int | None = None) -> MatchResult:
    """Register a heading-up BEV image (H, W, 3) against the map around `prior`.

    The BEV image must share the map's meters-per-pixel.
    """
    gray = to_gray(bev_rgb)
    template, valid = rotate_to_north_up(gray, prior.azimuth)
    region, geo = search_region(raster, prior, extent_m)
    return match_template(template, valid, to_gray(region), geo, prior, method, workers)


def write_predictions(path, rows):
    """rows: iterable of (timestamp, MatchResult)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for ts, res in rows:
            w.writerow([f"{ts:.6f}", f"{res.position.easting:.6f}", f"{res.position.northing:.6f}",
                        f"{res.score:.6f}", int(res.valid)])


def read_predictions(path):
    """Returns arrays (timestamp, easting, northing, score, valid)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    cols = {k: np.array([float(r[k]) for r in rows]) for k in CSV_HEADER}
    return (cols["timestamp"], cols["pred_easting"], cols["pred_northing"], cols["peak_score"],
            cols["valid_flag"].astype(bool))
