"""Georeferenced aerial rasters: loading, rotated crops, labels and search regions."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (GeoTransform, Pose2, bilinear_sample, meters_to_px_ceil, pose_to_pixel)

LABEL_PX = 224
META_KEYS = ("origin_easting", "origin_northing", "m_per_px")


class MapLoadError(ValueError):
    pass


@dataclass(frozen=True)
class GeoRaster:
    pixels: np.ndarray  # (rows, cols, 3) float in [0, 1]
    geo: GeoTransform

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError(f"raster must be (rows, cols, channels), got {self.pixels.shape}")

    @property
    def shape(self):
        return self.pixels.shape[:2]

    @property
    def extent_m(self) -> tuple[float, float]:
        """(east-west, north-south) coverage in meters."""
        return self.pixels.shape[1] * self.geo.m_per_px, self.pixels.shape[0] * self.geo.m_per_px

    def contains(self, p: Pose2) -> bool:
        r, c = pose_to_pixel(self.geo, p)
        return 0 <= r <= self.shape[0] - 1 and 0 <= c <= self.shape[1] - 1


def load_map(image_path, meta_path) -> GeoRaster:
    try:
        meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MapLoadError(f"cannot read map metadata {meta_path}: {exc}") from exc
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise MapLoadError(f"map metadata {meta_path} missing {missing}")
    try:
        geo = GeoTransform(float(meta["origin_easting"]), float(meta["origin_northing"]),
                           float(meta["m_per_px"]))
    except (TypeError, ValueError) as exc:
        raise MapLoadError(f"inconsistent map metadata {meta_path}: {exc}") from exc
    with Image.open(image_path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return GeoRaster(arr, geo)


def save_map(raster: GeoRaster, image_path, meta_path):
    px = np.rint(np.clip(raster.pixels, 0, 1) * 255).astype(np.uint8)
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    Image.fromarray(px, "RGB").save(image_path)
    meta = {"origin_easting": raster.geo.origin_easting,
            "origin_northing": raster.geo.origin_northing,
            "m_per_px": raster.geo.m_per_px}
    Path(meta_path).write_text(json.dumps(meta, indent=2), encoding="utf-8")


def _sample_hwc(pixels, rows, cols):
    chw = np.moveaxis(pixels, 2, 0)
    return np.moveaxis(bilinear_sample(chw, rows, cols), 0, -1)


def crop_rotated(raster: GeoRaster, center: Pose2, out_px: int) -> np.ndarray:
    """Heading-up crop of `out_px` x `out_px` map pixels around `center`.

    Output row 0 is ahead of the vehicle and columns grow to its right.
    Samples falling outside the map are zero.
    """
    if out_px < 1:
        raise ValueError("out_px must be >= 1")
    r0, c0 = pose_to_pixel(raster.geo, center)
    half = (out_px - 1) / 2.0
    grid = np.arange(out_px, dtype=float) - half
    fwd = -grid[:, None]  # pixels ahead
    right = grid[None, :]
    ca, sa = math.cos(center.azimuth), math.sin(center.azimuth)
    north = fwd * ca - right * sa
    east = fwd * sa + right * ca
    if center.azimuth == 0.0:
        north, east = np.broadcast_to(fwd, (out_px, out_px)), np.broadcast_to(right, (out_px, out_px))
    return _sample_hwc(raster.pixels, r0 - north, c0 + east)


def rotate_to_north_up(image: np.ndarray, azimuth: float):
    """Rotate a heading-up square image into the map's north-up frame.

    Returns (image, valid) where `valid` marks pixels whose source lies inside
    the input image.
    """
    n = image.shape[0]
    if image.shape[1] != n:
        raise ValueError("expected a square image")
    half = (n - 1) / 2.0
    grid = np.arange(n, dtype=float) - half
    dn = -grid[:, None]
    de = grid[None, :]
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    fwd = dn * ca + de * sa
    right = -dn * sa + de * ca
    rows = half - fwd
    cols = half + right
    if azimuth == 0.0:
        rows, cols = np.broadcast_to(half - dn, (n, n)), np.broadcast_to(half + de, (n, n))
    # tolerate float noise at the image boundary
    tol = 1e-9
    valid = (rows >= -tol) & (rows <= n - 1 + tol) & (cols >= -tol) & (cols <= n - 1 + tol)
    rows = np.clip(rows, 0, n - 1)
    cols = np.clip(cols, 0, n - 1)
    if image.ndim == 2:
        out = bilinear_sample(image[None], rows, cols)[0]
    else:
        out = _sample_hwc(image, rows, cols)
    return np.where(valid if image.ndim == 2 else valid[..., None], out, 0), valid


def label_for_pose(raster: GeoRaster, pose: Pose2, out_px: int = LABEL_PX) -> np.ndarray:
    return crop_rotated(raster, pose, out_px)


def search_region(raster: GeoRaster, prior: Pose2, extent_m: float):
    """North-up map crop of ceil(extent_m / m_per_px) pixels around the prior position.

    The crop copies map pixels without resampling (zero outside the map) and
    returns its own GeoTransform. Returns (pixels, geo).
    """
    size = meters_to_px_ceil(raster.geo, extent_m)
    if size < 1:
        raise ValueError("search extent too small")
    pr, pc = pose_to_pixel(raster.geo, prior)
    r0 = int(math.floor(pr - (size - 1) / 2.0 + 0.5))
    c0 = int(math.floor(pc - (size - 1) / 2.0 + 0.5))
    out = np.zeros((size, size, raster.pixels.shape[2]), dtype=raster.pixels.dtype)
    rows, cols = raster.shape
    sr0, sr1 = max(r0, 0), min(r0 + size, rows)
    sc0, sc1 = max(c0, 0), min(c0 + size, cols)
    if sr0 < sr1 and sc0 < sc1:
        out[sr0 - r0:sr1 - r0, sc0 - c0:sc1 - c0] = raster.pixels[sr0:sr1, sc0:sc1]
    g = raster.geo
    geo = GeoTransform(g.origin_easting + c0 * g.m_per_px, g.origin_northing - r0 * g.m_per_px, g.m_per_px)
    return out, geo
