"""SE(2) pose algebra, BEV grid layout, georeferencing and bilinear resampling.

Frames used throughout the package:

* World: UTM easting/northing in meters. Azimuth is measured clockwise from
  north, so a vehicle with azimuth 0 faces north and pi/2 faces east.
* Vehicle: x forward, y to the right (z down for 3D points, ground at z=0).
  With the clockwise azimuth this is a proper right-handed planar frame, and
  relative motions compose with the usual counter-clockwise rotation matrix.
* BEV grid: row 0 is the front of the vehicle, columns increase to the right.
  Continuous cell coordinates put integer values on cell centers and the
  vehicle at the grid center.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# minimum camera-frame depth (m) for a projected point to count as valid
MIN_DEPTH = 0.1


def wrap_angle(a):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    wrapped = (np.asarray(a, dtype=float) + math.pi) % (2.0 * math.pi) - math.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2:
    easting: float
    northing: float
    azimuth: float = 0.0

    def __post_init__(self):
        vals = (self.easting, self.northing, self.azimuth)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose {vals}")
        object.__setattr__(self, "easting", float(self.easting))
        object.__setattr__(self, "northing", float(self.northing))
        object.__setattr__(self, "azimuth", wrap_angle(self.azimuth))


@dataclass(frozen=True)
class PoseDelta:
    """Relative motion in the previous vehicle frame (dx forward, dy right)."""

    dx: float
    dy: float
    dtheta: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dtheta)):
            raise ValueError("non-finite pose delta")
        object.__setattr__(self, "dtheta", wrap_angle(self.dtheta))

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        return np.array([[c, -s, self.dx], [s, c, self.dy], [0.0, 0.0, 1.0]])

    def inverse(self) -> "PoseDelta":
        """Relative inverse: undoes this motion when applied afterwards."""
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        return PoseDelta(-(c * self.dx + s * self.dy), -(-s * self.dx + c * self.dy), -self.dtheta)


def pose_delta(current: Pose2, previous: Pose2) -> PoseDelta:
    """Motion of `current` expressed in the vehicle frame of `previous`."""
    dn = current.northing - previous.northing
    de = current.easting - previous.easting
    c, s = math.cos(previous.azimuth), math.sin(previous.azimuth)
    return PoseDelta(c * dn + s * de, -s * dn + c * de, current.azimuth - previous.azimuth)


@dataclass(frozen=True)
class BevGridSpec:
    length: float = 25.648
    width: float = 25.648
    height: float = 2.0
    cells_l: int = 28
    cells_w: int = 28
    cells_h: int = 5

    def __post_init__(self):
        if min(self.cells_l, self.cells_w, self.cells_h) < 1:
            raise ValueError("grid needs at least one cell per axis")
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("grid extents must be positive")

    @property
    def cell_size(self) -> tuple[float, float, float]:
        return (self.length / self.cells_l, self.width / self.cells_w, self.height / self.cells_h)

    @classmethod
    def with_cells(cls, cells_l: int, cells_w: int, cells_h: int = 5, cell_m: float = 0.916,
                   height: float = 2.0) -> "BevGridSpec":
        return cls(cells_l * cell_m, cells_w * cell_m, height, cells_l, cells_w, cells_h)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Vehicle-frame (forward, right) meters of every cell center, shape (l, w)."""
        cl, cw, _ = self.cell_size
        rows, cols = np.meshgrid(np.arange(self.cells_l), np.arange(self.cells_w), indexing="ij")
        return self.cells_to_vehicle(rows.astype(float), cols.astype(float))

    def cells_to_vehicle(self, rows, cols):
        cl, cw, _ = self.cell_size
        fwd = (self.cells_l / 2.0 - 0.5 - np.asarray(rows, dtype=float)) * cl
        right = (np.asarray(cols, dtype=float) + 0.5 - self.cells_w / 2.0) * cw
        return fwd, right

    def vehicle_to_cells(self, fwd, right):
        cl, cw, _ = self.cell_size
        rows = self.cells_l / 2.0 - 0.5 - np.asarray(fwd, dtype=float) / cl
        cols = np.asarray(right, dtype=float) / cw + self.cells_w / 2.0 - 0.5
        return rows, cols

    def voxel_centers(self) -> np.ndarray:
        """Vehicle-frame 3D centers (forward, right, down) of all cells, shape (l, w, h, 3)."""
        fwd, right = self.cell_centers()
        _, _, ch = self.cell_size
        down = -(np.arange(self.cells_h) + 0.5) * ch
        pts = np.empty((self.cells_l, self.cells_w, self.cells_h, 3))
        pts[..., 0] = fwd[..., None]
        pts[..., 1] = right[..., None]
        pts[..., 2] = down
        return pts


@dataclass(frozen=True)
class SampleGrid:
    """Continuous (row, col) source coordinates; `inside` flags in-range points."""

    rows: np.ndarray
    cols: np.ndarray
    inside: np.ndarray = field(default=None)


def transform_cells(spec: BevGridSpec, delta: PoseDelta, rows, cols):
    """Map cell coordinates of the current grid into the previous grid under `delta`."""
    fwd, right = spec.cells_to_vehicle(rows, cols)
    c, s = math.cos(delta.dtheta), math.sin(delta.dtheta)
    src_fwd = c * fwd - s * right + delta.dx
    src_right = s * fwd + c * right + delta.dy
    return spec.vehicle_to_cells(src_fwd, src_right)


def warp_grid(spec: BevGridSpec, delta: PoseDelta) -> SampleGrid:
    rows, cols = np.meshgrid(np.arange(spec.cells_l, dtype=float),
                             np.arange(spec.cells_w, dtype=float), indexing="ij")
    if delta.dx == 0.0 and delta.dy == 0.0 and delta.dtheta == 0.0:
        src_r, src_c = rows, cols
    else:
        src_r, src_c = transform_cells(spec, delta, rows, cols)
    inside = (src_r >= 0) & (src_r <= spec.cells_l - 1) & (src_c >= 0) & (src_c <= spec.cells_w - 1)
    return SampleGrid(src_r, src_c, inside)


def _corners(shape, rows, cols):
    h, w = shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = []
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r, c = r0 + dr, c0 + dc
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out.append((np.where(ok, r * w + c, 0), wt, ok))
    return out, fr, fc


def bilinear_sample(feature: np.ndarray, rows, cols) -> np.ndarray:
    """Sample a (C, H, W) array at continuous coordinates with zero padding.

    `rows`/`cols` may be any (matching) shape S; the result is (C, *S).
    Integer coordinates return stored values exactly.
    """
    if feature.ndim != 3:
        raise ValueError(f"expected a (C, H, W) feature, got shape {feature.shape}")
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    if rows.shape != cols.shape:
        raise ValueError("row/col coordinate shapes differ")
    if not (np.isfinite(rows).all() and np.isfinite(cols).all()):
        raise ValueError("non-finite sample coordinates")
    c = feature.shape[0]
    flat = feature.reshape(c, -1)
    corners, _, _ = _corners(feature.shape[1:], rows.ravel(), cols.ravel())
    out = np.zeros((c, rows.size), dtype=feature.dtype)
    for idx, wt, ok in corners:
        out += flat[:, idx] * np.where(ok, wt, 0.0).astype(feature.dtype)
    return out.reshape((c,) + rows.shape)


def bilinear_sample_vjp(grad: np.ndarray, feature: np.ndarray, rows, cols):
    """Gradients of bilinear_sample w.r.t. the feature and the coordinates.

    Returns (grad_feature, grad_rows, grad_cols).
    """
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    c, h, w = feature.shape
    g = grad.reshape(c, -1)
    flat = feature.reshape(c, -1)
    corners, fr, fc = _corners((h, w), rows.ravel(), cols.ravel())
    # scatter-add by channel-offset bincount (fixed summation order)
    offsets = (np.arange(c) * (h * w))[:, None]
    idx_all, wts_all = [], []
    vals = []
    for idx, wt, ok in corners:
        wt = np.where(ok, wt, 0.0)
        idx_all.append((offsets + idx[None, :]).ravel())
        wts_all.append((g * wt).ravel())
        vals.append(np.where(ok, flat[:, idx], 0.0))
    grad_feat = np.bincount(np.concatenate(idx_all), weights=np.concatenate(wts_all),
                            minlength=c * h * w).reshape(c, h, w).astype(feature.dtype)
    v00, v01, v10, v11 = vals
    d_rows = ((1 - fc) * (v10 - v00) + fc * (v11 - v01))
    d_cols = ((1 - fr) * (v01 - v00) + fr * (v11 - v10))
    grad_rows = (g * d_rows).sum(axis=0).reshape(rows.shape)
    grad_cols = (g * d_cols).sum(axis=0).reshape(cols.shape)
    return grad_feat, grad_rows, grad_cols


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray  # 4x4 vehicle -> camera
    image_w: int
    image_h: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        ext = np.asarray(self.extrinsic, dtype=float).reshape(4, 4)
        rot = ext[:3, :3]
        if abs(np.linalg.det(rot)) < 1e-9:
            raise ValueError("singular extrinsic")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("extrinsic rotation block is not orthonormal")
        object.__setattr__(self, "extrinsic", ext)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "extrinsic": [float(v) for v in self.extrinsic.ravel()],
                "image_w": self.image_w, "image_h": self.image_h}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.asarray(d["extrinsic"], dtype=float).reshape(4, 4),
                   int(d["image_w"]), int(d["image_h"]))


def project_points(cam: CameraModel, points: np.ndarray):
    """Pinhole-project vehicle-frame points (..., 3). Returns (uv, valid)."""
    p = points @ cam.extrinsic[:3, :3].T + cam.extrinsic[:3, 3]
    z = p[..., 2]
    valid = z > MIN_DEPTH
    safe_z = np.where(valid, z, 1.0)
    u = cam.fx * p[..., 0] / safe_z + cam.cx
    v = cam.fy * p[..., 1] / safe_z + cam.cy
    valid &= (u >= 0) & (u <= cam.image_w - 1) & (v >= 0) & (v <= cam.image_h - 1)
    return np.stack([u, v], axis=-1), valid


def project_bev_points(spec: BevGridSpec, cam: CameraModel):
    """Project every voxel center of the grid. Returns uv (l, w, h, 2) and mask (l, w, h)."""
    return project_points(cam, spec.voxel_centers())


def yawed_camera(yaw: float, mount_height: float = 1.5, image_size: int = 224,
                 fov_deg: float = 90.0, pitch: float = 0.0) -> CameraModel:
    """Forward-looking pinhole camera rotated `yaw` radians to the right of the heading."""
    cy_, sy_ = math.cos(yaw), math.sin(yaw)
    fwd = np.array([cy_, sy_, 0.0])
    right = np.array([-sy_, cy_, 0.0])
    down = np.array([0.0, 0.0, 1.0])
    if pitch:
        cp, sp = math.cos(pitch), math.sin(pitch)
        fwd, down = cp * fwd + sp * down, -sp * fwd + cp * down
    rot = np.stack([right, down, fwd])
    centre = np.array([0.0, 0.0, -mount_height])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ centre
    f = (image_size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    c = (image_size - 1) / 2.0
    return CameraModel(f, f, c, c, ext, image_size, image_size)


def trinocular_rig(image_size: int = 224, spread: float = math.radians(60.0)) -> dict[str, CameraModel]:
    pitch = math.radians(15.0)
    return {"left": yawed_camera(-spread, image_size=image_size, pitch=pitch),
            "center": yawed_camera(0.0, image_size=image_size, pitch=pitch),
            "right": yawed_camera(spread, image_size=image_size, pitch=pitch)}


@dataclass(frozen=True)
class GeoTransform:
    """North-up raster georeference; (origin_easting, origin_northing) is pixel (0, 0)."""

    origin_easting: float
    origin_northing: float
    m_per_px: float

    def __post_init__(self):
        if not self.m_per_px > 0:
            raise ValueError("m_per_px must be positive")


def utm_to_pixel(gt: GeoTransform, easting, northing):
    col = (np.asarray(easting) - gt.origin_easting) / gt.m_per_px
    row = (gt.origin_northing - np.asarray(northing)) / gt.m_per_px
    return row, col


def pose_to_pixel(gt: GeoTransform, p: Pose2) -> tuple[float, float]:
    row, col = utm_to_pixel(gt, p.easting, p.northing)
    return float(row), float(col)


def pixel_to_utm(gt: GeoTransform, row, col):
    easting = gt.origin_easting + np.asarray(col) * gt.m_per_px
    northing = gt.origin_northing - np.asarray(row) * gt.m_per_px
    return easting, northing


def meters_to_px_ceil(gt: GeoTransform | float, meters: float) -> int:
    """Pixels needed to cover `meters`, rounding up (200 m at 0.229 m/px -> 874)."""
    if meters < 0:
        raise ValueError("meters must be non-negative")
    mpp = gt.m_per_px if isinstance(gt, GeoTransform) else float(gt)
    ratio = meters / mpp
    # absorb float noise such as 25.648 / 0.229 = 112.00000000000001
    return int(math.ceil(ratio - 1e-9 * max(1.0, ratio)))
