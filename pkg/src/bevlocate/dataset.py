"""Sequences, training samples and synthetic desk-scale fixtures.

On-disk sequence layout::

    <seq>/poses.csv               timestamp,easting,northing,azimuth
    <seq>/calib.json              {view: {fx, fy, cx, cy, extrinsic[16], image_w, image_h}}
    <seq>/frames/<ts>_<view>.png  one RGB image per view and timestamp
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .encoder import VIEWS, WindowFrame
from .geometry import CameraModel, GeoTransform, Pose2, trinocular_rig
from .mapstore import GeoRaster, crop_rotated, label_for_pose, save_map

POSES_HEADER = ("timestamp", "easting", "northing", "azimuth")


def frame_name(ts: float, view: str) -> str:
    return f"{ts:.3f}_{view}.png"


@dataclass(frozen=True)
class Frame:
    timestamp: float
    image_paths: dict
    pose: Pose2

    def load_images(self) -> np.ndarray:
        """(views, 3, H, W) float32 in [0, 1]."""
        imgs = []
        for view in VIEWS:
            with Image.open(self.image_paths[view]) as im:
                imgs.append(np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0)
        return np.stack(imgs)

    def window_frame(self) -> WindowFrame:
        return WindowFrame(self.load_images(), self.pose, self.timestamp)


@dataclass
class Sequence:
    root: Path
    frames: list
    cams: dict

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.frames)


def read_poses(path) -> list[tuple[float, Pose2]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != POSES_HEADER:
            raise ValueError(f"{path}: expected header {','.join(POSES_HEADER)}")
        return [(float(r["timestamp"]), Pose2(float(r["easting"]), float(r["northing"]), float(r["azimuth"])))
                for r in reader]


def write_poses(path, stamped_poses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSES_HEADER)
        for ts, p in stamped_poses:
            w.writerow([f"{ts:.6f}", f"{p.easting:.6f}", f"{p.northing:.6f}", f"{p.azimuth:.9f}"])


def load_sequence(root) -> Sequence:
    root = Path(root)
    calib = json.loads((root / "calib.json").read_text(encoding="utf-8"))
    cams = {v: CameraModel.from_dict(calib[v]) for v in VIEWS}
    frames = [Frame(ts, {v: root / "frames" / frame_name(ts, v) for v in VIEWS}, pose)
              for ts, pose in read_poses(root / "poses.csv")]
    return Sequence(root, frames, cams)


@dataclass
class Sample:
    frames: list  # past frames then the current one, time-ordered
    label: np.ndarray  # (px, px, 3)
    pose: Pose2


def window_indices(seq: Sequence, index: int, rng: np.random.Generator, window_s: float = 5.0,
                   n_past: int = 5) -> list[int]:
    """Indices of the past frames (time-ordered) followed by `index` itself.

    `n_past` frames are drawn uniformly from the preceding `window_s` seconds.
    If fewer exist they are all used and the earliest is repeated to make up
    the count; with none the window is the current frame alone.
    """
    if not 0 <= index < len(seq.frames):
        raise IndexError(f"frame index {index} out of range")
    now = seq.frames[index].timestamp
    past = [i for i in range(index) if now - window_s <= seq.frames[i].timestamp < now]
    if len(past) > n_past:
        chosen = sorted(rng.choice(past, size=n_past, replace=False).tolist())
    elif past:
        chosen = [past[0]] * (n_past - len(past)) + past
    else:
        chosen = []
    return chosen + [index]


def build_sample(seq: Sequence, index: int, raster: GeoRaster, rng: np.random.Generator,
                 window_s: float = 5.0, n_past: int = 5, label_px: int = 224) -> Sample:
    """Window ending at frame `index` plus the map-crop label at its pose."""
    frames = [seq.frames[i] for i in window_indices(seq, index, rng, window_s, n_past)]
    cur = frames[-1]
    return Sample(frames, label_for_pose(raster, cur.pose, label_px), cur.pose)


def sample_window(sample: Sample) -> list[WindowFrame]:
    out = []
    cache = {}
    for fr in sample.frames:
        if fr.timestamp not in cache:
            cache[fr.timestamp] = fr.window_frame()
        out.append(cache[fr.timestamp])
    return out


# synthetic fixtures

def value_noise(rng: np.random.Generator, shape, base_cells: float, octaves: int = 5,
                persistence: float = 0.55) -> np.ndarray:
    """Multi-octave value noise in [0, 1] with cubic interpolation."""
    h, w = shape
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    cells = base_cells
    for _ in range(octaves):
        gh, gw = max(int(math.ceil(h / cells)) + 3, 4), max(int(math.ceil(w / cells)) + 3, 4)
        grid = rng.random((gh, gw))
        rr = np.arange(h) / cells + 1.0
        cc = np.arange(w) / cells + 1.0
        rr, cc = np.meshgrid(rr, cc, indexing="ij")
        out += amp * ndimage.map_coordinates(grid, [rr, cc], order=3, mode="nearest")
        total += amp
        amp *= persistence
        cells = max(cells / 2.0, 1.0)
    out /= total
    lo, hi = np.percentile(out, [0.5, 99.5])
    return np.clip((out - lo) / max(hi - lo, 1e-12), 0.0, 1.0)


def synth_raster(seed: int, size_m: float, m_per_px: float = 0.229, texture_scale: float = 1.0,
                 origin=(500000.0, 4480000.0)) -> GeoRaster:
    rng = np.random.default_rng(seed)
    px = int(math.ceil(size_m / m_per_px))
    base = max(64.0 * texture_scale, 2.0)
    chans = [value_noise(rng, (px, px), base) for _ in range(3)]
    # a shared luminance layer keeps the channels correlated like real imagery
    lum = value_noise(rng, (px, px), base / 2.0)
    pixels = np.stack([0.5 * c + 0.5 * lum for c in chans], axis=-1).astype(np.float32)
    return GeoRaster(pixels, GeoTransform(origin[0], origin[1], m_per_px))


def synth_trajectory(rng: np.random.Generator, raster: GeoRaster, n: int, margin_m: float,
                     speed: float = 2.0, dt: float = 1.0 / 3.0, t0: float = 0.0):
    """Smooth random drive that keeps at least `margin_m` from every map border."""
    w_m, h_m = raster.extent_m
    g = raster.geo
    e_lo, e_hi = g.origin_easting + margin_m, g.origin_easting + w_m - margin_m
    n_lo, n_hi = g.origin_northing - h_m + margin_m, g.origin_northing - margin_m
    if e_lo >= e_hi or n_lo >= n_hi:
        raise ValueError("map too small for the requested margin")
    e = rng.uniform(e_lo, e_hi)
    nn_ = rng.uniform(n_lo, n_hi)
    az = rng.uniform(-math.pi, math.pi)
    turn = 0.0
    out = []
    for i in range(n):
        out.append((t0 + i * dt, Pose2(e, nn_, az)))
        turn = 0.9 * turn + rng.normal(0.0, 0.08)
        az += turn
        step = speed * dt
        ne, nn2 = e + step * math.sin(az), nn_ + step * math.cos(az)
        if not (e_lo <= ne <= e_hi and n_lo <= nn2 <= n_hi):
            # head back toward the middle of the allowed box
            az = math.atan2((e_lo + e_hi) / 2 - e, (n_lo + n_hi) / 2 - nn_)
            turn = 0.0
            ne, nn2 = e + step * math.sin(az), nn_ + step * math.cos(az)
        e, nn_ = min(max(ne, e_lo), e_hi), min(max(nn2, n_lo), n_hi)
    return out


def oracle_render(raster: GeoRaster, pose: Pose2, out_px: int = 224, noise_sigma: float = 0.0,
                  brightness: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Map crop standing in for a neural render, optionally corrupted."""
    img = crop_rotated(raster, pose, out_px).astype(np.float64)
    if noise_sigma:
        img = img + (rng or np.random.default_rng()).normal(0.0, noise_sigma, img.shape)
    return img + brightness


@dataclass
class SynthWorld:
    raster: GeoRaster
    trajectory: list  # (timestamp, Pose2)
    renders: list = field(default_factory=list)


def synth_world(seed: int, size_m: float = 500.0, texture_scale: float = 1.0, n_frames: int = 100,
                search_extent_m: float = 200.0, noise_sigma: float = 0.0, brightness: float = 0.0,
                render_px: int = 224, m_per_px: float = 0.229, with_renders: bool = True) -> SynthWorld:
    """Procedural raster, a trajectory kept `search_extent_m / 2` inside it, and oracle renders."""
    if size_m <= search_extent_m:
        raise ValueError("world must be larger than the search extent")
    raster = synth_raster(seed, size_m, m_per_px, texture_scale)
    rng = np.random.default_rng(seed + 1)
    traj = synth_trajectory(rng, raster, n_frames, search_extent_m / 2.0)
    renders = []
    if with_renders:
        nrng = np.random.default_rng(seed + 2)
        renders = [oracle_render(raster, p, render_px, noise_sigma, brightness, nrng) for _, p in traj]
    return SynthWorld(raster, traj, renders)


def synth_camera_images(rng: np.random.Generator, image_px: int, base_cells: float = 16.0) -> np.ndarray:
    """Placeholder trinocular frame: smooth seeded noise per view, (views, H, W, 3) uint8."""
    views = [np.stack([value_noise(rng, (image_px, image_px), base_cells, octaves=3) for _ in range(3)], -1)
             for _ in VIEWS]
    return np.rint(np.stack(views) * 255).astype(np.uint8)


def write_sequence(root, stamped_poses, cams: dict | None = None, image_px: int = 224, seed: int = 0) -> Sequence:
    """Emit a sequence in the on-disk layout with synthetic camera frames."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    cams = cams or trinocular_rig(image_px)
    (root / "calib.json").write_text(json.dumps({v: cams[v].to_dict() for v in VIEWS}, indent=2),
                                     encoding="utf-8")
    write_poses(root / "poses.csv", stamped_poses)
    rng = np.random.default_rng(seed)
    for ts, _ in stamped_poses:
        imgs = synth_camera_images(rng, image_px)
        for v, img in zip(VIEWS, imgs):
            Image.fromarray(img, "RGB").save(root / "frames" / frame_name(ts, v))
    return load_sequence(root)


def write_world(root, world: SynthWorld, image_px: int = 224, seed: int = 0) -> Sequence:
    """Write map.png/map.json and a `seq/` sequence for a synthetic world."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_map(world.raster, root / "map.png", root / "map.json")
    return write_sequence(root / "seq", world.trajectory, image_px=image_px, seed=seed)
