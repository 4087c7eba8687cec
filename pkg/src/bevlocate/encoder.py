"""Single-layer BEV encoder with temporal propagation.

Each camera frame is patch-projected into a feature map per view. The BEV
query attends to the (propagated) previous BEV feature through deformable
temporal attention, and the result queries the three camera features through
deformable spatial attention. Between frames the BEV feature is warped into
the next vehicle pose.

All stages are plain functions over a flat ``{name: array}`` parameter map
and return a cache; the matching ``*_vjp`` consumes that cache. The window
encoder records one cache per frame (a static tape) so the backward pass is
just the reversed list.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .geometry import (BevGridSpec, CameraModel, Pose2, bilinear_sample, bilinear_sample_vjp,
                       pose_delta, project_bev_points, warp_grid)

log = logging.getLogger(__name__)

VIEWS = ("left", "center", "right")
_ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    heads: int = 4
    grid: BevGridSpec = field(default_factory=BevGridSpec)
    patch: int = 8
    image_h: int = 224
    image_w: int = 224
    offset_clamp: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def points(self) -> int:
        return self.grid.cells_h


@dataclass
class BevFeature:
    tensor: np.ndarray  # (d, l, w)
    anchor_pose: Pose2
    timestamp: float = 0.0


@dataclass
class WindowFrame:
    """One encoder input: per-view RGB images (3 views, 3, H, W) in [0, 1] plus pose."""

    images: np.ndarray
    pose: Pose2
    timestamp: float = 0.0


@dataclass(frozen=True)
class CameraRefs:
    rows: np.ndarray  # (l, w, h) feature-map rows of projected voxel centers
    cols: np.ndarray
    mask: np.ndarray


def camera_reference_points(cfg: EncoderConfig, cams: dict[str, CameraModel]) -> list[CameraRefs]:
    refs = []
    for view in VIEWS:
        uv, mask = project_bev_points(cfg.grid, cams[view])
        cols = (uv[..., 0] + 0.5) / cfg.patch - 0.5
        rows = (uv[..., 1] + 0.5) / cfg.patch - 0.5
        refs.append(CameraRefs(rows, cols, mask))
    return refs


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32,
                 offset_scale: float = 0.0) -> dict:
    """Fresh encoder parameters. Offset networks are zero unless `offset_scale` > 0."""
    d, l, w, h = cfg.dim, cfg.grid.cells_l, cfg.grid.cells_w, cfg.points
    p = {}
    p["encoder.query"] = rng.uniform(-1, 1, size=(d, l, w)).astype(dtype)
    p["encoder.patch.weight"] = nn.kaiming_uniform(rng, (d, 3, cfg.patch, cfg.patch), 3 * cfg.patch ** 2, dtype)
    p["encoder.patch.bias"] = np.zeros(d, dtype)

    def offset_conv(name, out_ch):
        if offset_scale:
            p[name + ".weight"] = (offset_scale * rng.standard_normal((out_ch, d, 1, 1))).astype(dtype)
            p[name + ".bias"] = (offset_scale * rng.standard_normal(out_ch)).astype(dtype)
        else:
            p[name + ".weight"] = np.zeros((out_ch, d, 1, 1), dtype)
            p[name + ".bias"] = np.zeros(out_ch, dtype)

    for stage in ("temporal", "spatial"):
        for key in ("q", "k", "v", "o"):
            p[f"encoder.{stage}.attn.w{key}"] = nn.kaiming_uniform(rng, (d, d), d, dtype) * np.asarray(0.5, dtype)
            p[f"encoder.{stage}.attn.b{key}"] = np.zeros(d, dtype)
    offset_conv("encoder.temporal.offset", 2)
    p["encoder.temporal.rpb"] = np.zeros((cfg.heads, 2 * l - 1, 2 * w - 1), dtype)
    for view in VIEWS:
        offset_conv(f"encoder.spatial.offset.{view}", 2 * h)
    p["encoder.spatial.point_bias"] = np.zeros((cfg.heads, h), dtype)
    p["encoder.fusion.weight"] = nn.kaiming_uniform(rng, (d, 3 * d, 1, 1), 3 * d, dtype)
    p["encoder.fusion.bias"] = np.zeros(d, dtype)
    return p


def _attn_params(params, stage):
    return {k: params[f"encoder.{stage}.attn.{k}"] for k in _ATTN_KEYS}


def _attn_grads(grads, stage):
    return {f"encoder.{stage}.attn.{k}": v for k, v in grads.items()}


def _add(acc: dict, grads: dict):
    for k, v in grads.items():
        if k in acc:
            acc[k] = acc[k] + v
        else:
            acc[k] = v


# patch projection

def patch_project(params, cfg: EncoderConfig, images: np.ndarray):
    """(views, 3, H, W) images -> (views, d, H/patch, W/patch) camera features."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (views, 3, H, W) images, got {images.shape}")
    hgt, wid = images.shape[2:]
    if hgt % cfg.patch or wid % cfg.patch:
        raise ValueError(f"image size {hgt}x{wid} not divisible by patch stride {cfg.patch}")
    feats = nn.conv2d(images, params["encoder.patch.weight"], params["encoder.patch.bias"], stride=cfg.patch)
    return feats, images


def patch_project_vjp(params, cfg, cache, grad):
    _, gw, gb = nn.conv2d_vjp(grad, cache, params["encoder.patch.weight"], stride=cfg.patch)
    return {"encoder.patch.weight": gw, "encoder.patch.bias": gb}


# temporal attention

def _grid_indices(l, w):
    return np.meshgrid(np.arange(l, dtype=float), np.arange(w, dtype=float), indexing="ij")


def relative_bias_index(l, w, key_rows, key_cols):
    """Flat index into a (2l-1, 2w-1) table for every (query cell, key point) pair."""
    qr, qc = _grid_indices(l, w)
    kr = np.rint(key_rows.ravel())
    kc = np.rint(key_cols.ravel())
    dr = np.clip(qr.ravel()[:, None] - kr[None, :], -(l - 1), l - 1).astype(np.int64) + (l - 1)
    dc = np.clip(qc.ravel()[:, None] - kc[None, :], -(w - 1), w - 1).astype(np.int64) + (w - 1)
    return dr * (2 * w - 1) + dc


def temporal_attention(params, cfg: EncoderConfig, b_prev: np.ndarray, query: np.ndarray):
    """Deformable attention of the BEV query over the previous BEV feature."""
    if b_prev.shape != query.shape:
        raise ValueError(f"previous feature {b_prev.shape} does not match query {query.shape}")
    d, l, w = query.shape
    raw = nn.conv2d(query[None], params["encoder.temporal.offset.weight"],
                    params["encoder.temporal.offset.bias"])[0]
    off = np.clip(raw, -cfg.offset_clamp, cfg.offset_clamp)
    ref_r, ref_c = _grid_indices(l, w)
    rows = ref_r + off[0]
    cols = ref_c + off[1]
    kv = bilinear_sample(b_prev, rows, cols)
    xq = query.reshape(d, -1).T
    xkv = kv.reshape(d, -1).T
    ridx = relative_bias_index(l, w, rows, cols)
    table = params["encoder.temporal.rpb"]
    bias = table.reshape(table.shape[0], -1)[:, ridx]
    out, mcache = nn.multi_head_attention(xq, xkv, xkv, _attn_params(params, "temporal"), cfg.heads, bias)
    cache = (b_prev, query, raw, rows, cols, ridx, mcache)
    return out.T.reshape(d, l, w), cache


def temporal_attention_vjp(params, cfg: EncoderConfig, cache, grad):
    """Returns (grads, grad_b_prev, grad_query)."""
    b_prev, query, raw, rows, cols, ridx, mcache = cache
    d, l, w = query.shape
    gxq, gxk, gxv, ag, gs = nn.multi_head_attention_vjp(grad.reshape(d, -1).T, mcache,
                                                        _attn_params(params, "temporal"))
    grads = _attn_grads(ag, "temporal")
    table = params["encoder.temporal.rpb"]
    size = table[0].size
    grads["encoder.temporal.rpb"] = np.stack(
        [np.bincount(ridx.ravel(), weights=gs[h].ravel(), minlength=size) for h in range(table.shape[0])]
    ).reshape(table.shape).astype(table.dtype)
    g_kv = (gxk + gxv).T.reshape(d, l, w)
    g_prev, g_rows, g_cols = bilinear_sample_vjp(g_kv, b_prev, rows, cols)
    live = (raw > -cfg.offset_clamp) & (raw < cfg.offset_clamp)
    g_off = np.stack([g_rows, g_cols]).astype(query.dtype) * live
    gq_conv, gw, gb = nn.conv2d_vjp(g_off[None], query[None], params["encoder.temporal.offset.weight"])
    grads["encoder.temporal.offset.weight"] = gw
    grads["encoder.temporal.offset.bias"] = gb
    g_query = gxq.T.reshape(d, l, w) + gq_conv[0]
    return grads, g_prev, g_query


# spatial attention

def spatial_attention(params, cfg: EncoderConfig, feats: np.ndarray, b_temp: np.ndarray,
                      refs: list[CameraRefs]):
    """Deformable attention of the temporal output over the three camera features."""
    d, l, w = b_temp.shape
    h = cfg.points
    n = l * w
    xq = b_temp.reshape(d, -1).T
    attn = _attn_params(params, "spatial")
    bias = params["encoder.spatial.point_bias"][:, None, :]
    outs, view_caches = [], []
    for i, view in enumerate(VIEWS):
        ref = refs[i]
        raw = nn.conv2d(b_temp[None], params[f"encoder.spatial.offset.{view}.weight"],
                        params[f"encoder.spatial.offset.{view}.bias"])[0]
        off = np.clip(raw, -cfg.offset_clamp, cfg.offset_clamp)
        rows = ref.rows + off[0::2].transpose(1, 2, 0)
        cols = ref.cols + off[1::2].transpose(1, 2, 0)
        sampled = bilinear_sample(feats[i], rows, cols)  # (d, l, w, h)
        kv = sampled.reshape(d, n, h).transpose(1, 2, 0)
        mask = ref.mask.reshape(n, h)
        live = mask.any(axis=1)
        if not live.any():
            log.info("view %s: no valid reference points, contributing zeros", view)
        out, mcache = nn.multi_head_attention(xq, kv, kv, attn, cfg.heads, bias, mask)
        outs.append(out * live[:, None])
        view_caches.append((raw, rows, cols, live, mcache))
    stacked = np.concatenate(outs, axis=1).T.reshape(3 * d, l, w)
    fused = nn.conv2d(stacked[None], params["encoder.fusion.weight"], params["encoder.fusion.bias"])[0]
    return fused, (feats, b_temp, stacked, view_caches)


def spatial_attention_vjp(params, cfg: EncoderConfig, cache, grad):
    """Returns (grads, grad_b_temp, grad_feats)."""
    feats, b_temp, stacked, view_caches = cache
    d, l, w = b_temp.shape
    h = cfg.points
    n = l * w
    grads = {}
    g_stacked, gw, gb = nn.conv2d_vjp(grad[None], stacked[None], params["encoder.fusion.weight"])
    grads["encoder.fusion.weight"] = gw
    grads["encoder.fusion.bias"] = gb
    g_stacked = g_stacked[0].reshape(3 * d, n).T
    attn = _attn_params(params, "spatial")
    g_btemp = np.zeros_like(b_temp)
    g_feats = np.zeros_like(feats)
    g_pb = np.zeros_like(params["encoder.spatial.point_bias"])
    for i, view in enumerate(VIEWS):
        raw, rows, cols, live, mcache = view_caches[i]
        g_out = g_stacked[:, i * d:(i + 1) * d] * live[:, None]
        gxq, gxk, gxv, ag, gs = nn.multi_head_attention_vjp(g_out, mcache, attn)
        _add(grads, _attn_grads(ag, "spatial"))
        g_pb += gs.sum(axis=1)
        g_kv = (gxk + gxv).transpose(2, 0, 1).reshape(d, l, w, h)
        g_feat, g_rows, g_cols = bilinear_sample_vjp(g_kv, feats[i], rows, cols)
        g_feats[i] = g_feat
        g_off = np.empty_like(raw)
        g_off[0::2] = g_rows.transpose(2, 0, 1)
        g_off[1::2] = g_cols.transpose(2, 0, 1)
        g_off *= (raw > -cfg.offset_clamp) & (raw < cfg.offset_clamp)
        wname = f"encoder.spatial.offset.{view}.weight"
        gx, gow, gob = nn.conv2d_vjp(g_off[None], b_temp[None], params[wname])
        grads[wname] = gow
        grads[f"encoder.spatial.offset.{view}.bias"] = gob
        g_btemp += gx[0] + gxq.T.reshape(d, l, w)
    grads["encoder.spatial.point_bias"] = g_pb
    return grads, g_btemp, g_feats


# propagation

def propagate_tensor(tensor: np.ndarray, spec: BevGridSpec, from_pose: Pose2, to_pose: Pose2):
    """Warp a (d, l, w) BEV tensor anchored at `from_pose` into `to_pose`. Returns (out, grid)."""
    delta = pose_delta(to_pose, from_pose)
    grid = warp_grid(spec, delta)
    return bilinear_sample(tensor, grid.rows, grid.cols), grid


def propagate(feature: BevFeature, to_pose: Pose2, spec: BevGridSpec, timestamp: float | None = None) -> BevFeature:
    out, _ = propagate_tensor(feature.tensor, spec, feature.anchor_pose, to_pose)
    return BevFeature(out, to_pose, feature.timestamp if timestamp is None else timestamp)


def propagate_vjp(grad, tensor, grid):
    g, _, _ = bilinear_sample_vjp(grad, tensor, grid.rows, grid.cols)
    return g.astype(tensor.dtype)


# window

def encode_frame(params, cfg, refs, images, b_prev):
    query = params["encoder.query"]
    feats, pcache = patch_project(params, cfg, images)
    b_temp, tcache = temporal_attention(params, cfg, b_prev, query)
    b, scache = spatial_attention(params, cfg, feats, b_temp, refs)
    return b, (pcache, tcache, scache)


def encode_window(params, cfg: EncoderConfig, refs: list[CameraRefs], frames: list[WindowFrame]):
    """Encode time-ordered frames oldest to newest. Returns (BevFeature, tape)."""
    if not frames:
        raise ValueError("empty frame window")
    tape = []
    b = None
    for t, fr in enumerate(frames):
        if t == 0:
            b_prev, grid = params["encoder.query"], None
        else:
            if fr.timestamp < frames[t - 1].timestamp:
                raise ValueError("window frames must be time-ordered")
            b_prev, grid = propagate_tensor(b, cfg.grid, frames[t - 1].pose, fr.pose)
        prev_tensor = b
        b, caches = encode_frame(params, cfg, refs, fr.images, b_prev)
        tape.append((prev_tensor, grid, caches))
    last = frames[-1]
    return BevFeature(b, last.pose, last.timestamp), tape


def encode_window_vjp(params, cfg: EncoderConfig, tape, grad):
    """Parameter gradients of a scalar loss given its gradient w.r.t. the window output."""
    grads = {}
    g_b = grad
    for prev_tensor, grid, (pcache, tcache, scache) in reversed(tape):
        sg, g_btemp, g_feats = spatial_attention_vjp(params, cfg, scache, g_b)
        _add(grads, sg)
        _add(grads, patch_project_vjp(params, cfg, pcache, g_feats))
        tg, g_prev, g_query = temporal_attention_vjp(params, cfg, tcache, g_btemp)
        _add(grads, tg)
        _add(grads, {"encoder.query": g_query})
        if grid is None:
            _add(grads, {"encoder.query": g_prev})
        else:
            g_b = propagate_vjp(g_prev, prev_tensor, grid)
    return grads
