"""Encoder + rendering head bundled over one ParamStore."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import renderer as rnd
from .geometry import BevGridSpec, CameraModel, trinocular_rig
from .nncore import ParamStore


@dataclass
class BevModel:
    enc_cfg: enc.EncoderConfig
    render_cfg: rnd.RenderHeadConfig
    cams: dict
    store: ParamStore

    def __post_init__(self):
        self.refs = enc.camera_reference_points(self.enc_cfg, self.cams)

    @classmethod
    def create(cls, enc_cfg: enc.EncoderConfig | None = None, render_cfg: rnd.RenderHeadConfig | None = None,
               cams: dict | None = None, seed: int = 0, dtype=np.float32, offset_scale: float = 0.0):
        enc_cfg = enc_cfg or enc.EncoderConfig()
        render_cfg = render_cfg or rnd.RenderHeadConfig(in_dim=enc_cfg.dim)
        cams = cams or trinocular_rig(enc_cfg.image_w)
        rng = np.random.default_rng(seed)
        params = enc.init_encoder(enc_cfg, rng, dtype, offset_scale)
        rparams, buffers = rnd.init_renderer(render_cfg, rng, dtype)
        params.update(rparams)
        return cls(enc_cfg, render_cfg, cams, ParamStore(params, buffers))

    @classmethod
    def miniature(cls, seed: int = 0, dtype=np.float64, offset_scale: float = 0.0, cells: int = 8,
                  cells_h: int = 2, cams: dict | None = None):
        """d=8, 8x8 grid, 64x64 images, renderer widths divided by 8."""
        ecfg = enc.EncoderConfig(dim=8, heads=2, grid=BevGridSpec.with_cells(cells, cells, cells_h),
                                 image_h=8 * cells, image_w=8 * cells)
        return cls.create(ecfg, rnd.RenderHeadConfig.scaled(8), cams or trinocular_rig(8 * cells), seed, dtype,
                          offset_scale)

    @classmethod
    def from_store(cls, store: ParamStore, cams: dict[str, CameraModel] | None = None,
                   cell_m: float = 0.916, height_m: float = 2.0, patch: int = 8):
        """Rebuild configs from tensor shapes (used when loading weight files)."""
        d, l, w = store["encoder.query"].shape
        heads = store["encoder.temporal.rpb"].shape[0]
        cells_h = store["encoder.spatial.offset.center.weight"].shape[0] // 2
        grid = BevGridSpec.with_cells(l, w, cells_h, cell_m, height_m)
        if cams is None:
            cams = trinocular_rig(l * patch)
        ecfg = enc.EncoderConfig(dim=d, heads=heads, grid=grid, patch=patch,
                                 image_h=cams["center"].image_h, image_w=cams["center"].image_w)
        b0 = store["renderer.block0.conv0.weight"].shape[0]
        dec = store["renderer.block1.conv0.weight"].shape[0]
        ups, u = [], 0
        while f"renderer.up{u}.conv0.weight" in store:
            ups.append(store[f"renderer.up{u}.conv0.weight"].shape[0])
            u += 1
        rcfg = rnd.RenderHeadConfig(in_dim=d, block0=b0, decoder=dec, up=tuple(ups))
        return cls(ecfg, rcfg, cams, store)

    def parameter_counts(self) -> dict:
        enc_n = self.store.num_params("encoder.")
        ren_n = self.store.num_params("renderer.")
        return {"encoder": enc_n, "renderer": ren_n, "total": enc_n + ren_n}

    def forward(self, frames: list, training: bool = False):
        """Window of WindowFrames -> ((3, H, W) image, BevFeature, tape)."""
        feature, etape = enc.encode_window(self.store.params, self.enc_cfg, self.refs, frames)
        img, rcache = rnd.render_tensor(self.store, self.render_cfg, feature.tensor, training)
        return img, feature, (etape, rcache)

    def backward(self, tape, grad_image) -> dict:
        etape, rcache = tape
        grads, g_feat = rnd.render_tensor_vjp(self.store, self.render_cfg, rcache, grad_image)
        grads.update(enc.encode_window_vjp(self.store.params, self.enc_cfg, etape, g_feat))
        return grads

    def render(self, frames: list) -> rnd.BevImage:
        img, feature, _ = self.forward(frames, training=False)
        return rnd.BevImage(np.ascontiguousarray(img.transpose(1, 2, 0)), feature.anchor_pose)
