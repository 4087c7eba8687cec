"""Convolutional head decoding a (d, l, w) BEV feature into an RGB image.

Layout: decoder block 0 (strided conv + BN + ReLU halves the extent),
decoder blocks 1-3 ((conv + BN) x 4 + ReLU), then four upsample blocks
(nearest x2 + (conv + BN) x 2 + ReLU, Sigmoid on the last). A 28x28 feature
becomes a 224x224 image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .geometry import Pose2

BEV_IMAGE_PX = 224
BEV_M_PER_PX = 0.229


@dataclass(frozen=True)
class RenderHeadConfig:
    in_dim: int = 64
    block0: int = 128
    decoder: int = 128
    up: tuple = (64, 32, 16, 3)
    decoder_blocks: int = 3
    convs_per_decoder: int = 4
    convs_per_up: int = 2
    kernel: int = 3

    @classmethod
    def scaled(cls, factor: int) -> "RenderHeadConfig":
        """Width-reduced head; the 3-channel output stays."""
        return cls(in_dim=64 // factor, block0=128 // factor, decoder=128 // factor,
                   up=tuple(max(c // factor, 1) for c in (64, 32, 16)) + (3,))

    def layers(self):
        """Ordered layer plan: (kind, name, in_ch, out_ch, stride)."""
        plan = []

        def conv_bn(name, cin, cout, stride=1):
            plan.append(("conv", name.replace("#", "conv"), cin, cout, stride))
            plan.append(("bn", name.replace("#", "bn"), cout, cout, 1))

        conv_bn("renderer.block0.#0", self.in_dim, self.block0, stride=2)
        plan.append(("relu", "", 0, 0, 1))
        ch = self.block0
        for b in range(1, self.decoder_blocks + 1):
            for j in range(self.convs_per_decoder):
                conv_bn(f"renderer.block{b}.#{j}", ch, self.decoder)
                ch = self.decoder
            plan.append(("relu", "", 0, 0, 1))
        for u, width in enumerate(self.up):
            plan.append(("up", "", 0, 0, 1))
            for j in range(self.convs_per_up):
                conv_bn(f"renderer.up{u}.#{j}", ch, width)
                ch = width
            plan.append(("sigmoid" if u == len(self.up) - 1 else "relu", "", 0, 0, 1))
        return plan

    def output_extent(self, extent: int) -> int:
        return ((extent - 1) // 2 + 1) * 2 ** len(self.up)


@dataclass
class BevImage:
    rgb: np.ndarray  # (H, W, 3) in [0, 1], heading up
    anchor_pose: Pose2
    m_per_px: float = BEV_M_PER_PX

    @property
    def coverage_m(self) -> float:
        return self.rgb.shape[0] * self.m_per_px


def init_renderer(cfg: RenderHeadConfig, rng: np.random.Generator, dtype=np.float32):
    """Returns (params, buffers)."""
    params, buffers = {}, {}
    k = cfg.kernel
    for kind, name, cin, cout, _ in cfg.layers():
        if kind == "conv":
            params[name + ".weight"] = nn.kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
            params[name + ".bias"] = np.zeros(cout, dtype)
        elif kind == "bn":
            params[name + ".gamma"] = np.ones(cout, dtype)
            params[name + ".beta"] = np.zeros(cout, dtype)
            buffers[name + ".running_mean"] = np.zeros(cout, dtype)
            buffers[name + ".running_var"] = np.ones(cout, dtype)
    return params, buffers


def render_tensor(store, cfg: RenderHeadConfig, feature: np.ndarray, training: bool = False):
    """(d, l, w) feature -> (3, H, W) image and cache.

    In training mode batch-norm uses batch statistics and the running
    statistics in `store.buffers` are updated in place.
    """
    if feature.ndim != 3 or feature.shape[0] != cfg.in_dim:
        raise ValueError(f"expected a ({cfg.in_dim}, l, w) feature, got {feature.shape}")
    if feature.shape[1] < 2 or feature.shape[2] < 2:
        raise ValueError("feature extent too small for the strided first block")
    pad = cfg.kernel // 2
    x = feature[None]
    caches = []
    for kind, name, _, _, stride in cfg.layers():
        if kind == "conv":
            caches.append(x)
            x = nn.conv2d(x, store[name + ".weight"], store[name + ".bias"], stride=stride, padding=pad)
        elif kind == "bn":
            out, rm, rv, bcache = nn.batchnorm2d(x, store[name + ".gamma"], store[name + ".beta"],
                                                 store[name + ".running_mean"],
                                                 store[name + ".running_var"], training)
            if training:
                store.buffers[name + ".running_mean"] = rm
                store.buffers[name + ".running_var"] = rv
            caches.append(bcache)
            x = out
        elif kind == "relu":
            caches.append(x)
            x = nn.relu(x)
        elif kind == "up":
            caches.append(None)
            x = nn.upsample_nearest2x(x)
        else:
            x = nn.sigmoid(x)
            caches.append(x)
    return x[0], caches


def render_tensor_vjp(store, cfg: RenderHeadConfig, caches, grad):
    """Returns (grads, grad_feature)."""
    pad = cfg.kernel // 2
    g = grad[None]
    grads = {}
    for (kind, name, _, _, stride), cache in zip(reversed(cfg.layers()), reversed(caches)):
        if kind == "conv":
            g, gw, gb = nn.conv2d_vjp(g, cache, store[name + ".weight"], stride=stride, padding=pad)
            grads[name + ".weight"] = gw
            grads[name + ".bias"] = gb
        elif kind == "bn":
            g, gg, gbeta = nn.batchnorm2d_vjp(g, cache, store[name + ".gamma"])
            grads[name + ".gamma"] = gg
            grads[name + ".beta"] = gbeta
        elif kind == "relu":
            g = nn.relu_vjp(g, cache)
        elif kind == "up":
            g = nn.upsample_nearest2x_vjp(g)
        else:
            g = nn.sigmoid_vjp(g, cache)
    return grads, g[0]


def render(store, cfg: RenderHeadConfig, feature, training: bool = False) -> BevImage:
    """Render a BevFeature into a heading-up BevImage."""
    img, _ = render_tensor(store, cfg, feature.tensor, training)
    return BevImage(np.ascontiguousarray(img.transpose(1, 2, 0)), feature.anchor_pose)


def to_png_bytes_array(image: BevImage) -> np.ndarray:
    """8-bit export values, round(255 * v)."""
    return np.rint(np.clip(image.rgb, 0, 1) * 255).astype(np.uint8)
