"""Dense numpy operators with hand-written vector-Jacobian products.

Every forward op here has a matching ``*_vjp`` that maps the gradient of a
scalar loss w.r.t. the op output back to its inputs. Ops work in whatever
float dtype they are given (float32 for normal runs, float64 for gradient
checks). Images and feature maps use NCHW layout.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_finite(name, arr):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{name}: non-finite values")


# convolution

def _conv_windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win[:, :, :ho, :wo], ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (N, C, H, W) input with (O, C, kh, kw) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs weight {weight.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    kh, kw = weight.shape[2:]
    win, ho, wo = _conv_windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_vjp(grad, x, weight, stride=1, padding=0):
    """Returns (grad_x, grad_weight, grad_bias)."""
    kh, kw = weight.shape[2:]
    win, ho, wo = _conv_windows(x, kh, kw, stride, padding)
    gw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
    gb = grad.sum(axis=(0, 2, 3))
    n, c, h, w = x.shape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad, weight[:, :, i, j], axes=([1], [0]))  # N, Ho, Wo, C
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                contrib.transpose(0, 3, 1, 2)
    gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
    return np.ascontiguousarray(gx), gw, gb


# batch norm

def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Returns (out, new_running_mean, new_running_var, cache)."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("batchnorm parameter length does not match channels")
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m == 0:
            raise ValueError("empty batch in training mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * m / max(m - 1, 1)
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * unbiased
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, new_mean.astype(x.dtype), new_var.astype(x.dtype), (xhat, inv_std, training)


def batchnorm2d_vjp(grad, cache, gamma):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, training = cache
    ggamma = (grad * xhat).sum(axis=(0, 2, 3))
    gbeta = grad.sum(axis=(0, 2, 3))
    g = grad * gamma[None, :, None, None]
    if not training:
        return g * inv_std[None, :, None, None], ggamma, gbeta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    gx = (inv_std[None, :, None, None] / m) * (
        m * g - g.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (g * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return gx, ggamma, gbeta


# pointwise and shape ops

def relu(x):
    return np.maximum(x, 0)


def relu_vjp(grad, x):
    return grad * (x > 0)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_vjp(grad, y):
    return grad * y * (1 - y)


def upsample_nearest2x(x):
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample_nearest2x_vjp(grad):
    *lead, h, w = grad.shape
    return grad.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))


def linear(x, weight, bias=None):
    """x (..., in) @ weight(out, in).T + bias."""
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def linear_vjp(grad, x, weight):
    """Returns (grad_x, grad_weight, grad_bias)."""
    gx = grad @ weight
    g2 = grad.reshape(-1, grad.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return gx, g2.T @ x2, g2.sum(axis=0)


def softmax(x, axis=-1):
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(grad, y, axis=-1):
    return y * (grad - (grad * y).sum(axis=axis, keepdims=True))


# attention

def attention(q, k, v, heads, bias=None, mask=None):
    """Scaled dot-product attention over `heads` heads.

    q: (N, D). Keys/values are either shared, (M, D), or per query,
    (N, P, D). `bias` broadcasts to the (heads, N, M|P) score tensor and
    `mask` (True = usable key) to (N, M|P). Queries without any usable key
    return zeros. Returns (out (N, D), cache).
    """
    n, dim = q.shape
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by {heads} heads")
    if k.shape != v.shape or k.shape[-1] != dim:
        raise ValueError("key/value dims must match the query dim")
    per_query = k.ndim == 3
    if per_query and k.shape[0] != n:
        raise ValueError("per-query keys must have one key set per query")
    dh = dim // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.reshape(n, heads, dh)
    kh = k.reshape(k.shape[:-1] + (heads, dh))
    vh = v.reshape(kh.shape)
    if per_query:
        scores = np.einsum("nhd,nphd->hnp", qh, kh) * scale
    else:
        scores = np.einsum("nhd,mhd->hnm", qh, kh) * scale
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        mask = np.broadcast_to(mask, scores.shape[1:])
        scores = np.where(mask[None], scores, -np.inf)
        live = mask.any(axis=-1)
        scores = np.where(live[None, :, None], scores, 0.0)
    weights = softmax(scores, axis=-1)
    if mask is not None:
        weights = np.where(mask[None] & live[None, :, None], weights, 0.0).astype(q.dtype)
    if per_query:
        out = np.einsum("hnp,nphd->nhd", weights, vh)
    else:
        out = np.einsum("hnm,mhd->nhd", weights, vh)
    return out.reshape(n, dim), (qh, kh, vh, weights, scale, per_query)


def attention_vjp(grad, cache):
    """Returns (grad_q, grad_k, grad_v, grad_scores); grad_scores is also the bias gradient."""
    qh, kh, vh, a, scale, per_query = cache
    n, heads, dh = qh.shape
    g = grad.reshape(n, heads, dh)
    if per_query:
        gv = np.einsum("hnp,nhd->nphd", a, g)
        ga = np.einsum("nhd,nphd->hnp", g, vh)
    else:
        gv = np.einsum("hnm,nhd->mhd", a, g)
        ga = np.einsum("nhd,mhd->hnm", g, vh)
    gs = softmax_vjp(ga, a, axis=-1)
    if per_query:
        gq = np.einsum("hnp,nphd->nhd", gs, kh) * scale
        gk = np.einsum("hnp,nhd->nphd", gs, qh) * scale
    else:
        gq = np.einsum("hnm,mhd->nhd", gs, kh) * scale
        gk = np.einsum("hnm,nhd->mhd", gs, qh) * scale
    dim = heads * dh
    return (gq.reshape(n, dim), gk.reshape(gk.shape[:-2] + (dim,)),
            gv.reshape(gv.shape[:-2] + (dim,)), gs)


def multi_head_attention(xq, xk, xv, params, heads, bias=None, mask=None):
    """Project queries/keys/values, attend, concatenate heads, project out.

    `params` holds q/k/v/o weights and biases under keys ``wq, bq, ..., wo, bo``.
    """
    q = linear(xq, params["wq"], params["bq"])
    k = linear(xk, params["wk"], params["bk"])
    v = linear(xv, params["wv"], params["bv"])
    z, acache = attention(q, k, v, heads, bias, mask)
    out = linear(z, params["wo"], params["bo"])
    return out, (xq, xk, xv, z, acache)


def multi_head_attention_vjp(grad, cache, params):
    """Returns (grad_xq, grad_xk, grad_xv, grads, grad_scores)."""
    xq, xk, xv, z, acache = cache
    grads = {}
    gz, grads["wo"], grads["bo"] = linear_vjp(grad, z, params["wo"])
    gq, gk, gv, gs = attention_vjp(gz, acache)
    gxq, grads["wq"], grads["bq"] = linear_vjp(gq, xq, params["wq"])
    gxk, grads["wk"], grads["bk"] = linear_vjp(gk, xk, params["wk"])
    gxv, grads["wv"], grads["bv"] = linear_vjp(gv, xv, params["wv"])
    return gxq, gxk, gxv, grads, gs


# parameters

def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Named trainable tensors, their gradient accumulators and non-trainable buffers."""

    def __init__(self, params=None, buffers=None):
        self.params: dict[str, np.ndarray] = dict(params or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})
        dup = set(self.params) & set(self.buffers)
        if dup:
            raise ValueError(f"names used as both parameter and buffer: {sorted(dup)}")
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __getitem__(self, name):
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def add(self, name, value, trainable=True):
        if name in self:
            raise KeyError(f"duplicate tensor name {name!r}")
        if trainable:
            self.params[name] = value
            self.grads[name] = np.zeros_like(value)
        else:
            self.buffers[name] = value

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def accumulate(self, grads: dict):
        for name, g in grads.items():
            if g.shape != self.grads[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape for {name}")
            self.grads[name] += g

    def num_params(self, prefix="") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self.params.items()},
                          {k: v.astype(dtype) for k, v in self.buffers.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()})

    def tensors(self) -> dict:
        return {**self.params, **self.buffers}


# BRW1 weight files: magic, u64 manifest length, JSON manifest, raw f32 LE blob.
# Buffers carry a "trainable": false flag in the manifest entry.
MAGIC = b"BRW1"


def save_weights(path, store: ParamStore):
    manifest = {}
    chunks = []
    offset = 0
    for trainable, group in ((True, store.params), (False, store.buffers)):
        for name in sorted(group):
            # asarray, not ascontiguousarray: the latter turns 0-d tensors into 1-d
            arr = np.asarray(group[name], dtype="<f4")
            entry = {"dtype": "f32", "shape": list(arr.shape), "byte_offset": offset}
            if not trainable:
                entry["trainable"] = False
            manifest[name] = entry
            chunks.append(arr.tobytes(order="C"))
            offset += arr.nbytes
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_weights(path) -> ParamStore:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a BRW1 weight file")
    (hlen,) = struct.unpack("<Q", data[4:12])
    manifest = json.loads(data[12:12 + hlen].decode("utf-8"))
    blob = memoryview(data)[12 + hlen:]
    params, buffers = {}, {}
    for name, entry in manifest.items():
        if entry["dtype"] != "f32":
            raise ValueError(f"{name}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["byte_offset"]
        if start + 4 * count > len(blob):
            raise ValueError(f"{name}: blob truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
        (params if entry.get("trainable", True) else buffers)[name] = arr
    return ParamStore(params, buffers)
