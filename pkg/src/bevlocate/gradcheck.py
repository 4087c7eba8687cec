"""Central finite-difference checks for every hand-written VJP.

Per-op checks compare the analytic directional derivative <grad, v> with
(L(x + h v) - L(x - h v)) / 2h for a random linear functional L of the op
output. Composed checks probe single parameter coordinates of the miniature
model. Everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import nncore as nn
from .geometry import bilinear_sample, bilinear_sample_vjp
from .model import BevModel
from .training import mse_loss

OP_RTOL = 1e-5
OP_STEP = 1e-4
COMPOSED_RTOL = 1e-4
# Composed probes take the better of a wide and a narrow central difference:
# wide steps can straddle ReLU / bilinear-cell kinks, narrow ones lose
# precision on tiny gradients.
COMPOSED_STEPS = (1e-4, 1e-6, 1e-8)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    probes: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def rel_err(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(name, fn, vjp, inputs: dict, rng, probes=10, step=OP_STEP, tol=OP_RTOL):
    """fn(**inputs) -> array; vjp(weights, **inputs) -> {input name: grad}."""
    out = fn(**inputs)
    weights = rng.standard_normal(out.shape)
    grads = vjp(weights, **inputs)
    worst = 0.0
    for _ in range(probes):
        dirs = {k: rng.standard_normal(np.shape(inputs[k])) for k in grads}
        analytic = sum(float(np.sum(grads[k] * dirs[k])) for k in grads)
        plus = {**inputs, **{k: inputs[k] + step * dirs[k] for k in grads}}
        minus = {**inputs, **{k: inputs[k] - step * dirs[k] for k in grads}}
        numeric = (np.sum(fn(**plus) * weights) - np.sum(fn(**minus) * weights)) / (2 * step)
        worst = max(worst, rel_err(analytic, float(numeric)))
    return CheckResult(name, worst, tol, probes)


def _conv_case(rng, stride, padding):
    inputs = {"x": rng.standard_normal((2, 4, 5, 5)), "w": rng.standard_normal((3, 4, 3, 3)),
              "b": rng.standard_normal(3)}

    def fn(x, w, b):
        return nn.conv2d(x, w, b, stride, padding)

    def vjp(g, x, w, b):
        gx, gw, gb = nn.conv2d_vjp(g, x, w, stride, padding)
        return {"x": gx, "w": gw, "b": gb}

    return fn, vjp, inputs


def _bn_case(rng, training):
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    inputs = {"x": rng.standard_normal((2, 3, 4, 4)), "gamma": rng.standard_normal(3),
              "beta": rng.standard_normal(3)}

    def fn(x, gamma, beta):
        return nn.batchnorm2d(x, gamma, beta, rm, rv, training)[0]

    def vjp(g, x, gamma, beta):
        cache = nn.batchnorm2d(x, gamma, beta, rm, rv, training)[3]
        gx, gg, gb = nn.batchnorm2d_vjp(g, cache, gamma)
        return {"x": gx, "gamma": gg, "beta": gb}

    return fn, vjp, inputs


def _attention_case(rng, per_query, masked=False):
    n, m, d, heads = 5, 4, 6, 2
    kshape = (n, m, d) if per_query else (m, d)
    mask = None
    if masked:
        mask = rng.random((n, m)) > 0.3
        mask[:, 0] = True
    inputs = {"q": rng.standard_normal((n, d)), "k": rng.standard_normal(kshape),
              "v": rng.standard_normal(kshape), "bias": rng.standard_normal((heads, n, m))}

    def fn(q, k, v, bias):
        return nn.attention(q, k, v, heads, bias, mask)[0]

    def vjp(g, q, k, v, bias):
        gq, gk, gv, gs = nn.attention_vjp(g, nn.attention(q, k, v, heads, bias, mask)[1])
        return {"q": gq, "k": gk, "v": gv, "bias": gs}

    return fn, vjp, inputs


def _mha_case(rng):
    n, m, d, heads = 4, 6, 8, 2
    keys = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
    inputs = {k: rng.standard_normal((d, d) if k[0] == "w" else d) * 0.5 for k in keys}
    inputs.update(xq=rng.standard_normal((n, d)), xk=rng.standard_normal((m, d)),
                  xv=rng.standard_normal((m, d)))

    def split(kw):
        return {k: kw[k] for k in keys}

    def fn(xq, xk, xv, **kw):
        return nn.multi_head_attention(xq, xk, xv, split(kw), heads)[0]

    def vjp(g, xq, xk, xv, **kw):
        cache = nn.multi_head_attention(xq, xk, xv, split(kw), heads)[1]
        gxq, gxk, gxv, grads, _ = nn.multi_head_attention_vjp(g, cache, split(kw))
        return {"xq": gxq, "xk": gxk, "xv": gxv, **grads}

    return fn, vjp, inputs


def _bilinear_case(rng):
    inputs = {"feature": rng.standard_normal((3, 6, 7)),
              "rows": rng.uniform(-1.5, 6.5, (4, 5)), "cols": rng.uniform(-1.5, 7.5, (4, 5))}

    def fn(feature, rows, cols):
        return bilinear_sample(feature, rows, cols)

    def vjp(g, feature, rows, cols):
        gf, gr, gc = bilinear_sample_vjp(g, feature, rows, cols)
        return {"feature": gf, "rows": gr, "cols": gc}

    return fn, vjp, inputs


def _unary(fwd, back, shape, uses_output=False):
    def make(rng):
        inputs = {"x": rng.standard_normal(shape)}

        def vjp(g, x):
            return {"x": back(g, fwd(x) if uses_output else x)}

        return (lambda x: fwd(x)), vjp, inputs
    return make


def _linear_case(rng):
    inputs = {"x": rng.standard_normal((3, 4)), "w": rng.standard_normal((5, 4)), "b": rng.standard_normal(5)}

    def vjp(g, x, w, b):
        gx, gw, gb = nn.linear_vjp(g, x, w)
        return {"x": gx, "w": gw, "b": gb}

    return (lambda x, w, b: nn.linear(x, w, b)), vjp, inputs


OP_CASES = {
    "conv2d": lambda r: _conv_case(r, 1, 0),
    "conv2d_stride2_pad1": lambda r: _conv_case(r, 2, 1),
    "batchnorm2d_train": lambda r: _bn_case(r, True),
    "batchnorm2d_eval": lambda r: _bn_case(r, False),
    "relu": _unary(nn.relu, nn.relu_vjp, (10,)),
    "sigmoid": _unary(nn.sigmoid, nn.sigmoid_vjp, (10,), uses_output=True),
    "softmax": _unary(nn.softmax, nn.softmax_vjp, (2, 5), uses_output=True),
    "upsample_nearest2x": _unary(nn.upsample_nearest2x, lambda g, x: nn.upsample_nearest2x_vjp(g), (1, 2, 3, 2)),
    "linear": _linear_case,
    "attention_shared": lambda r: _attention_case(r, False),
    "attention_per_query": lambda r: _attention_case(r, True),
    "attention_masked": lambda r: _attention_case(r, True, masked=True),
    "multi_head_attention": _mha_case,
    "bilinear_sample": _bilinear_case,
}


def run_op_checks(seed=0, probes=10) -> list[CheckResult]:
    results = []
    for name, make in OP_CASES.items():
        rng = np.random.default_rng(seed)
        fn, vjp, inputs = make(rng)
        results.append(directional_check(name, fn, vjp, inputs, rng, probes))
    return results


def _probe_coords(store, rng, count, prefix=""):
    names = sorted(k for k in store.params if k.startswith(prefix))
    sizes = np.array([store.params[k].size for k in names], dtype=float)
    # favor small tensors a little so every module gets probed
    weights = np.sqrt(sizes) / np.sqrt(sizes).sum()
    picks = []
    for _ in range(count):
        name = names[rng.choice(len(names), p=weights)]
        picks.append((name, int(rng.integers(store.params[name].size))))
    return picks


def _coordinate_check(name, model, loss_fn, grads, rng, probes, tol, prefix="",
                      steps=COMPOSED_STEPS):
    base = abs(loss_fn())
    worst = 0.0
    for pname, idx in _probe_coords(model.store, rng, probes, prefix):
        arr = model.store.params[pname].reshape(-1)
        orig = arr[idx]
        analytic = float(grads[pname].reshape(-1)[idx])
        best = np.inf
        for step in steps:
            arr[idx] = orig + step
            lp = loss_fn()
            arr[idx] = orig - step
            lm = loss_fn()
            arr[idx] = orig
            # floor at the FD roundoff scale; e.g. biases feeding train-mode
            # batch norm have exactly zero gradient
            floor = max(1e-8, 1e4 * np.finfo(float).eps * base / step)
            best = min(best, rel_err(analytic, (lp - lm) / (2 * step), floor))
        worst = max(worst, best)
    return CheckResult(name, worst, tol, probes)


def miniature_window(model: BevModel, rng, frames=3, step_m=0.6):
    """Random images with a short forward/turning drive."""
    from .geometry import Pose2

    cfg = model.enc_cfg
    out = []
    for t in range(frames):
        imgs = rng.random((3, 3, cfg.image_h, cfg.image_w))
        pose = Pose2(100.0 + 0.3 * t, 200.0 + step_m * t, 0.15 * t)
        out.append(enc.WindowFrame(imgs, pose, float(t)))
    return out


def run_composed_checks(seed=0, probes=20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    model = BevModel.miniature(seed=seed, dtype=np.float64, offset_scale=0.05)
    frames = miniature_window(model, rng)

    def enc_loss():
        feat, _ = enc.encode_window(model.store.params, model.enc_cfg, model.refs, frames)
        return float(feat.tensor.sum())

    feat, tape = enc.encode_window(model.store.params, model.enc_cfg, model.refs, frames)
    grads = enc.encode_window_vjp(model.store.params, model.enc_cfg, tape, np.ones_like(feat.tensor))
    results = [_coordinate_check("encoder_window_sum", model, enc_loss, grads, rng, probes,
                                 COMPOSED_RTOL, "encoder.")]

    label = rng.random((3, 64, 64))

    def full_loss():
        # training-mode BN without touching the running statistics
        saved = {k: v.copy() for k, v in model.store.buffers.items()}
        img, _, _ = model.forward(frames, training=True)
        model.store.buffers.update(saved)
        return mse_loss(img, label)[0]

    saved = {k: v.copy() for k, v in model.store.buffers.items()}
    img, _, tape = model.forward(frames, training=True)
    model.store.buffers.update(saved)
    grads = model.backward(tape, mse_loss(img, label)[1])
    results.append(_coordinate_check("encoder_renderer_mse", model, full_loss, grads, rng, probes,
                                     COMPOSED_RTOL))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.tol:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
