"""Independent reference implementations used only by the tests.

Everything here is written with explicit loops or textbook matrix algebra and
shares no code with the package, so agreement is evidence rather than
tautology. They are slow and meant for small inputs.
"""
import math

import numpy as np


def se2_matrix(pose):
    """Vehicle (forward, right) -> map (northing, easting) homogeneous transform."""
    a = pose.azimuth
    return np.array([[math.cos(a), -math.sin(a), pose.northing],
                     [math.sin(a), math.cos(a), pose.easting],
                     [0.0, 0.0, 1.0]])


def relative_pose(current, previous):
    """(dx, dy, dtheta) from inv(T_prev) @ T_cur."""
    rel = np.linalg.inv(se2_matrix(previous)) @ se2_matrix(current)
    return rel[0, 2], rel[1, 2], math.atan2(rel[1, 0], rel[0, 0])


def bilinear_scalar(feature, r, c):
    """One channel-vector sample with zero padding, by explicit corner loop."""
    ch, h, w = feature.shape
    r0, c0 = math.floor(r), math.floor(c)
    out = np.zeros(ch)
    for dr in (0, 1):
        for dc in (0, 1):
            rr, cc = r0 + dr, c0 + dc
            wt = (1 - abs(r - rr)) * (1 - abs(c - cc))
            if 0 <= rr < h and 0 <= cc < w:
                for k in range(ch):
                    out[k] += wt * feature[k, rr, cc]
    return out


def conv2d_loops(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for r in range(oh):
                for c in range(ow):
                    acc = b[o] if b is not None else 0.0
                    for ci in range(cin):
                        for a in range(kh):
                            for bb in range(kw):
                                rr = r * stride + a - pad
                                cc = c * stride + bb - pad
                                if 0 <= rr < h and 0 <= cc < wd:
                                    acc += x[i, ci, rr, cc] * w[o, ci, a, bb]
                    out[i, o, r, c] = acc
    return out


def project_homogeneous(cam_k, extrinsic, point):
    """K [I|0] E [p; 1], dehomogenized."""
    p = extrinsic @ np.append(point, 1.0)
    uvw = cam_k @ p[:3]
    return uvw[0] / uvw[2], uvw[1] / uvw[2], p[2]


def ncc_loops(template, region, mask=None):
    """Zero-normalized cross-correlation by a double loop over placements."""
    th, tw = template.shape
    mask = np.ones((th, tw), bool) if mask is None else mask
    tvals = template[mask]
    tz = tvals - tvals.mean()
    tn = math.sqrt(float(np.dot(tz, tz)))
    out = np.zeros((region.shape[0] - th + 1, region.shape[1] - tw + 1))
    for r in range(out.shape[0]):
        for c in range(out.shape[1]):
            wv = region[r:r + th, c:c + tw][mask]
            wz = wv - wv.mean()
            wn = math.sqrt(float(np.dot(wz, wz)))
            out[r, c] = 0.0 if wn * wn <= 1e-12 * wv.size else float(np.dot(tz, wz)) / (tn * wn)
    return out


def softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def attend_scalar(q, keys, values, heads, bias=None, valid=None):
    """One query vector against a list of key/value vectors, per-head loops.

    bias[h][j] is added to head h's score for key j; invalid keys are skipped.
    A query with no valid key returns zeros.
    """
    dim = len(q)
    dh = dim // heads
    out = np.zeros(dim)
    idx = [j for j in range(len(keys)) if valid is None or valid[j]]
    if not idx:
        return out
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = []
        for j in idx:
            s = sum(q[sl][t] * keys[j][sl][t] for t in range(dh)) / math.sqrt(dh)
            if bias is not None:
                s += bias[h][j]
            scores.append(s)
        wts = softmax_list(scores)
        for wt, j in zip(wts, idx):
            out[sl] += wt * values[j][sl]
    return out


def affine(x, w, b):
    return np.array([sum(w[o, i] * x[i] for i in range(len(x))) + b[o] for o in range(w.shape[0])])


def temporal_attention_loops(params, heads, b_prev, query, clamp=4.0):
    """Per-query-cell re-implementation of the temporal stage."""
    d, l, w = query.shape
    ow, ob = params["encoder.temporal.offset.weight"], params["encoder.temporal.offset.bias"]
    table = params["encoder.temporal.rpb"]
    p = {k: params[f"encoder.temporal.attn.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    # keys: one deformed sample of b_prev per cell
    keys, vals, pts = [], [], []
    for r in range(l):
        for c in range(w):
            off = [min(max(sum(ow[k, i, 0, 0] * query[i, r, c] for i in range(d)) + ob[k], -clamp), clamp)
                   for k in range(2)]
            kr, kc = r + off[0], c + off[1]
            s = bilinear_scalar(b_prev, kr, kc)
            keys.append(affine(s, p["wk"], p["bk"]))
            vals.append(affine(s, p["wv"], p["bv"]))
            pts.append((round(kr), round(kc)))
    out = np.zeros((d, l, w))
    for r in range(l):
        for c in range(w):
            qv = affine(query[:, r, c], p["wq"], p["bq"])
            bias = [[table[h, min(max(r - kr, -(l - 1)), l - 1) + l - 1, min(max(c - kc, -(w - 1)), w - 1) + w - 1]
                     for kr, kc in pts] for h in range(heads)]
            z = attend_scalar(qv, keys, vals, heads, bias)
            out[:, r, c] = affine(z, p["wo"], p["bo"])
    return out


def spatial_attention_loops(params, heads, feats, b_temp, refs, views=("left", "center", "right"), clamp=4.0):
    """Per-query-cell re-implementation of the spatial stage with fusion."""
    d, l, w = b_temp.shape
    p = {k: params[f"encoder.spatial.attn.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    pb = params["encoder.spatial.point_bias"]
    per_view = np.zeros((3, d, l, w))
    for i, view in enumerate(views):
        ow = params[f"encoder.spatial.offset.{view}.weight"]
        ob = params[f"encoder.spatial.offset.{view}.bias"]
        ref = refs[i]
        hh = ref.rows.shape[-1]
        for r in range(l):
            for c in range(w):
                xq = b_temp[:, r, c]
                off = [min(max(sum(ow[k, t, 0, 0] * xq[t] for t in range(d)) + ob[k], -clamp), clamp)
                       for k in range(2 * hh)]
                keys, vals, valid = [], [], []
                for j in range(hh):
                    s = bilinear_scalar(feats[i], ref.rows[r, c, j] + off[2 * j], ref.cols[r, c, j] + off[2 * j + 1])
                    keys.append(affine(s, p["wk"], p["bk"]))
                    vals.append(affine(s, p["wv"], p["bv"]))
                    valid.append(bool(ref.mask[r, c, j]))
                if not any(valid):
                    continue
                z = attend_scalar(affine(xq, p["wq"], p["bq"]), keys, vals, heads, pb, valid)
                per_view[i, :, r, c] = affine(z, p["wo"], p["bo"])
    fw, fb = params["encoder.fusion.weight"], params["encoder.fusion.bias"]
    stacked = per_view.reshape(3 * d, l, w)
    out = np.zeros((d, l, w))
    for o in range(d):
        out[o] = fb[o] + sum(fw[o, k, 0, 0] * stacked[k] for k in range(3 * d))
    return out
