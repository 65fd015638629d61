"""Independent scalar reference implementations used by the tests.

Everything here loops cell by cell with plain ``math``; none of it calls the
vectorized code paths under test.
"""

import math
from fractions import Fraction

import numpy as np

from occvox.grid import CameraCalibration, DepthMap, FramePose, GridSpec, SegmentationMap, pinhole_K


def matvec(M, x):
    return [sum(M[r][c] * x[c] for c in range(len(x))) for r in range(len(M))]


def project(K, R, t, P):
    q = [a + b for a, b in zip(matvec(R, P), t)]
    p = matvec(K, q)
    if q[2] <= 0:
        return None, None, q[2]
    return p[0] / q[2], p[1] / q[2], q[2]


def kernel(x, kind):
    if kind == "exp":
        return math.exp(-x)
    if kind == "tanh":
        return 1.0 - math.tanh(x)
    if kind == "sigmoid":
        return 2.0 * (1.0 - 1.0 / (1.0 + math.exp(-x)))
    raise ValueError(kind)


def cells(spec):
    H, W, Z = spec.dims
    for i in range(H):
        for j in range(W):
            for k in range(Z):
                c = [spec.origin[0] + (i + 0.5) * spec.resolution,
                     spec.origin[1] + (j + 0.5) * spec.resolution,
                     spec.origin[2] + (k + 0.5) * spec.resolution]
                yield (i, j, k), c


def voxel_lookup(calib, depth, P):
    """(u, v, z, pixel or None, depth or None) for one voxel center."""
    K, R, t = calib.K.tolist(), calib.R.tolist(), calib.t.tolist()
    w, h = calib.image_dims
    u, v, z = project(K, R, t, P)
    if u is None or not (0 <= u < w and 0 <= v < h):
        return u, v, z, None, None
    px, py = int(math.floor(u)), int(math.floor(v))
    d = None
    if depth is not None and depth.valid[py, px]:
        d = float(depth.values[py, px])
    return u, v, z, (px, py), d


def confidence_grid(spec, calib, depth, kind="exp"):
    out = np.zeros(spec.dims)
    for idx, P in cells(spec):
        _, _, z, pix, d = voxel_lookup(calib, depth, P)
        if pix is not None and d is not None:
            out[idx] = kernel(abs(z - d), kind)
    return out


def bilinear(features, u, v, scale):
    C, h, w = features.shape
    x = min(max(u * scale - 0.5, 0.0), w - 1.0)
    y = min(max(v * scale - 0.5, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return [(1 - fy) * ((1 - fx) * features[c, y0, x0] + fx * features[c, y0, x1])
            + fy * ((1 - fx) * features[c, y1, x0] + fx * features[c, y1, x1])
            for c in range(C)]


def feature_voxel(spec, calib, depth, features, scale, marker=None, kind="exp"):
    C = features.shape[0]
    marker = [0.0] * C if marker is None else list(marker)
    out = np.zeros(spec.dims + (C,))
    for idx, P in cells(spec):
        u, v, z, pix, d = voxel_lookup(calib, depth, P)
        if pix is None:
            out[idx] = marker
            continue
        c = kernel(abs(z - d), kind) if d is not None else 0.0
        out[idx] = [c * f for f in bilinear(features, u, v, scale)]
    return out


def semantic_voxel(spec, frames, num_classes, kind="exp"):
    out = np.zeros(spec.dims + (num_classes,))
    for idx, P in cells(spec):
        acc = [0.0] * num_classes
        for calib, depth, seg in frames:
            _, _, z, pix, d = voxel_lookup(calib, depth, P)
            if pix is None or d is None:
                continue
            acc[int(seg.labels[pix[1], pix[0]])] += kernel(abs(z - d), kind)
        m = max(acc)
        ex = [math.exp(a - m) for a in acc]
        s = sum(ex)
        out[idx] = [e / s for e in ex]
    return out


def trilinear(value, p):
    """Zero-padded trilinear sample of ``(C, H, W, Z)`` at cell coordinate ``p``."""
    C, H, W, Z = value.shape
    base = [int(math.floor(x)) for x in p]
    frac = [x - b for x, b in zip(p, base)]
    out = [0.0] * C
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                i, j, k = base[0] + di, base[1] + dj, base[2] + dk
                if not (0 <= i < H and 0 <= j < W and 0 <= k < Z):
                    continue
                wgt = ((frac[0] if di else 1 - frac[0]) * (frac[1] if dj else 1 - frac[1])
                       * (frac[2] if dk else 1 - frac[2]))
                for c in range(C):
                    out[c] += wgt * value[c, i, j, k]
    return out


def deformable_attention(query, value, params):
    Cq, H, W, Z = query.shape
    Ns = params.attn_weight.shape[0]
    Cout = params.value_proj.shape[1]
    out = np.zeros((Cout, H, W, Z))
    for i in range(H):
        for j in range(W):
            for k in range(Z):
                q = [query[c, i, j, k] for c in range(Cq)]
                logits = [sum(params.attn_weight[s, c] * q[c] for c in range(Cq))
                          + params.attn_bias[s] for s in range(Ns)]
                m = max(logits)
                ex = [math.exp(a - m) for a in logits]
                A = [e / sum(ex) for e in ex]
                for s in range(Ns):
                    off = [sum(params.offset_weight[s, d, c] * q[c] for c in range(Cq))
                           + params.offset_bias[s, d] for d in range(3)]
                    sample = trilinear(value, [i + off[0], j + off[1], k + off[2]])
                    for o in range(Cout):
                        out[o, i, j, k] += A[s] * sum(params.value_proj[s, o, c] * sample[c]
                                                      for c in range(len(sample)))
    return out


def confusion(pred, gt, num_classes, ignore=255):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        if g == ignore:
            continue
        cm[g][p] += 1
    return cm


def iou_miou(pred, gt, num_classes, free=0, ignore=255):
    cm = confusion(pred, gt, num_classes, ignore)
    tp = fp = fn = 0
    for g in range(num_classes):
        for p in range(num_classes):
            n = cm[g][p]
            if g != free and p != free:
                tp += n
            elif g == free and p != free:
                fp += n
            elif g != free and p == free:
                fn += n
    iou = float(Fraction(tp, tp + fp + fn)) if tp + fp + fn else float("nan")
    vals = []
    for c in range(num_classes):
        if c == free:
            continue
        inter = cm[c][c]
        union = sum(cm[c]) + sum(cm[r][c] for r in range(num_classes)) - inter
        if union:
            vals.append(Fraction(inter, union))
    return iou, (float(sum(vals) / len(vals)) if vals else float("nan"))


def random_scene(rng, max_dim=16, n_frames=1, num_classes=4, image=(24, 18), channels=2):
    """Random small grid viewed by cameras behind it, with random rasters."""
    dims = tuple(int(v) for v in rng.integers(2, max_dim + 1, size=3))
    res = float(rng.uniform(0.1, 0.5))
    spec = GridSpec.from_dims(dims, res, origin=(0.0, -dims[1] * res / 2, -dims[2] * res / 2))
    w, h = image
    frames, feats = [], []
    depth_scale = dims[0] * res
    for _ in range(n_frames):
        pos = (-float(rng.uniform(0.5, 2.0)), float(rng.normal(0, 0.2)), float(rng.normal(0, 0.2)))
        calib = CameraCalibration.from_pose(pinhole_K(float(rng.uniform(10, 25)), w, h),
                                            FramePose.from_camera_position(pos), image)
        values = rng.uniform(0.3, depth_scale + 2.0, size=(h, w))
        valid = rng.random((h, w)) > 0.15
        seg = SegmentationMap(rng.integers(0, num_classes, size=(h, w)))
        frames.append((calib, DepthMap(values, valid), seg))
        feats.append(rng.normal(size=(channels, h // 2, w // 2)))
    return spec, frames, feats
