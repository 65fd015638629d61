"""
Oracle depth and segmentation by exact voxel traversal.

Each pixel casts one ray through its center.  The ray is clipped to the grid
box and walked cell by cell (Amanatides & Woo stepping, all rays advanced
together); the first occupied cell gives the label, and the ray parameter at
which the ray enters that cell gives the depth.  Ray directions are
normalized to unit camera-z, so the parameter equals camera-frame depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegeneratePoseError
from ..grid import CameraCalibration, DepthMap, SegmentationMap, VoxelGrid

FREE = 0

# KITTI stereo rig: focal length (px) and baseline (m)
KITTI_FOCAL = 721.5377
KITTI_BASELINE = 0.54
BASELINE_EPE_PX = 0.79


@dataclass(frozen=True, eq=False)
class Rendering:
    depth: DepthMap
    segmentation: SegmentationMap
    hit_index: np.ndarray    # (h, w, 3) first-hit cell, -1 on misses

    def hit_mask(self, dims) -> np.ndarray:
        """Boolean grid of every cell that is some pixel's first hit."""
        out = np.zeros(dims, dtype=bool)
        ok = self.depth.valid
        idx = self.hit_index[ok]
        out[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        return out


def pixel_rays(calib: CameraCalibration):
    """Ego-frame origin and ``(h, w, 3)`` directions with unit camera-z."""
    w, h = calib.image_dims
    cols, rows = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pix = np.stack([cols, rows, np.ones_like(cols)], axis=-1)
    d_cam = pix @ np.linalg.inv(calib.K).T
    d_cam /= d_cam[..., 2:3]
    return calib.pose.camera_position, d_cam @ calib.R


def render_oracle(labels: VoxelGrid, calib: CameraCalibration, free_class: int = FREE) -> Rendering:
    spec = labels.spec
    dims = np.asarray(spec.dims)
    occ = labels.cells != free_class
    origin, dirs = pixel_rays(calib)
    w, h = calib.image_dims

    g0 = (origin - np.asarray(spec.origin)) / spec.resolution
    cam_cell = np.floor(g0).astype(int)
    if np.all(cam_cell >= 0) and np.all(cam_cell < dims) and occ[tuple(cam_cell)]:
        raise DegeneratePoseError(f"camera at {tuple(origin)} sits inside an occupied cell")

    gd = dirs.reshape(-1, 3) / spec.resolution
    n = gd.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(gd != 0, 1.0 / gd, np.inf)
        t_lo = np.where(gd != 0, (0.0 - g0) * inv, -np.inf)
        t_hi = np.where(gd != 0, (dims - g0) * inv, np.inf)
    # rays parallel to a slab must start inside it
    parallel_out = (gd == 0) & ((g0 < 0) | (g0 >= dims))
    t_enter = np.max(np.minimum(t_lo, t_hi), axis=1)
    t_exit = np.min(np.maximum(t_lo, t_hi), axis=1)
    t0 = np.maximum(t_enter, 0.0)
    active = (t_exit > t0) & ~np.any(parallel_out, axis=1)

    start = g0 + t0[:, None] * gd
    cell = np.clip(np.floor(start).astype(np.int64), 0, dims - 1)
    step = np.sign(gd).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = cell + (step > 0)
        t_max = np.where(step != 0, (boundary - g0) * inv, np.inf)
        t_delta = np.where(step != 0, np.abs(inv), np.inf)
    t_cur = t0.copy()

    depth = np.zeros(n)
    label = np.full(n, free_class, dtype=np.int64)
    hit = np.full((n, 3), -1, dtype=np.int64)
    rows = np.arange(n)
    for _ in range(int(dims.sum()) + 3):
        if not active.any():
            break
        a = rows[active]
        c = cell[a]
        here = occ[c[:, 0], c[:, 1], c[:, 2]]
        got = a[here]
        depth[got] = t_cur[got]
        label[got] = labels.cells[cell[got, 0], cell[got, 1], cell[got, 2]]
        hit[got] = cell[got]
        active[got] = False
        move = a[~here]
        axis = np.argmin(t_max[move], axis=1)
        t_cur[move] = t_max[move, axis]
        cell[move, axis] += step[move, axis]
        t_max[move, axis] += t_delta[move, axis]
        out = np.any((cell[move] < 0) | (cell[move] >= dims), axis=1)
        active[move[out]] = False

    valid = hit[:, 0] >= 0
    return Rendering(DepthMap(depth.reshape(h, w), valid.reshape(h, w)),
                     SegmentationMap(label.reshape(h, w)),
                     hit.reshape(h, w, 3))


def depth_noise_sigma(depth, error_ratio: float, epe_px: float = BASELINE_EPE_PX,
                      focal: float = KITTI_FOCAL, baseline: float = KITTI_BASELINE):
    """Metric std-dev of a stereo depth error of ``error_ratio * epe_px`` pixels.

    Disparity ``f B / d`` perturbed by ``delta`` pixels moves depth by about
    ``d^2 delta / (f B)``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    return error_ratio * epe_px * depth ** 2 / (focal * baseline)


def perturb_depth(depth: DepthMap, error_ratio: float, seed, *, epe_px: float = BASELINE_EPE_PX,
                  focal: float = KITTI_FOCAL, baseline: float = KITTI_BASELINE,
                  min_depth: float = 1e-3) -> DepthMap:
    """Zero-mean Gaussian depth noise, independent per valid pixel.

    Noisy depths are floored at ``min_depth`` so every valid pixel stays valid.
    """
    if error_ratio < 0:
        raise ValueError("error_ratio must be >= 0")
    if error_ratio == 0:
        return depth
    rng = np.random.default_rng(seed)
    sigma = depth_noise_sigma(depth.values, error_ratio, epe_px, focal, baseline)
    noise = rng.standard_normal(depth.shape) * sigma
    values = np.where(depth.valid, np.maximum(depth.values + noise, min_depth), 0.0)
    return DepthMap(values, depth.valid)
