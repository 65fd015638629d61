"""
Voxel-to-pixel projection and soft occupancy confidence.

A voxel center ``P`` (ego frame) maps to camera coordinates ``q = R P + t``
and to pixel ``(u, v) = (K q)[:2] / q_z``.  Its confidence against the
observed depth ``d`` at that pixel is ``exp(-|q_z - d|)``; voxels that do not
land on a valid depth pixel get 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError
from .grid import CameraCalibration, DepthMap, GridSpec, VoxelGrid

CONFIDENCE_KINDS = ("exp", "tanh_mapped", "sigmoid_mapped")
_ALIASES = {"tanh": "tanh_mapped", "sigmoid": "sigmoid_mapped"}


@dataclass(frozen=True)
class ProjectedPoint:
    u: float
    v: float
    z: float
    in_bounds: bool


def project_points(calib: CameraCalibration, points) -> tuple:
    """Vectorized projection of ``(..., 3)`` ego-frame points.

    Returns ``(u, v, z, in_bounds)`` arrays of shape ``points.shape[:-1]``.
    ``u`` and ``v`` are NaN where ``z <= 0``.
    """
    points = np.asarray(points, dtype=np.float64)
    q = points @ calib.R.T + calib.t
    p = q @ calib.K.T
    z = q[..., 2]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = np.where(z > 0, p[..., 0] / z, np.nan)
        v = np.where(z > 0, p[..., 1] / z, np.nan)
    w, h = calib.image_dims
    with np.errstate(invalid="ignore"):
        in_bounds = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    return u, v, z, in_bounds


def project_point(calib: CameraCalibration, P) -> ProjectedPoint:
    u, v, z, ok = project_points(calib, np.asarray(P, dtype=np.float64).reshape(3))
    return ProjectedPoint(float(u), float(v), float(z), bool(ok))


def _check_finite(*values):
    for val in values:
        if not np.all(np.isfinite(val)):
            raise ValueError("confidence inputs must be finite")


def soft_confidence(z, d):
    """``exp(-|z - d|)``; works on scalars and arrays alike."""
    z = np.asarray(z, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    _check_finite(z, d)
    out = np.exp(-np.abs(z - d))
    return float(out) if out.ndim == 0 else out


def confidence_variant(z, d, kind: str = "exp"):
    """Distance-to-confidence kernels mapping ``|z - d|`` in [0, inf) onto (0, 1].

    ``exp``: ``exp(-x)``; ``tanh_mapped``: ``1 - tanh(x)``;
    ``sigmoid_mapped``: ``2 * (1 - sigmoid(x))``.
    """
    kind = _ALIASES.get(kind, kind)
    if kind == "exp":
        return soft_confidence(z, d)
    z = np.asarray(z, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    _check_finite(z, d)
    x = np.abs(z - d)
    # 1 - tanh(x) = 2 sigmoid(-2x) and 1 - sigmoid(x) = sigmoid(-x), without cancellation
    if kind == "tanh_mapped":
        out = 2.0 * expit(-2.0 * x)
    elif kind == "sigmoid_mapped":
        out = 2.0 * expit(-x)
    else:
        raise ValueError(f"unknown confidence kind {kind!r}; expected one of {CONFIDENCE_KINDS}")
    return float(out) if out.ndim == 0 else out


def check_raster_dims(calib: CameraCalibration, raster_shape) -> None:
    w, h = calib.image_dims
    if tuple(raster_shape) != (h, w):
        raise ConfigurationError(
            f"raster shape {tuple(raster_shape)} does not match image dims (h={h}, w={w})")


@dataclass(frozen=True)
class GridProjection:
    """Per-voxel projection of a grid into one camera, with depth sampled."""

    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    in_bounds: np.ndarray
    px: np.ndarray       # nearest pixel column (-1 outside)
    py: np.ndarray       # nearest pixel row (-1 outside)
    d: np.ndarray        # sampled depth (0 where unusable)
    has_depth: np.ndarray  # in_bounds and the sampled pixel is valid


def project_grid(spec: GridSpec, calib: CameraCalibration, depth: DepthMap = None) -> GridProjection:
    """Project every voxel center; sample ``depth`` by nearest pixel.

    Pixel ``(col, row)`` covers ``[col, col + 1) x [row, row + 1)`` so the
    nearest pixel of an in-bounds point is ``floor(u), floor(v)``.
    """
    u, v, z, inb = project_points(calib, spec.centers())
    px = np.full(inb.shape, -1, dtype=np.int64)
    py = np.full(inb.shape, -1, dtype=np.int64)
    px[inb] = np.floor(u[inb]).astype(np.int64)
    py[inb] = np.floor(v[inb]).astype(np.int64)
    d = np.zeros(inb.shape)
    has_depth = np.zeros(inb.shape, dtype=bool)
    if depth is not None:
        check_raster_dims(calib, depth.shape)
        has_depth[inb] = depth.valid[py[inb], px[inb]]
        d[has_depth] = depth.values[py[has_depth], px[has_depth]]
    return GridProjection(u, v, z, inb, px, py, d, has_depth)


def confidence_from_projection(proj: GridProjection, kind: str = "exp") -> np.ndarray:
    conf = np.zeros(proj.z.shape)
    m = proj.has_depth
    if np.any(m):
        conf[m] = confidence_variant(proj.z[m], proj.d[m], kind)
    return conf


def build_confidence_grid(spec: GridSpec, calib: CameraCalibration, depth: DepthMap,
                          kind: str = "exp") -> VoxelGrid:
    """Depth-aware confidence of every voxel for one frame (``f64`` payload)."""
    proj = project_grid(spec, calib, depth)
    return VoxelGrid(spec, confidence_from_projection(proj, kind), "f64")
