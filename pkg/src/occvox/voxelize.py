"""
Lifting image-space rasters into voxels.

Two voxel types are built here:

* the depth-aware image feature voxel: every voxel collects the image
  feature at its projected pixel (or an unoccupied marker when it projects
  outside the image) scaled by its soft confidence;
* the semantic-aided voxel: one-hot segmentation labels collected per frame,
  weighted by that frame's confidence, summed over frames and pushed through
  a softmax over classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import softmax

from .errors import ConfigurationError, DataError, ShapeError
from .grid import CameraCalibration, DepthMap, GridSpec, SegmentationMap, VoxelGrid
from .projection import (ProjectedPoint, check_raster_dims, confidence_from_projection,
                         project_grid)

#: How each variant weights collected features / labels per voxel.
WEIGHTINGS = ("soft", "hard", "none")


@dataclass(frozen=True, eq=False)
class ImageFeatureMap:
    """``(C, h_f, w_f)`` feature raster; ``scale`` maps image pixels to feature pixels."""

    features: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64)
        if f.ndim != 3 or f.shape[0] < 1:
            raise ShapeError("features must be (C, h, w) with C >= 1")
        if not self.scale > 0:
            raise ConfigurationError("scale must be > 0")
        f.flags.writeable = False
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def channels(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True, eq=False)
class DepthAwareFeatureVoxel:
    grid: VoxelGrid
    frame: int = 0

    @property
    def cells(self) -> np.ndarray:
        return self.grid.cells


def bilinear_sample(features: np.ndarray, u, v, scale: float = 1.0) -> np.ndarray:
    """Sample a ``(C, h, w)`` raster at image coordinates ``(u, v)``.

    Feature pixel ``(col, row)`` has its center at image coordinate
    ``((col + 0.5) / scale, (row + 0.5) / scale)``; samples beyond the outer
    centers are clamped to the border.  Returns ``(N, C)``.
    """
    C, h, w = features.shape
    x = np.clip(np.asarray(u, dtype=np.float64).reshape(-1) * scale - 0.5, 0.0, w - 1.0)
    y = np.clip(np.asarray(v, dtype=np.float64).reshape(-1) * scale - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    f = features.transpose(1, 2, 0)
    return ((1 - fy) * ((1 - fx) * f[y0, x0] + fx * f[y0, x1])
            + fy * ((1 - fx) * f[y1, x0] + fx * f[y1, x1]))


def _marker_vector(marker, channels):
    if marker is None:
        return np.zeros(channels)
    m = np.asarray(marker, dtype=np.float64).reshape(-1)
    if m.shape != (channels,):
        raise ShapeError(f"marker has {m.size} entries, features have {channels} channels")
    if not np.all(np.isfinite(m)):
        raise DataError("marker entries must be finite")
    return m


def collect_feature(feat: ImageFeatureMap, point: ProjectedPoint, marker=None) -> np.ndarray:
    """Feature at an in-bounds projected point, the marker vector otherwise."""
    m = _marker_vector(marker, feat.channels)
    if not point.in_bounds:
        return m.copy()
    return bilinear_sample(feat.features, point.u, point.v, feat.scale)[0]


def voxel_weights(proj, weighting: str = "soft", kind: str = "exp",
                  threshold: float = None) -> np.ndarray:
    """Per-voxel weight applied to collected features and labels.

    ``soft``: confidence kernel; ``hard``: 1 where ``|z - d| <= threshold``;
    ``none``: 1 wherever the voxel projects into the image (depth ignored).
    """
    if weighting == "soft":
        return confidence_from_projection(proj, kind)
    if weighting == "hard":
        if threshold is None or threshold < 0:
            raise ConfigurationError("hard weighting needs a threshold >= 0")
        out = np.zeros(proj.z.shape)
        m = proj.has_depth
        out[m] = (np.abs(proj.z[m] - proj.d[m]) <= threshold).astype(np.float64)
        return out
    if weighting == "none":
        return proj.in_bounds.astype(np.float64)
    raise ValueError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")


def collected_features(spec: GridSpec, calib: CameraCalibration, feat: ImageFeatureMap,
                       marker=None, proj=None) -> np.ndarray:
    """Pre-weighting feature voxel: ``(H, W, Z, C)`` features or marker per cell."""
    if proj is None:
        proj = project_grid(spec, calib)
    m = _marker_vector(marker, feat.channels)
    out = np.broadcast_to(m, spec.dims + (feat.channels,)).copy()
    inb = proj.in_bounds
    if np.any(inb):
        out[inb] = bilinear_sample(feat.features, proj.u[inb], proj.v[inb], feat.scale)
    return out


def build_depth_aware_voxel(spec: GridSpec, calib: CameraCalibration, depth: DepthMap,
                            feat: ImageFeatureMap, marker=None, *, kind: str = "exp",
                            weighting: str = "soft", threshold: float = None,
                            frame: int = 0) -> DepthAwareFeatureVoxel:
    """Collected features scaled by each voxel's confidence.

    With ``weighting="none"`` the features are returned unscaled (marker kept
    for out-of-image voxels), which is the no-depth ablation.
    """
    proj = project_grid(spec, calib, depth)
    feats = collected_features(spec, calib, feat, marker, proj)
    if weighting == "none":
        cells = feats
    else:
        w = voxel_weights(proj, weighting, kind, threshold)
        cells = w[..., None] * feats
    return DepthAwareFeatureVoxel(VoxelGrid(spec, cells, "f64"), frame)


def depth_channel(spec: GridSpec, calib: CameraCalibration, depth: DepthMap) -> np.ndarray:
    """Sampled depth per voxel (0 where no usable pixel), shape ``(H, W, Z, 1)``."""
    return project_grid(spec, calib, depth).d[..., None]


def one_hot(seg: SegmentationMap, num_classes: int) -> np.ndarray:
    """``(h, w, M)`` one-hot raster of the labels."""
    labels = seg.labels
    if labels.size and labels.max() >= num_classes:
        raise DataError(f"label {labels.max()} >= class count {num_classes}")
    return np.eye(num_classes)[labels]


def semantic_evidence(spec: GridSpec, frames: Sequence, num_classes: int, *,
                      kind: str = "exp", weighting: str = "soft",
                      threshold: float = None) -> np.ndarray:
    """Sum over frames of weight times one-hot label, shape ``(H, W, Z, M)``.

    ``frames`` holds ``(calib, depth, seg)`` triples.  Labels are looked up at
    the nearest pixel.
    """
    if len(frames) == 0:
        raise ValueError("at least one frame is required")
    acc = np.zeros(spec.dims + (num_classes,))
    for calib, depth, seg in frames:
        check_raster_dims(calib, seg.shape)
        onehot = one_hot(seg, num_classes)
        proj = project_grid(spec, calib, depth)
        w = voxel_weights(proj, weighting, kind, threshold)
        m = proj.in_bounds
        acc[m] += w[m][:, None] * onehot[proj.py[m], proj.px[m]]
    return acc


def build_semantic_aided_voxel(spec: GridSpec, frames: Sequence, num_classes: int, *,
                               kind: str = "exp", weighting: str = "soft",
                               threshold: float = None) -> VoxelGrid:
    """Softmax over classes of the confidence-weighted multi-frame one-hot sum."""
    ev = semantic_evidence(spec, frames, num_classes, kind=kind, weighting=weighting,
                           threshold=threshold)
    return VoxelGrid(spec, softmax(ev, axis=-1), "f64")


def semantic_concat(spec: GridSpec, frames: Sequence, num_classes: int) -> np.ndarray:
    """Per-frame one-hot labels stacked on the channel axis, no weighting.

    Shape ``(H, W, Z, M * n_frames)``; voxels outside a frame's image are zero.
    """
    parts = [semantic_evidence(spec, [f], num_classes, weighting="none") for f in frames]
    return np.concatenate(parts, axis=-1)


def occupancy_truncation_baseline(spec: GridSpec, calib: CameraCalibration, depth: DepthMap,
                                  threshold: float = None) -> VoxelGrid:
    """Hard occupancy: in view and ``|z - d| <= threshold`` (default one cell)."""
    if threshold is None:
        threshold = spec.resolution
    proj = project_grid(spec, calib, depth)
    occ = voxel_weights(proj, "hard", threshold=threshold) > 0
    return VoxelGrid(spec, occ, "bool")
