"""
Grid geometry, camera calibration and raster containers.

Axis convention used throughout the package: ego frame x forward, y left,
z up.  Camera frame x right, y down, z along the optical axis.  Grid index
(i, j, k) runs along ego (x, y, z) and cells are stored x-fastest, i.e. the
linear offset of (i, j, k) is ``i + H * (j + W * k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError

#: Rotation taking ego-frame vectors (x fwd, y left, z up) to camera frame.
EGO_TO_CAMERA = np.array([[0.0, -1.0, 0.0],
                          [0.0, 0.0, -1.0],
                          [1.0, 0.0, 0.0]])


def _vec3(value, name):
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} must be 3 finite numbers, got {value!r}")
    return arr


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned box of cubic cells.

    ``dims`` is derived from ``extent / resolution`` (rounded); use
    :meth:`from_dims` when the cell counts are the natural input.
    """

    origin: tuple
    extent: tuple = field(compare=False)
    resolution: float
    dims: tuple = field(init=False)

    def __post_init__(self):
        origin = _vec3(self.origin, "origin")
        extent = _vec3(self.extent, "extent")
        res = float(self.resolution)
        if not np.isfinite(res) or res <= 0:
            raise ConfigurationError(f"resolution must be > 0, got {self.resolution!r}")
        dims = tuple(int(round(e / res)) for e in extent)
        if min(dims) < 1:
            raise ConfigurationError(f"extent {tuple(extent)} yields empty dims {dims}")
        object.__setattr__(self, "origin", tuple(float(v) for v in origin))
        object.__setattr__(self, "extent", tuple(float(v) for v in extent))
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_dims(cls, dims: Sequence[int], resolution: float,
                  origin: Sequence[float] = (0.0, 0.0, 0.0)) -> "GridSpec":
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigurationError(f"dims must be three positive ints, got {dims}")
        return cls(origin=tuple(origin),
                   extent=tuple(d * float(resolution) for d in dims),
                   resolution=resolution)

    @property
    def num_cells(self) -> int:
        H, W, Z = self.dims
        return H * W * Z

    def centers(self) -> np.ndarray:
        """All voxel centers as an ``(H, W, Z, 3)`` array in meters."""
        axes = [self.origin[a] + (np.arange(n) + 0.5) * self.resolution
                for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def locate(self, point) -> tuple:
        """Index of the cell containing ``point``; IndexError outside the box."""
        p = _vec3(point, "point")
        idx = np.floor((p - np.asarray(self.origin)) / self.resolution).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            raise IndexError(f"point {tuple(p)} lies outside the grid")
        return tuple(int(v) for v in idx)


def _check_index(spec: GridSpec, index) -> tuple:
    idx = tuple(int(v) for v in index)
    if len(idx) != 3 or any(not 0 <= v < n for v, n in zip(idx, spec.dims)):
        raise IndexError(f"index {tuple(index)} outside dims {spec.dims}")
    return idx


def voxel_center(spec: GridSpec, index) -> np.ndarray:
    """Center of cell ``index`` in meters: ``origin + (index + 0.5) * resolution``."""
    idx = np.asarray(_check_index(spec, index), dtype=np.float64)
    return np.asarray(spec.origin) + (idx + 0.5) * spec.resolution


def linear_index(spec: GridSpec, index) -> int:
    i, j, k = _check_index(spec, index)
    H, W, _ = spec.dims
    return i + H * (j + W * k)


def inverse_index(spec: GridSpec, offset: int) -> tuple:
    offset = int(offset)
    if not 0 <= offset < spec.num_cells:
        raise IndexError(f"offset {offset} outside [0, {spec.num_cells})")
    H, W, _ = spec.dims
    i = offset % H
    j = (offset // H) % W
    k = offset // (H * W)
    return i, j, k


@dataclass(frozen=True, eq=False)
class FramePose:
    """Ego-to-camera extrinsics ``[R | t]`` of one frame."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeError("pose needs a 3x3 R and a 3-vector t")
        if not np.allclose(R.T @ R, np.eye(3), rtol=0.0, atol=1e-9):
            raise ConfigurationError("R is not orthonormal")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_camera_position(cls, position, R=EGO_TO_CAMERA) -> "FramePose":
        """Pose of a camera located at ego-frame ``position`` with rotation ``R``."""
        R = np.asarray(R, dtype=np.float64)
        return cls(R=R, t=-R @ _vec3(position, "position"))

    @property
    def camera_position(self) -> np.ndarray:
        return -self.R.T @ self.t


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    """Pinhole intrinsics ``K`` with extrinsics ``R, t``; ``image_dims`` is (w, h)."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_dims: tuple

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ShapeError("K must be 3x3")
        if K[2, 2] != 1.0 or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ConfigurationError("K must be upper-triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigurationError("focal lengths must be positive")
        pose = FramePose(self.R, self.t)
        w, h = (int(v) for v in self.image_dims)
        if w < 1 or h < 1:
            raise ConfigurationError(f"bad image_dims {self.image_dims}")
        K.flags.writeable = False
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", pose.R)
        object.__setattr__(self, "t", pose.t)
        object.__setattr__(self, "image_dims", (w, h))

    @classmethod
    def from_pose(cls, K, pose: FramePose, image_dims) -> "CameraCalibration":
        return cls(K=K, R=pose.R, t=pose.t, image_dims=image_dims)

    @property
    def pose(self) -> FramePose:
        return FramePose(self.R, self.t)

    @property
    def width(self) -> int:
        return self.image_dims[0]

    @property
    def height(self) -> int:
        return self.image_dims[1]


def pinhole_K(focal: float, width: int, height: int) -> np.ndarray:
    """Square-pixel intrinsics with the principal point at the image center."""
    return np.array([[focal, 0.0, width / 2.0],
                     [0.0, focal, height / 2.0],
                     [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric depth raster of shape ``(h, w)`` with an explicit validity mask."""

    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError("depth raster must be 2-D (h, w)")
        valid = (np.isfinite(values) & (values > 0)) if self.valid is None \
            else np.array(self.valid, dtype=bool)
        if valid.shape != values.shape:
            raise ShapeError("mask shape differs from depth raster")
        v = values[valid]
        if not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise DataError("valid depth values must be finite and > 0")
        # invalid pixels never leak: store them as 0
        values = np.where(valid, values, 0.0)
        values.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    """Per-pixel class ids of shape ``(h, w)``."""

    labels: np.ndarray
    num_classes: int = None

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.ndim != 2:
            raise ShapeError("segmentation raster must be 2-D (h, w)")
        if not np.issubdtype(labels.dtype, np.integer):
            raise DataError("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.size and labels.min() < 0:
            raise DataError("labels must be non-negative")
        if self.num_classes is not None and labels.size and labels.max() >= self.num_classes:
            raise DataError(f"label {labels.max()} >= class count {self.num_classes}")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple:
        return self.labels.shape


# payload kinds of VoxelGrid; values double as on-disk codes
PAYLOAD_DTYPES = {
    "label": np.dtype("<u1"),
    "label16": np.dtype("<u2"),
    "bool": np.dtype("u1"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
}


class VoxelGrid:
    """Dense grid with one payload per cell.

    ``cells`` is held as an array of shape ``(H, W, Z)`` for scalar payloads or
    ``(H, W, Z, width)`` for vector payloads; the array is read-only.
    """

    def __init__(self, spec: GridSpec, cells, kind: str = None):
        cells = np.array(cells)
        if cells.shape[:3] != spec.dims or cells.ndim not in (3, 4):
            raise ShapeError(f"cells of shape {cells.shape} do not match dims {spec.dims}")
        if kind is None:
            kind = _infer_kind(cells)
        if kind not in PAYLOAD_DTYPES:
            raise ConfigurationError(f"unknown payload kind {kind!r}")
        if kind == "bool":
            cells = cells.astype(bool)
        else:
            cells = cells.astype(PAYLOAD_DTYPES[kind].newbyteorder("="))
        cells.flags.writeable = False
        self.spec = spec
        self.cells = cells
        self.kind = kind

    @property
    def width(self) -> int:
        """Payload length per cell (1 for scalar payloads)."""
        return 1 if self.cells.ndim == 3 else self.cells.shape[3]

    def __len__(self):
        return self.spec.num_cells

    def __getitem__(self, index):
        return self.cells[_check_index(self.spec, index)]

    def flat(self) -> np.ndarray:
        """Cells in storage order: x-fastest, payload contiguous per cell."""
        if self.cells.ndim == 3:
            return self.cells.transpose(2, 1, 0).reshape(-1)
        return self.cells.transpose(2, 1, 0, 3).reshape(-1, self.width)

    @classmethod
    def from_flat(cls, spec: GridSpec, flat, kind: str, width: int = 1) -> "VoxelGrid":
        H, W, Z = spec.dims
        flat = np.asarray(flat)
        if flat.size != H * W * Z * width:
            raise ShapeError(f"{flat.size} values for {H * W * Z} cells of width {width}")
        if width == 1 and flat.ndim == 1:
            cells = flat.reshape(Z, W, H).transpose(2, 1, 0)
        else:
            cells = flat.reshape(Z, W, H, width).transpose(2, 1, 0, 3)
        return cls(spec, cells, kind)

    def astype(self, kind: str) -> "VoxelGrid":
        """Copy with a different payload kind (e.g. ``"f32"`` before saving)."""
        return VoxelGrid(self.spec, self.cells, kind)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.spec == other.spec and self.kind == other.kind
                and self.cells.shape == other.cells.shape
                and np.array_equal(self.cells, other.cells))

    def __repr__(self):
        return f"VoxelGrid(dims={self.spec.dims}, kind={self.kind!r}, width={self.width})"


def _infer_kind(cells: np.ndarray) -> str:
    if cells.dtype == bool:
        return "bool"
    if np.issubdtype(cells.dtype, np.integer):
        return "label" if cells.size == 0 or cells.max() < 256 else "label16"
    if cells.dtype == np.float32:
        return "f32"
    return "f64"
