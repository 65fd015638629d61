"""Seeded synthetic scenes: a ground slab plus axis-aligned boxes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..grid import CameraCalibration, FramePose, GridSpec, VoxelGrid, pinhole_K

FREE = 0
GROUND = 1


@dataclass(frozen=True)
class SceneObject:
    """Box covering cells ``lo <= (i, j, k) < hi``."""

    class_id: int
    lo: tuple
    hi: tuple

    @property
    def num_cells(self) -> int:
        return int(np.prod(np.subtract(self.hi, self.lo)))


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    labels: VoxelGrid
    objects: tuple
    poses: tuple
    K: np.ndarray
    image_dims: tuple
    num_classes: int
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def spec(self) -> GridSpec:
        return self.labels.spec

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def calibration(self, frame: int) -> CameraCalibration:
        return CameraCalibration.from_pose(self.K, self.poses[frame], self.image_dims)

    def occupied(self) -> np.ndarray:
        return self.labels.cells != FREE


def default_spec(dims=(32, 32, 32), resolution: float = 0.2) -> GridSpec:
    """Grid ahead of the ego origin, centred laterally, ground 1.6 m below the camera."""
    H, W, Z = dims
    return GridSpec.from_dims(dims, resolution,
                              origin=(0.0, -W * resolution / 2, -1.6))


def camera_trajectory(n_frames: int, spacing: float = 0.4, start=(-1.0, 0.0, 0.0)):
    """Current frame first; earlier frames trail behind along -x with a small sideways drift."""
    start = np.asarray(start, dtype=np.float64)
    return tuple(FramePose.from_camera_position(start + np.array([-spacing * i, 0.05 * i, 0.0]))
                 for i in range(n_frames))


def generate_scene(seed: int, spec: GridSpec = None, n_objects: int = 5, *,
                   num_classes: int = 8, n_frames: int = 1, image_dims=(80, 60),
                   focal: float = 40.0, max_tries: int = 2000) -> SyntheticScene:
    """Deterministic scene for ``seed``.

    Ground occupies ``k = 0``; each box gets its own class ``2 .. n_objects + 1``,
    stands on the ground and does not overlap other boxes.  Boxes keep clear
    of the first four x-slices so the cameras always start in free space.
    """
    spec = default_spec() if spec is None else spec
    if n_objects < 0:
        raise ConfigurationError("object budget must be >= 0")
    if num_classes < n_objects + 2:
        raise ConfigurationError(f"{n_objects} objects need at least {n_objects + 2} classes")
    H, W, Z = spec.dims
    if H < 8 or W < 4 or Z < 3:
        raise ConfigurationError(f"grid {spec.dims} too small for a scene")
    rng = np.random.default_rng(seed)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[:, :, 0] = GROUND
    taken = np.zeros(spec.dims[:2], dtype=bool)
    objects = []
    for n in range(n_objects):
        for _ in range(max_tries):
            sx = int(rng.integers(2, max(3, H // 5) + 1))
            sy = int(rng.integers(2, max(3, W // 5) + 1))
            sz = int(rng.integers(2, max(3, Z // 3) + 1))
            i0 = int(rng.integers(4, H - sx + 1))
            j0 = int(rng.integers(0, W - sy + 1))
            # one free cell margin keeps boxes from merging
            if taken[max(i0 - 1, 0):i0 + sx + 1, max(j0 - 1, 0):j0 + sy + 1].any():
                continue
            break
        else:
            raise ConfigurationError(f"could not place object {n} without overlap")
        sz = min(sz, Z - 1)
        obj = SceneObject(GROUND + 1 + n, (i0, j0, 1), (i0 + sx, j0 + sy, 1 + sz))
        taken[i0:i0 + sx, j0:j0 + sy] = True
        labels[i0:i0 + sx, j0:j0 + sy, 1:1 + sz] = obj.class_id
        objects.append(obj)
    K = pinhole_K(focal, *image_dims)
    return SyntheticScene(VoxelGrid(spec, labels, "label"), tuple(objects),
                          camera_trajectory(n_frames), K, tuple(image_dims), num_classes, seed)


def wall_scene(spec: GridSpec, wall_x_index: int, num_classes: int = 3,
               image_dims=(80, 60), focal: float = 40.0, camera_x: float = None,
               class_id: int = 2) -> SyntheticScene:
    """A single fronto-parallel wall filling the slice ``i = wall_x_index`` (no ground)."""
    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[wall_x_index] = class_id
    cam_x = spec.origin[0] - 1.0 if camera_x is None else camera_x
    cz = spec.origin[2] + spec.extent[2] / 2
    cy = spec.origin[1] + spec.extent[1] / 2
    pose = FramePose.from_camera_position((cam_x, cy, cz))
    obj = SceneObject(class_id, (wall_x_index, 0, 0), (wall_x_index + 1,) + spec.dims[1:])
    return SyntheticScene(VoxelGrid(spec, labels, "label"), (obj,), (pose,),
                          pinhole_K(focal, *image_dims), tuple(image_dims), num_classes)
