"""Confidence along the optical axis in front of and behind a flat wall.

A camera looks down +x at a wall whose front face sits 5 m away.  Exact
depth is rendered, then every voxel on the central row gets its confidence.
The exp kernel peaks on the surface and decays on both sides; the hard
threshold keeps only the thin shell within ``threshold`` of the surface.

    python3 demos/wall_confidence.py
"""

import numpy as np

from occvox.grid import GridSpec
from occvox.projection import build_confidence_grid, project_grid
from occvox.voxelize import occupancy_truncation_baseline
from occvox.harness import render_oracle, wall_scene

spec = GridSpec.from_dims((32, 32, 32), 0.2, origin=(0.0, -3.2, -3.2))
scene = wall_scene(spec, wall_x_index=10, camera_x=-3.0)
calib = scene.calibration(0)
depth = render_oracle(scene.labels, calib).depth

soft = build_confidence_grid(spec, calib, depth).cells
hard = occupancy_truncation_baseline(spec, calib, depth, 0.2).cells
proj = project_grid(spec, calib, depth)

j = k = 16
print(" i   z (m)  depth  |z-d|  soft   hard")
for i in range(4, 18):
    z, d = proj.z[i, j, k], proj.d[i, j, k]
    print(f"{i:2d}  {z:5.2f}  {d:5.2f}  {abs(z - d):5.2f}  {soft[i, j, k]:.3f}  {int(hard[i, j, k])}")

print(f"\nvoxels with soft confidence > 0: {np.count_nonzero(soft)}")
print(f"voxels kept by hard truncation: {np.count_nonzero(hard)}")
