"""Run the fusion stack on one scene and check its gradients.

Per-frame depth-aware feature voxels and the semantic-aided voxel go through
the dual deformable attention block and the prediction heads.  The analytic
backward pass of the attention block is then compared with central finite
differences on a few small random cases.

    python3 demos/fusion_walkthrough.py
"""

import numpy as np

from occvox import gradcheck as gc
from occvox.fusion import VoxelFusion, labels_from_logits
from occvox.losses import total_loss
from occvox.metrics import compute_iou_miou
from occvox.harness.experiment import ExperimentConfig, prepare_inputs, scene_for
from occvox.voxelize import ImageFeatureMap, build_depth_aware_voxel, build_semantic_aided_voxel

config = ExperimentConfig(grid=(16, 16, 16), frames=2)
scene = scene_for(config, 0)
inputs = prepare_inputs(config, scene)
spec, M = scene.spec, config.num_classes

rng = np.random.default_rng(0)
image_voxels = []
for calib, depth, _ in inputs.frames:
    w, h = calib.image_dims
    feats = ImageFeatureMap(rng.normal(size=(4, h, w)))
    cells = build_depth_aware_voxel(spec, calib, depth, feats).cells
    image_voxels.append(np.moveaxis(cells, -1, 0))
semantic = np.moveaxis(build_semantic_aided_voxel(spec, inputs.frames, M).cells, -1, 0)

model = VoxelFusion(n_frames=len(image_voxels), c_img=4, num_classes=M, channels=8, n_points=4)
out = model.forward(image_voxels, semantic)
print({k: v.shape for k, v in out.items()})

loss, _, _, terms = total_loss(out["logits"], out["logits_img"], scene.labels.cells)
print("untrained loss terms:", {k: round(v, 4) for k, v in terms.items()}, "total", round(loss, 4))
r = compute_iou_miou(labels_from_logits(out["logits"]), scene.labels.cells, M)
print(f"untrained IoU {100 * r.iou:.2f}, mIoU {100 * r.miou:.2f}")

checks = [c for s in range(3) for c in gc.check_attention(s, 2)]
print(f"attention gradient checks: {sum(c.ok for c in checks)}/{len(checks)} within tolerance, "
      f"worst error/tolerance {max(c.worst_ratio for c in checks):.2e}")
