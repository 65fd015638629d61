"""Depth-aware voxelization, voxel fusion and scene-completion metrics on numpy."""

from .errors import (ConfigurationError, DataError, DegeneratePoseError, FormatError,
                     OccvoxError, ShapeError, StateError, UndefinedLossError,
                     UndefinedMetricError)
from .grid import (EGO_TO_CAMERA, CameraCalibration, DepthMap, FramePose, GridSpec,
                   SegmentationMap, VoxelGrid, inverse_index, linear_index, pinhole_K,
                   voxel_center)
from .projection import (build_confidence_grid, confidence_variant, project_grid,
                         project_point, project_points, soft_confidence)
from .voxelize import (DepthAwareFeatureVoxel, ImageFeatureMap, build_depth_aware_voxel,
                       build_semantic_aided_voxel, collect_feature, occupancy_truncation_baseline,
                       semantic_evidence)
from .fusion import (DeformableAttentionParams, VoxelFusion, deformable_attention,
                     deformable_attention_backward, dual_interaction, trilinear_sample)
from .losses import (class_frequency_weights, geometric_affinity_loss, semantic_affinity_loss,
                     total_loss, weighted_cross_entropy)
from .metrics import OccupancyStats, compute_iou_miou, confusion_matrix, occupancy_stats

__version__ = "0.1.0"
