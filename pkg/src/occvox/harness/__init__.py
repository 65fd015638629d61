"""Synthetic scenes, oracle rendering and the ablation runner."""

from .experiment import (VARIANTS, ExperimentConfig, RunReport, VariantResult, report_csv,
                         report_table, run_experiment, run_variant, scene_for)
from .render import Rendering, depth_noise_sigma, perturb_depth, render_oracle
from .scene import SceneObject, SyntheticScene, default_spec, generate_scene, wall_scene
