"""Visible-voxel mIoU as rendered depth gets noisier.

Depth is perturbed with zero-mean Gaussian noise whose standard deviation
follows the stereo disparity error model, scaled by a ratio of 0, 1 and 2.
The mean over ten scenes should not go up as the ratio grows.

    python3 demos/noise_sweep.py
"""

from occvox.harness.experiment import ExperimentConfig, run_experiment

for ratio in (0.0, 1.0, 2.0):
    config = ExperimentConfig(fusion=False, variants=("baseline", "hard-trunc"), noise_ratio=ratio)
    report = run_experiment(config, scenes=10)
    soft = report.mean("baseline", "visible_miou")
    hard = report.mean("hard-trunc", "visible_miou")
    print(f"noise x{ratio:.0f}: soft {100 * soft:6.2f}   hard {100 * hard:6.2f}")
