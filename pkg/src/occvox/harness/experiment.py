"""
Ablation runner for synthetic scenes.

Every variant shares the same rendered (oracle, optionally noised) depth and
segmentation.  Without a trained network the predictor is the semantic path
itself: per voxel, the class with the largest accumulated evidence.  Two
predictions come out of each run:

* the *class* prediction, argmax of evidence wherever evidence is non-zero;
  scored on the visible voxels;
* the *gated* full-grid prediction, the class prediction restricted to
  voxels whose total evidence reaches ``evidence_gate``; scored on the whole
  grid.

Visible voxels are ground-truth occupied cells that (a) are the first hit of
at least one pixel ray in some frame and (b) project onto a pixel with valid
depth in some frame.  Cells failing (b) carry no depth evidence in any
variant.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..fusion import VoxelFusion
from ..grid import GridSpec
from ..metrics import OccupancyStats, compute_iou_miou, occupancy_stats
from ..projection import project_grid
from ..voxelize import (ImageFeatureMap, build_depth_aware_voxel, depth_channel,
                        semantic_concat, semantic_evidence)
from .render import perturb_depth, render_oracle
from .scene import FREE, SyntheticScene, default_spec, generate_scene

VARIANTS = ("baseline", "no-depth", "hard-trunc", "depth-concat",
            "single-frame-sem", "sem-concat", "conf-tanh", "conf-sigmoid")


@dataclass(frozen=True)
class ExperimentConfig:
    grid: tuple = (32, 32, 32)
    resolution: float = 0.2
    frames: int = 5
    num_classes: int = 8
    objects: int = 5
    image: tuple = (80, 60)
    focal: float = 40.0
    confidence: str = "exp"
    threshold: float = 0.2
    evidence_gate: float = None    # None -> exp(-threshold)
    noise_ratio: float = 0.0
    stereo_baseline: float = 0.54  # metres; noise uses this rig with the camera focal
    variants: tuple = VARIANTS
    feature_channels: int = 4
    fusion: bool = True
    fusion_channels: int = 8
    fusion_points: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "image", tuple(int(v) for v in self.image))
        object.__setattr__(self, "variants", tuple(self.variants))
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ConfigurationError(f"unknown variants: {sorted(unknown)}")
        if self.frames < 1:
            raise ConfigurationError("need at least one frame")
        if self.stereo_baseline <= 0 or self.focal <= 0:
            raise ConfigurationError("focal and stereo baseline must be positive")
        if self.threshold < 0 or self.noise_ratio < 0:
            raise ConfigurationError("threshold and noise ratio must be >= 0")
        if self.confidence not in ("exp", "tanh", "sigmoid"):
            raise ConfigurationError(f"unknown confidence kind {self.confidence!r}")

    @property
    def gate(self) -> float:
        return float(np.exp(-self.threshold)) if self.evidence_gate is None else self.evidence_gate

    def spec(self) -> GridSpec:
        return default_spec(self.grid, self.resolution)

    def canonical(self) -> str:
        """Key-sorted ``key = value`` lines; stable across runs and platforms."""
        lines = []
        for key, value in sorted(asdict(self).items()):
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class VariantResult:
    variant: str
    scene_seed: int
    iou: float
    miou: float
    visible_miou: float
    visible_voxels: int
    visible_zero_evidence: int
    stats: OccupancyStats
    fused_channels: int = 0


@dataclass
class RunReport:
    config: ExperimentConfig
    results: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def sorted_results(self):
        return sorted(self.results, key=lambda r: (r.scene_seed, r.variant))

    def mean(self, variant: str, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.results if r.variant == variant]
        return float(np.mean(vals))


@dataclass(frozen=True, eq=False)
class SceneInputs:
    """Per-frame calibrations and the rasters fed to every variant."""

    scene: SyntheticScene
    calibs: tuple
    depths: tuple
    segs: tuple
    renders: tuple     # noise-free renderings, used to define visibility

    @property
    def frames(self) -> list:
        return list(zip(self.calibs, self.depths, self.segs))


def prepare_inputs(config: ExperimentConfig, scene: SyntheticScene) -> SceneInputs:
    calibs, depths, segs, renders = [], [], [], []
    for f in range(scene.n_frames):
        calib = scene.calibration(f)
        r = render_oracle(scene.labels, calib)
        noisy = perturb_depth(r.depth, config.noise_ratio,
                              seed=[config.seed, scene.seed, f],
                              focal=config.focal, baseline=config.stereo_baseline)
        calibs.append(calib)
        depths.append(noisy)
        segs.append(r.segmentation)
        renders.append(r)
    return SceneInputs(scene, tuple(calibs), tuple(depths), tuple(segs), tuple(renders))


def visible_mask(inputs: SceneInputs) -> np.ndarray:
    spec = inputs.scene.spec
    hit = np.zeros(spec.dims, dtype=bool)
    seen = np.zeros(spec.dims, dtype=bool)
    for calib, r in zip(inputs.calibs, inputs.renders):
        hit |= r.hit_mask(spec.dims)
        seen |= project_grid(spec, calib, r.depth).has_depth
    return hit & seen & inputs.scene.occupied()


def feature_map(seg, num_classes: int, channels: int, seed: int) -> ImageFeatureMap:
    """Stand-in encoder: a fixed random embedding per class at half resolution."""
    table = np.random.default_rng([seed, 7]).normal(size=(num_classes, channels))
    labels = seg.labels[::2, ::2]
    return ImageFeatureMap(np.moveaxis(table[labels], -1, 0), scale=0.5)


def _variant_settings(variant: str, config: ExperimentConfig) -> dict:
    kind = {"conf-tanh": "tanh", "conf-sigmoid": "sigmoid"}.get(variant, config.confidence)
    weighting = {"hard-trunc": "hard", "no-depth": "none", "depth-concat": "none",
                 "sem-concat": "none"}.get(variant, "soft")
    return {"kind": kind, "weighting": weighting, "threshold": config.threshold}


def class_evidence(config: ExperimentConfig, inputs: SceneInputs, variant: str) -> np.ndarray:
    """``(H, W, Z, M)`` accumulated class evidence of one variant."""
    spec, M = inputs.scene.spec, inputs.scene.num_classes
    frames = inputs.frames
    s = _variant_settings(variant, config)
    if variant == "single-frame-sem":
        frames = frames[:1]
    if variant == "sem-concat":
        stacked = semantic_concat(spec, frames, M)
        return stacked.reshape(spec.dims + (len(frames), M)).sum(axis=3)
    return semantic_evidence(spec, frames, M, **s)


def _run_fusion(config, inputs, variant, evidence) -> int:
    spec, M = inputs.scene.spec, inputs.scene.num_classes
    s = _variant_settings(variant, config)
    feature_weighting = "soft" if variant in ("single-frame-sem", "sem-concat") else s["weighting"]
    image_voxels = []
    for f, (calib, depth, seg) in enumerate(inputs.frames):
        feat = feature_map(seg, M, config.feature_channels, config.seed)
        v = build_depth_aware_voxel(spec, calib, depth, feat, kind=s["kind"],
                                    weighting=feature_weighting,
                                    threshold=config.threshold, frame=f).cells
        if variant == "depth-concat":
            v = np.concatenate([v, depth_channel(spec, calib, depth)], axis=-1)
        image_voxels.append(np.moveaxis(v, -1, 0))
    if variant == "sem-concat":
        sem = np.moveaxis(semantic_concat(spec, inputs.frames, M), -1, 0)
    else:
        ex = np.exp(evidence - evidence.max(axis=-1, keepdims=True))
        sem = np.moveaxis(ex / ex.sum(axis=-1, keepdims=True), -1, 0)
    module = VoxelFusion(len(image_voxels), image_voxels[0].shape[0], sem.shape[0],
                         config.fusion_channels, config.fusion_points, seed=config.seed)
    out = module.forward(image_voxels, sem)
    return int(out["fused"].shape[0])


def run_variant(config: ExperimentConfig, scene: SyntheticScene, variant: str = "baseline",
                inputs: SceneInputs = None) -> VariantResult:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    if inputs is None:
        inputs = prepare_inputs(config, scene)
    ev = class_evidence(config, inputs, variant)
    total = ev.sum(axis=-1)
    cls = np.argmax(ev, axis=-1)
    class_pred = np.where(total > 0, cls, FREE)
    gated = np.where(total >= config.gate, cls, FREE)

    gt = scene.labels.cells.astype(np.int64)
    M = scene.num_classes
    full = compute_iou_miou(gated, gt, M)
    vis = visible_mask(inputs)
    vis_result = compute_iou_miou(class_pred, gt, M, mask=vis)
    fused = _run_fusion(config, inputs, variant, ev) if config.fusion else 0
    return VariantResult(
        variant=variant,
        scene_seed=scene.seed,
        iou=full.iou,
        miou=full.miou,
        visible_miou=vis_result.miou,
        visible_voxels=int(vis.sum()),
        visible_zero_evidence=int(np.count_nonzero(vis & (total <= 0))),
        stats=occupancy_stats(gated != FREE, gt != FREE),
        fused_channels=fused,
    )


def scene_for(config: ExperimentConfig, seed: int) -> SyntheticScene:
    return generate_scene(seed, config.spec(), config.objects, num_classes=config.num_classes,
                          n_frames=config.frames, image_dims=config.image, focal=config.focal)


def run_experiment(config: ExperimentConfig, scenes: int = 1) -> RunReport:
    """All configured variants on ``scenes`` scenes seeded ``seed, seed + 1, ...``."""
    report = RunReport(config)
    for s in range(scenes):
        seed = config.seed + s
        t0 = time.perf_counter()
        scene = scene_for(config, seed)
        inputs = prepare_inputs(config, scene)
        report.timings[f"scene{seed}.render"] = time.perf_counter() - t0
        for variant in sorted(config.variants):
            t0 = time.perf_counter()
            report.results.append(run_variant(config, scene, variant, inputs))
            report.timings[f"scene{seed}.{variant}"] = time.perf_counter() - t0
    return report


_COLUMNS = ("scene", "variant", "iou", "miou", "visible_miou", "visible_voxels",
            "visible_zero_evidence", "fn", "fp", "tp", "tn", "fn_over_na", "nv_over_na",
            "fn_over_nv", "fused_channels")


def _row(r: VariantResult) -> list:
    st = r.stats
    fn_nv = float(st.fn_over_nv) if st.nv else float("nan")
    return [str(r.scene_seed), r.variant, f"{100 * r.iou:.4f}", f"{100 * r.miou:.4f}",
            f"{100 * r.visible_miou:.4f}", str(r.visible_voxels), str(r.visible_zero_evidence),
            str(st.fn), str(st.fp), str(st.tp), str(st.tn),
            f"{100 * float(st.fn_over_na):.4f}", f"{100 * float(st.nv_over_na):.4f}",
            f"{100 * fn_nv:.4f}", str(r.fused_channels)]


def report_csv(report: RunReport) -> str:
    lines = [",".join(_COLUMNS)]
    lines += [",".join(_row(r)) for r in report.sorted_results()]
    return "\n".join(lines) + "\n"


def report_table(report: RunReport) -> str:
    """Per-variant means over scenes, laid out like an ablation table."""
    variants = sorted({r.variant for r in report.results})
    n = len({r.scene_seed for r in report.results})
    lines = [f"config {report.config_hash}  scenes={n}",
             f"{'Variant':<18}{'IoU':>8}{'mIoU':>8}{'vis.mIoU':>10}{'FN/Nv':>8}{'zero-ev':>9}"]
    lines.append("-" * len(lines[1]))
    for v in variants:
        rs = [r for r in report.results if r.variant == v]
        fn_nv = np.mean([float(r.stats.fn_over_nv) for r in rs])
        zero = sum(r.visible_zero_evidence for r in rs)
        lines.append(f"{v:<18}{100 * np.mean([r.iou for r in rs]):>8.2f}"
                     f"{100 * np.mean([r.miou for r in rs]):>8.2f}"
                     f"{100 * np.mean([r.visible_miou for r in rs]):>10.2f}"
                     f"{100 * fn_nv:>8.2f}{zero:>9d}")
    return "\n".join(lines) + "\n"
