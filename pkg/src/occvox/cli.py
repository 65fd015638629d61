"""Command-line entry point: ``occvox {simulate,voxelize,fuse,eval,gradcheck}``.

Exit status: 0 success, 1 failed check or computation error, 2 usage or
configuration error, 3 file error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .errors import ConfigurationError, FormatError, OccvoxError
from .fusion import VoxelFusion, grid_to_tensor, labels_from_logits, tensor_to_grid
from .grid import GridSpec, VoxelGrid
from .io import load_calibration, load_grid, load_params, load_raster, save_grid, save_params
from .metrics import compute_iou_miou, metrics_csv, metrics_table, occupancy_stats, occupancy_table
from .projection import build_confidence_grid
from .voxelize import ImageFeatureMap, build_depth_aware_voxel, build_semantic_aided_voxel
from .harness.experiment import VARIANTS, ExperimentConfig, report_csv, report_table, run_experiment

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_FILE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def cmd_simulate(args) -> int:
    config = ExperimentConfig(
        grid=tuple(args.grid), resolution=args.resolution, frames=args.frames,
        objects=args.objects, confidence=args.confidence, threshold=args.threshold,
        noise_ratio=args.noise_ratio, variants=tuple(sorted(set(args.variant))),
        fusion=args.fusion, seed=args.seed)
    report = run_experiment(config, scenes=args.scenes)
    table = report_table(report)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "config.txt", f"config_hash = {config.digest()}\n" + config.canonical())
        _write(out / "report.csv", report_csv(report))
        _write(out / "report.txt", table)
    # wall-clock numbers vary run to run, so they stay out of the report files
    for key, secs in report.timings.items():
        print(f"time {key} {secs:.3f}s", file=sys.stderr)
    return EXIT_OK


def _grid_spec(args) -> GridSpec:
    return GridSpec.from_dims(tuple(args.grid), args.resolution, tuple(args.origin))


def cmd_voxelize(args) -> int:
    spec = _grid_spec(args)
    if args.features and len(args.features) != len(args.frame):
        raise UsageError("give one --features raster per --frame")
    frames = []
    for calib_path, depth_path, seg_path in args.frame:
        frames.append((load_calibration(calib_path), load_raster(depth_path), load_raster(seg_path)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f, (calib, depth, _) in enumerate(frames):
        save_grid(out / f"confidence_{f}.vox",
                  build_confidence_grid(spec, calib, depth, kind=args.confidence))
        if args.features:
            feat = ImageFeatureMap(load_raster(args.features[f]), args.feature_scale)
            v = build_depth_aware_voxel(spec, calib, depth, feat, kind=args.confidence, frame=f)
            save_grid(out / f"features_{f}.vox", v.grid)
    sem = build_semantic_aided_voxel(spec, frames, args.classes, kind=args.confidence)
    save_grid(out / "semantic.vox", sem)
    print(f"wrote {len(frames)} frame(s) to {out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    images = [load_grid(p) for p in args.image]
    sem = load_grid(args.semantic)
    if any(g.spec != sem.spec for g in images):
        raise ConfigurationError("image and semantic voxels use different grids")
    image_t = [grid_to_tensor(g) for g in images]
    sem_t = grid_to_tensor(sem)
    module = VoxelFusion(len(images), image_t[0].shape[0], sem_t.shape[0],
                         args.channels, args.points, seed=args.seed)
    if args.params:
        module.load_parameters(load_params(args.params))
    out = module.forward(image_t, sem_t)
    save_grid(args.out, tensor_to_grid(out["fused"], sem.spec))
    if args.labels:
        save_grid(args.labels, VoxelGrid(sem.spec, labels_from_logits(out["logits"]).astype(np.uint8),
                                         "label"))
    if args.save_params:
        save_params(args.save_params, module.parameters())
    print(f"fused tensor {out['fused'].shape} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, gt = load_grid(args.pred), load_grid(args.gt)
    if pred.spec != gt.spec:
        raise ConfigurationError("prediction and ground truth use different grids")
    p, g = pred.cells.astype(np.int64), gt.cells.astype(np.int64)
    result = compute_iou_miou(p, g, args.classes, args.free_class, args.ignore_label)
    print(f"IoU {100 * result.iou:.2f} / mIoU {100 * result.miou:.2f}")
    print(metrics_table(result), end="")
    keep = g != args.ignore_label
    stats = occupancy_stats(p != args.free_class, g != args.free_class, keep)
    print(occupancy_table(stats), end="")
    if args.csv:
        _write(Path(args.csv), metrics_csv(result))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seeds) if args.seeds is not None else gc.SHIPPED_SEEDS
    results = gc.run_all(seeds)
    failed = [r for r in results if not r.ok]
    for r in failed:
        print(f"FAIL {r.name} seed={r.seed} max_abs_err={r.max_abs_err:.3e} "
              f"ratio={r.worst_ratio:.3f}", file=sys.stderr)
    worst = max(r.worst_ratio for r in results)
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} passed "
          f"(worst error/tolerance {worst:.4f})")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occvox", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthetic scenes + ablation sweep -> report")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=int, default=1)
    s.add_argument("--grid", type=int, nargs=3, default=(32, 32, 32), metavar=("H", "W", "Z"))
    s.add_argument("--resolution", type=float, default=0.2)
    s.add_argument("--frames", type=int, default=5)
    s.add_argument("--objects", type=int, default=5)
    s.add_argument("--confidence", choices=("exp", "tanh", "sigmoid"), default="exp")
    s.add_argument("--threshold", type=float, default=0.2)
    s.add_argument("--noise-ratio", type=float, default=0.0)
    s.add_argument("--variant", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    s.add_argument("--fusion", action=argparse.BooleanOptionalAction, default=True,
                   help="also run the fusion module on every variant")
    s.add_argument("--out", help="directory for report.csv, report.txt, config.txt")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("voxelize", help="rasters + calibration -> voxel files")
    v.add_argument("--frame", nargs=3, action="append", required=True,
                   metavar=("CALIB", "DEPTH", "SEG"))
    v.add_argument("--features", nargs="+", help="one feature raster per frame")
    v.add_argument("--feature-scale", type=float, default=1.0)
    v.add_argument("--grid", type=int, nargs=3, required=True, metavar=("H", "W", "Z"))
    v.add_argument("--resolution", type=float, required=True)
    v.add_argument("--origin", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    v.add_argument("--classes", type=int, required=True)
    v.add_argument("--confidence", choices=("exp", "tanh", "sigmoid"), default="exp")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_voxelize)

    f = sub.add_parser("fuse", help="voxel files -> fused tensor")
    f.add_argument("--image", nargs="+", required=True, help="per-frame feature voxels")
    f.add_argument("--semantic", required=True)
    f.add_argument("--params", help="parameter file; default is the seeded initialization")
    f.add_argument("--channels", type=int, default=16)
    f.add_argument("--points", type=int, default=8)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.add_argument("--labels", help="also write argmax labels of the main head")
    f.add_argument("--save-params")
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="prediction + ground truth grids -> IoU / mIoU")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--classes", type=int, required=True)
    e.add_argument("--free-class", type=int, default=0)
    e.add_argument("--ignore-label", type=int, default=255)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    g.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the shipped set")
    g.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"occvox {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"occvox {args.command}: file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (OccvoxError, ValueError) as exc:
        print(f"occvox {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
