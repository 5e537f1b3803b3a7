"""``voxsem`` command-line entry point."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import ablation, autodiff, io
from .config import Config, load_config, parse_plan
from .errors import ShapeError, VoxsemError
from .fcm import CompletionContext, complete_features
from .fusion import FusionConfig, FusionModel, TrainConfig, train
from .grid import CLASS_NAMES, NUM_CLASSES, FeatureVolume, GridSpec, LabelVolume, ProbVolume
from .loss import gradcheck_losses
from .metrics import EvalRegion, eval_regions, histogram_csv, prob_histogram, sc_metrics, ssc_iou
from .project import project_features
from .scenes import make_dataset
from .tsdf import tsdf_encode

GRADCHECK_TOL = 1e-4
CONFIG_NAME = "config.txt"


def _config(path: Optional[str]) -> Config:
    return load_config(path) if path else Config()


def _write_config(out_dir: Path, cfg: Config) -> None:
    io.atomic_write_text(out_dir / CONFIG_NAME, cfg.to_text())


def _write_config_beside(out_file: str, cam_cfg: Config, spec_cfg: Config, **overrides) -> None:
    """Camera keys from ``cam_cfg``, grid keys from ``spec_cfg``, as ``<out>.config.txt``."""
    merged = dataclasses.replace(cam_cfg, grid_dims=spec_cfg.grid_dims, voxel_size=spec_cfg.voxel_size,
                                 origin=spec_cfg.origin, **overrides)
    out = Path(out_file)
    io.atomic_write_text(out.with_name(out.name + ".config.txt"), merged.to_text())


def _label_array(path: str) -> np.ndarray:
    vol = io.load_volume(path)
    if isinstance(vol, LabelVolume):
        return vol.labels
    if isinstance(vol, ProbVolume):
        return vol.argmax()
    raise ShapeError(f"{path}: expected a label or probability volume, found {type(vol).__name__}")


# -- subcommands ----------------------------------------------------------------

def cmd_tsdf(args) -> int:
    cam_cfg = _config(args.cam)
    spec_cfg = _config(args.spec)
    grid = spec_cfg.grid()
    cam = cam_cfg.camera(grid)
    depth = io.read_depth_png(args.depth)
    trunc = spec_cfg.truncation if args.trunc is None else args.trunc
    io.save_volume(args.out, tsdf_encode(depth, cam, grid, trunc))
    _write_config_beside(args.out, cam_cfg, spec_cfg, truncation=trunc)
    print(f"wrote {args.out} and {io.visibility_path(args.out)}")
    return 0


def cmd_project(args) -> int:
    cam_cfg, spec_cfg = _config(args.cam), _config(args.spec)
    grid = spec_cfg.grid()
    cam = cam_cfg.camera(grid)
    _, feat, _ = io.read_vgrid(args.feat, expect_kind=io.KIND_FEATURE)
    if feat.shape[3] != 1:
        raise ShapeError(f"2-D feature map must have Z = 1, got dims {feat.shape[1:]}")
    depth = io.read_depth_png(args.depth)
    vol, counts = project_features(feat[..., 0].astype(np.float64), depth, cam, grid)
    io.save_volume(args.out, vol)
    _write_config_beside(args.out, cam_cfg, spec_cfg)
    print(f"wrote {args.out}: {int((counts > 0).sum())} voxels received features")
    return 0


def cmd_fcm(args) -> int:
    feats = io.load_volume(args.features)
    if not isinstance(feats, FeatureVolume):
        raise ShapeError(f"{args.features}: expected a feature volume")
    classes = _label_array(args.classes)
    _, vis, _ = io.read_vgrid(args.vis, expect_kind=io.KIND_LABEL)
    _, occ, _ = io.read_vgrid(args.occ, expect_kind=io.KIND_LABEL)
    ctx = CompletionContext(classes, vis[0] != 0, occ[0] != 0)
    io.save_volume(args.out, complete_features(feats, ctx))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred = _label_array(args.pred)
    gt = _label_array(args.gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    tsdf = io.load_volume(args.tsdf)
    region = eval_regions(tsdf.visibility, gt)
    per_class, miou = ssc_iou(pred, gt, region != EvalRegion.EXCLUDED)
    prec, rec, iou = sc_metrics(pred != 0, gt, region == EvalRegion.OCCLUDED)
    lines = ["metric,class,name,value"]
    for c, v in zip(range(1, NUM_CLASSES), per_class):
        lines.append(f"iou,{c},{CLASS_NAMES[c]},{v:.6f}")
    lines.append(f"miou,,,{miou:.6f}")
    lines.append(f"sc_precision,,,{prec:.6f}")
    lines.append(f"sc_recall,,,{rec:.6f}")
    lines.append(f"sc_iou,,,{iou:.6f}")
    # ignore-labelled voxels (255) are dropped from every metric above
    lines.append("ignore_label_excluded,,,255")
    io.atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"mIoU {miou:.4f}  SC precision {prec:.4f} recall {rec:.4f} IoU {iou:.4f}")
    return 0


def cmd_hist(args) -> int:
    probs = io.load_volume(args.probs)
    if not isinstance(probs, ProbVolume):
        raise ShapeError(f"{args.probs}: expected a probability volume")
    if not 0 <= args.cls < probs.num_classes:
        raise ShapeError(f"class {args.cls} outside 0..{probs.num_classes - 1}")
    counts = prob_histogram(probs, _label_array(args.gt), args.cls, args.bins)
    io.atomic_write_text(args.out, histogram_csv(counts))
    print(f"wrote {args.out}: {int(counts.sum())} voxels")
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradcheck_losses(args.seed, args.classes, args.voxels)
    errors.update(autodiff.primitive_gradchecks(args.seed))
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:16s} {err:.3e}")
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    return 0 if worst <= GRADCHECK_TOL else 1


def cmd_scenes(args) -> int:
    cfg = _config(args.spec)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    samples = make_dataset(cfg.scene_spec(), args.n, cfg.seed)
    for s in samples:
        d = out / f"scene_{s.seed:05d}"
        io.save_volume(d / "gt.vgrid", s.gt)
        io.save_volume(d / "tsdf.vgrid", s.tsdf)
        io.save_volume(d / "rf1.vgrid", s.rf1)
        io.write_vgrid(d / "counts.vgrid", io.KIND_FEATURE, s.counts[None].astype(np.float32), s.gt.spec)
        h, w = s.depth.shape
        io.write_vgrid(d / "feat.vgrid", io.KIND_FEATURE, s.feat[..., None], GridSpec((h, w, 1), 1.0))
        io.write_depth_png(d / "depth.png", s.depth)
    _write_config(out, cfg)
    print(f"wrote {len(samples)} scenes to {out}")
    return 0


def _param_grid(value: np.ndarray) -> tuple:
    """Lay a parameter tensor out as (channels, X, Y, Z) for VGRID storage."""
    if value.ndim == 5:
        return value.reshape(value.shape[0] * value.shape[1], *value.shape[2:]), value.shape[2:]
    if value.ndim == 2:
        return value[:, :, None, None], (value.shape[1], 1, 1)
    return value[:, None, None, None], (1, 1, 1)


def cmd_train_demo(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.out_dir or "train-demo")
    train_set, val_set = ablation.dataset_for(cfg)
    model = FusionModel(FusionConfig(width=cfg.width, two_stage=cfg.two_stage, reuse_tsdf=cfg.reuse_tsdf),
                        cfg.seed)
    tcfg = TrainConfig(epochs=cfg.epochs, base_lr=cfg.base_lr, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                       lambda1=cfg.lambda1, lambda2=cfg.lambda2, eval_every=1)
    result = train(model, train_set, tcfg, seed=cfg.seed, val=val_set)
    io.atomic_write_text(out / "train_log.csv", result.to_csv())
    index = ["name,shape"]
    for name, value in model.state().items():
        data, dims = _param_grid(value)
        io.write_vgrid(out / "params" / f"{name}.vgrid", io.KIND_FEATURE, data, GridSpec(dims, 1.0))
        index.append(f"{name},{'x'.join(str(s) for s in value.shape)}")
    io.atomic_write_text(out / "params" / "index.csv", "\n".join(index) + "\n")
    for c, counts in result.final.histograms.items():
        io.atomic_write_text(out / "hist" / f"class_{c:02d}.csv", histogram_csv(counts))
    _write_config(out, cfg)
    final = result.final
    print(f"final mIoU {final.miou:.4f} (preliminary {final.miou_pre:.4f}), mid-band mass {final.mid_mass:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    plan = parse_plan(Path(args.plan).read_text())
    out = Path(args.out)
    outcomes = ablation.run_ablation(plan, cfg)
    io.atomic_write_text(out / "ablation.csv", ablation.results_csv(outcomes))
    io.atomic_write_text(out / "resources.csv", ablation.resources_csv(outcomes))
    _write_config(out, cfg)
    failed = [o.variant.name for o in outcomes if o.error]
    print(f"{len(outcomes)} variants, {len(failed)} failed" + (f": {', '.join(failed)}" if failed else ""))
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxsem", description="Voxel semantic scene completion toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("tsdf", help="encode a depth PNG as a flipped TSDF volume")
    p.add_argument("--depth", required=True)
    p.add_argument("--cam", required=True, help="camera config")
    p.add_argument("--spec", required=True, help="grid config")
    p.add_argument("--trunc", type=float, default=None, help="truncation distance in metres")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tsdf)

    p = sub.add_parser("project", help="lift a 2-D feature map into the voxel grid")
    p.add_argument("--feat", required=True, help="VGRID feature map with Z = 1")
    p.add_argument("--depth", required=True)
    p.add_argument("--cam", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("fcm", help="fill occluded voxels with class-mean features")
    p.add_argument("--features", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--vis", required=True, help="label VGRID, non-zero = visible")
    p.add_argument("--occ", required=True, help="label VGRID, non-zero = occluded")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fcm)

    p = sub.add_parser("eval", help="SC and SSC metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tsdf", required=True, help="TSDF VGRID with its sibling visibility file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hist", help="histogram of ground-truth-class probabilities")
    p.add_argument("--probs", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("gradcheck", help="finite-difference check of loss and layer gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=NUM_CLASSES)
    p.add_argument("--voxels", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scenes", help="generate synthetic scenes")
    p.add_argument("--spec", default=None)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenes)

    p = sub.add_parser("train-demo", help="train the fusion network on synthetic scenes")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("ablate", help="train and compare model variants on one dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (VoxsemError, ValueError, OSError) as exc:
        print(f"voxsem {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
