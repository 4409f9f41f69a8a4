"""Command-line entry point: synth, fuse, train, render, eval, edit-apply."""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import synth
from .config import ConfigError, Settings, load_settings
from .dataset import (DatasetDir, DatasetError, read_index_image, write_color, write_dataset, write_depth,
                      write_f32, write_index_image, write_intrinsics, format_pose_line, read_poses,
                      read_intrinsics)
from .edits import EditScriptError, apply_edit_script, load_edit_script
from .field import RadianceField
from .metrics import psnr, ssim
from .pipeline import reconstruct
from .registry import Registry
from .render import render_image
from .trainer import TrainResult, run_batch_training, run_incremental, make_field
from .volume import EditState, SemanticVolume, load_edit, save_edit

log = logging.getLogger("primfusion")

PRESETS = {
    "box-room": synth.box_room,
    "single-wall": synth.single_wall,
}


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------------


def _bounds_path(root: Path) -> Path:
    return root / "bounds.txt"


def write_bounds(root, lo, hi) -> None:
    _bounds_path(Path(root)).write_text(" ".join(f"{v:.17g}" for v in (*lo, *hi)) + "\n")


def dataset_bounds(ds: DatasetDir, frames, margin: float):
    """Scene box from ``bounds.txt`` when present, else observed points padded by ``margin``."""
    p = _bounds_path(ds.root)
    if p.exists():
        v = np.array([float(x) for x in p.read_text().split()])
        return v[:3], v[3:]
    from .geometry import backproject_image
    pts = np.concatenate([backproject_image(f.depth, f.intrinsics, f.pose) for f in frames])
    return pts.min(0) - margin, pts.max(0) + margin


def load_model(model_dir) -> tuple[RadianceField, SemanticVolume, Registry, Optional[EditState]]:
    d = Path(model_dir)
    for name in ("field.bin", "volume.bin", "registry.txt"):
        if not (d / name).exists():
            raise UsageError(f"{d}: missing {name}")
    edit = load_edit(d / "edit") if (d / "edit" / "edit_volume.bin").exists() else None
    return RadianceField.load(d / "field.bin"), SemanticVolume.load(d / "volume.bin"), Registry.load(d / "registry.txt"), edit


def save_model(out_dir, result: TrainResult) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    result.field.save(d / "field.bin")
    result.volume.save(d / "volume.bin")
    result.registry.save(d / "registry.txt")
    result.write_log(d / "log.csv")


# -- commands ------------------------------------------------------------------------


def cmd_synth(args, settings: Settings) -> int:
    spec = PRESETS[args.preset]()
    intr = synth.default_intrinsics(args.width, args.height)
    train_poses = synth.arc_poses(args.train)
    n_int = args.eval - args.eval // 2
    n_ext = args.eval // 2
    eval_poses = []
    if n_int:
        eval_poses += synth.emit_trajectory(train_poses, "interpolation", n_int)
    if n_ext:
        eval_poses += synth.emit_trajectory(train_poses, "extrapolation", n_ext)
    frames = synth.synthesize(spec, train_poses + eval_poses, intr, noise=args.noise, seed=args.seed)
    splits = ["train"] * len(train_poses) + ["interpolation"] * n_int + ["extrapolation"] * n_ext
    out = Path(args.out)
    try:
        write_dataset(out, frames, splits)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from None
    write_bounds(out, spec.bbox_min, spec.bbox_max)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_fuse(args, settings: Settings) -> int:
    ds = DatasetDir.open(args.data)
    frames = ds.frames(args.split)
    if not frames:
        raise UsageError(f"{args.data}: no frames in split {args.split!r}")
    settings.update("fusion", voxel_size=args.voxel_size)
    if args.no_planes:
        settings.update("fusion", use_planes=False)
    if args.depth_guided:
        settings.update("fusion", use_planes=False, depth_guided=True)
    settings.update("detector", cell_size=args.cell_size)
    lo, hi = dataset_bounds(ds, frames, args.margin)
    rec = reconstruct(frames, lo, hi, settings.fusion, settings.detector, seed=args.seed)
    out = Path(args.out)
    (out / "semantic").mkdir(parents=True, exist_ok=True)
    rec.volume.save(out / "volume.bin")
    rec.registry.save(out / "registry.txt")
    for fr in rec.frames:
        write_index_image(out / "semantic" / f"{fr.timestamp:06d}.png", fr.semantic)
    keys = [f"{a}->{b}" for a in "EDP" for b in "EDP"]
    with open(out / "fusion_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "touched"] + keys)
        for fr, st in zip(rec.frames, rec.stats):
            w.writerow([fr.timestamp, st.touched] + [st.transitions[k] for k in keys])
    c = rec.volume.counts()
    print(f"{len(rec.registry.alive)} alive planes; voxels E={c['E']} D={c['D']} P={c['P']}")
    return 0


def cmd_train(args, settings: Settings) -> int:
    ds = DatasetDir.open(args.data)
    frames = ds.frames("train")
    if not frames:
        raise UsageError(f"{args.data}: no training frames")
    settings.update("train", mode=args.mode, sampling=args.sampling, seed=args.seed,
                    epochs=args.epochs, iters_per_epoch=args.iters, rays_per_batch=args.batch)
    cfg = settings.train
    holdout = ds.frames("interpolation")[: args.holdout]
    if cfg.mode == "incremental":
        lo, hi = dataset_bounds(ds, frames, args.margin)
        result = run_incremental(frames, lo, hi, cfg, settings.fusion, settings.detector,
                                 render_cfg=settings.render, holdout=holdout)
    else:
        if not args.volume:
            raise UsageError("batch training needs --volume (output directory of 'fuse')")
        vdir = Path(args.volume)
        vol = SemanticVolume.load(vdir / "volume.bin")
        reg = Registry.load(vdir / "registry.txt")
        for fr in frames:
            sp = vdir / "semantic" / f"{fr.timestamp:06d}.png"
            if sp.exists():
                fr.semantic = read_index_image(sp)
        from .pipeline import Reconstruction
        rec = Reconstruction(reg, vol, frames)
        field = make_field(vol, cfg.seed, settings.encoding, settings.mlp)
        result = run_batch_training(rec, cfg, field, settings.render, holdout)
    save_model(args.out, result)
    last = result.log[-1] if result.log else {}
    print(f"trained {result.steps} steps; final train PSNR {last.get('psnr_train', float('nan')):.2f} dB")
    return 0


def cmd_render(args, settings: Settings) -> int:
    field, vol, reg, edit = load_model(args.model)
    if args.edit:
        edit = apply_edit_script(load_edit_script(args.edit), vol, reg, edit)
    if args.cameras:
        poses = read_poses(args.cameras)
        if not args.intrinsics:
            raise UsageError("--cameras needs --intrinsics")
        intr = read_intrinsics(args.intrinsics)
        cams = [(i, poses[i]) for i in sorted(poses)]
    elif args.data:
        ds = DatasetDir.open(args.data)
        intr = ds.intrinsics
        idx = ds.split(args.split) if args.split != "eval" else \
            [i for i in ds.indices if ds.splits.get(i, "train") != "train"]
        cams = [(i, ds.poses[i]) for i in idx]
    else:
        raise UsageError("render needs --data or --cameras")
    out = Path(args.out)
    for sub in ("color", "depth", "semantic", "opacity"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, pose in cams:
        img = render_image(pose, intr, vol, reg, field, edit, settings.render)
        write_color(out / "color" / f"{i:06d}.png", img["color"])
        write_depth(out / "depth" / f"{i:06d}.png", img["depth"])
        write_f32(out / "semantic" / f"{i:06d}.f32", img["semantic"])
        write_f32(out / "opacity" / f"{i:06d}.f32", img["opacity"])
        lines.append(format_pose_line(i, pose))
    (out / "poses.txt").write_text("\n".join(lines) + "\n")
    write_intrinsics(out / "intrinsics.txt", intr)
    print(f"rendered {len(cams)} views to {out}")
    return 0


def evaluate_dirs(pred_dir, gt_dir) -> list[dict]:
    from .dataset import read_color
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    rows = []
    for p in sorted((pred_dir / "color").glob("*.png")):
        g = gt_dir / "color" / p.name
        if not g.exists():
            raise UsageError(f"ground truth has no view {p.name}")
        a, b = read_color(p), read_color(g)
        rows.append({"view": p.stem, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    if not rows:
        raise UsageError(f"{pred_dir}: no rendered views")
    return rows


def cmd_eval(args, settings: Settings) -> int:
    rows = evaluate_dirs(args.pred, args.gt)
    mean = {"view": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows]))}
    print(f"{'view':>8} {'PSNR':>8} {'SSIM':>7}")
    for r in rows + [mean]:
        print(f"{r['view']:>8} {r['psnr']:8.2f} {r['ssim']:7.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["view", "psnr", "ssim"])
            w.writeheader()
            w.writerows(rows + [mean])
    return 0


def cmd_edit_apply(args, settings: Settings) -> int:
    field_path = Path(args.model) / "field.bin"
    _, vol, reg, edit = load_model(args.model)
    edit = apply_edit_script(load_edit_script(args.edit), vol, reg, edit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if out.resolve() != Path(args.model).resolve():
        shutil.copyfile(field_path, out / "field.bin")
    vol.save(out / "volume.bin")
    reg.save(out / "registry.txt")
    save_edit(edit, out / "edit")
    print(f"applied {args.edit} -> {out}")
    return 0


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="primfusion", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--threads", type=int, default=None, help="worker threads for compiled kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--preset", choices=sorted(PRESETS), default="box-room")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=20)
    s.add_argument("--eval", type=int, default=10)
    s.add_argument("--noise", type=float, default=0.0, help="depth noise std in metres")
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fuse", help="detect planes and fuse the semantic volume")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--voxel-size", type=float, default=None)
    s.add_argument("--cell-size", type=int, default=None)
    s.add_argument("--margin", type=float, default=0.2, help="padding when the dataset has no bounds.txt")
    s.add_argument("--no-planes", action="store_true", help="fuse every surface as D (ablation volume)")
    s.add_argument("--depth-guided", action="store_true",
                   help="no planes; carve E in front of each observed depth, D on and behind it")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("train", help="optimise the radiance field")
    s.add_argument("--data", required=True)
    s.add_argument("--volume", help="output directory of 'fuse' (batch mode)")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["batch", "incremental"], default=None)
    s.add_argument("--sampling", choices=["primitive", "dense", "depth"], default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--iters", type=int, default=None, help="iterations per epoch")
    s.add_argument("--batch", type=int, default=None, help="rays per batch")
    s.add_argument("--holdout", type=int, default=2, help="interpolation views scored in the log")
    s.add_argument("--margin", type=float, default=0.2)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render views from a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="dataset whose cameras to render")
    s.add_argument("--split", default="eval", help="train, interpolation, extrapolation, eval or all")
    s.add_argument("--cameras", help="poses.txt-format camera file")
    s.add_argument("--intrinsics", help="intrinsics.txt-format file (with --cameras)")
    s.add_argument("--edit", help="edit script applied before rendering")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM of rendered views against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", help="optional CSV output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("edit-apply", help="apply an edit script to a model directory")
    s.add_argument("--model", required=True)
    s.add_argument("--edit", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_edit_apply)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        import numba
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        settings = load_settings(args.config)
        settings.update("train", seed=args.seed)
        return args.func(args, settings)
    except (UsageError, ConfigError, DatasetError, EditScriptError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
