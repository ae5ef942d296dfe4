"""Command line entry point: ``coseg synth|build|unproject|train-seg|render|eval``.

Every training subcommand reads an optional JSON config (``--config``)
whose values are overridden by explicit flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io, synth, train
from .metrics import cluster_indices, miou_accuracy, psnr
from .raster import render
from .train import TrainConfig


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _load_config(path) -> TrainConfig:
    return TrainConfig() if path is None else TrainConfig.from_dict(io.read_json(path))


def _override(obj, **values):
    return dataclasses.replace(obj, **{k: v for k, v in values.items() if v is not None})


def _scene_views(root: Path, n_views: int, which: str) -> list[int]:
    meta_path = root / "scene.json"
    meta = io.read_json(meta_path) if meta_path.exists() else {}
    if which == "all" or f"{which}_views" not in meta:
        return list(range(n_views))
    return list(meta[f"{which}_views"])


def _load_stacks(root: Path, n_views: int, scales) -> list[dict]:
    return [{s: io.load_fmap(synth.fmap_path(root, v, s)) for s in scales} for v in range(n_views)]


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> None:
    scene = synth.generate(args.objects, args.gaussians_per_object, args.views, args.seed,
                           args.feature_noise, image_size=args.image_size,
                           feature_size=args.feature_size, feature_dim=args.feature_dim)
    raw, manifest = scene.labels, []
    if args.noise_rate > 0:
        raw, manifest = train.inject_label_noise(scene.labels, args.noise_rate, args.seed,
                                                 scene.num_classes, scene.instances)
    synth.write_scene(scene, args.out, raw, manifest)
    print(json.dumps({"out": str(args.out), "gaussians": len(scene.gaussians),
                      "views": args.views, "noisy_instances": len(manifest)}))


def cmd_build(args) -> None:
    cfg = _load_config(args.config)
    s1 = _override(cfg.stage1, iterations=args.iterations, lambda1=args.lambda1,
                   densify=True if args.densify else None, sh=True if args.sh else None)
    seed = cfg.seed if args.seed is None else args.seed
    root = Path(args.scene)
    cams = io.load_cameras(root / "cameras.json")
    images = [io.load_png(root / "images" / f"{synth.view_name(v)}.png") for v in range(len(cams))]
    points, colors = io.load_point_cloud(root / "points3d.ply")
    t0 = time.perf_counter()
    views = _scene_views(root, len(cams), args.views)
    gs = train.stage1_build(images, cams, (points, colors), s1, seed,
                            log_fn=io.JsonLinesLog(args.log), views=views)
    io.save_gaussians(args.out, gs)
    print(json.dumps({"out": str(args.out), "gaussians": len(gs),
                      "seconds": time.perf_counter() - t0}))


def cmd_unproject(args) -> None:
    from .unproject import unproject_all_scales

    root = Path(args.scene)
    cams = io.load_cameras(root / "cameras.json")
    gs = io.load_gaussians(args.gaussians)
    t0 = time.perf_counter()
    stacks = _load_stacks(root, len(cams), args.scales)
    out, keep = unproject_all_scales(gs, cams, stacks, args.attendance_threshold, args.eps,
                                     args.scales)
    io.save_gaussians(args.out, out)
    print(json.dumps({"out": str(args.out), "kept": int(keep.sum()), "pruned": int((~keep).sum()),
                      "seconds": time.perf_counter() - t0}))


def cmd_train_seg(args) -> None:
    cfg = _load_config(args.config)
    coseg = _override(cfg.stage2.coseg, pi_rl=args.pi_rl, lambda_pix=args.lambda_pix,
                      lambda_reg=args.lambda_reg, reg_scales=args.reg_scales, reg_M=args.reg_M,
                      reg_K=args.reg_K, pixel_loss=args.pixel_loss)
    s2 = _override(cfg.stage2, iterations=args.iterations, lr=args.lr, scales=args.scales,
                   attendance_threshold=args.attendance_threshold, coseg=coseg)
    seed = cfg.seed if args.seed is None else args.seed
    root = Path(args.scene)
    cams = io.load_cameras(root / "cameras.json")
    gs = io.load_gaussians(args.gaussians)
    labels = [io.load_label_png(root / args.labels / f"{synth.view_name(v)}.png")
              for v in range(len(cams))]
    if args.num_classes is not None:
        num_classes = args.num_classes
    else:
        num_classes = int(max(lab.max() for lab in labels)) + 1
    encoder = io.load_encoder_weights(args.encoder_weights) if args.encoder_weights else None
    has_features = all(n in gs.features for n in s2.scales)
    stacks = None if has_features else _load_stacks(root, len(cams), s2.scales)
    out = Path(args.out)
    t0 = time.perf_counter()
    model = train.stage2_segment(gs, cams, stacks, labels, num_classes, s2, seed,
                                 _scene_views(root, len(cams), args.views), encoder,
                                 log_fn=io.JsonLinesLog(out / "train_log.jsonl"))
    io.save_gaussians(out / "segmented.ply", model.gaussians)
    io.save_decoder(out / "decoder.csgd", model.decoder, {"seed": seed})
    io.save_encoder_weights(out / "encoder.rlaw", model.encoder)
    io.write_json(out / "config.json", dataclasses.replace(cfg, stage2=s2, seed=seed).to_dict())
    print(json.dumps({"out": str(out), "gaussians": len(model.gaussians),
                      "seconds": time.perf_counter() - t0}))


def cmd_render(args) -> None:
    gs = io.load_gaussians(args.gaussians)
    cams = io.load_cameras(args.cameras)
    views = list(range(len(cams))) if args.views is None else list(args.views)
    out = Path(args.out)
    timings = {}
    for v in views:
        name = synth.view_name(v)
        t0 = time.perf_counter()
        if args.mode == "color":
            img = render(cams[v], gs, "color", record=False).image
            timings[name] = time.perf_counter() - t0
            io.save_png(out / f"{name}.png", img)
        elif args.mode == "seg":
            img = render(cams[v], gs, "seg", record=False).image
            timings[name] = time.perf_counter() - t0
            io.save_label_png(out / f"{name}.png", train.predict_labels(img))
            io.save_fmap(out / f"{name}.fmap", img)
        else:
            scale = int(args.mode.split(":")[1])
            img = render(cams[v], gs, ("feature", scale), record=False).image
            timings[name] = time.perf_counter() - t0
            io.save_fmap(out / f"{name}.fmap", img)
    io.write_json(out / "timings.json", {"mode": args.mode, "seconds": timings})
    print(json.dumps({"out": str(out), "views": len(views),
                      "seconds": float(sum(timings.values()))}))


def _pngs(d: Path) -> dict:
    return {p.stem: p for p in sorted(d.glob("*.png"))}


def cmd_eval(args) -> None:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    preds, gts = _pngs(pred_dir), _pngs(gt_dir)
    names = sorted(set(preds) & set(gts))
    if args.views is not None:
        names = [n for n in names if int(n) in set(args.views)]
    if not names:
        raise SystemExit(f"no matching label maps in {pred_dir} and {gt_dir}")
    t0 = time.perf_counter()
    P = [io.load_label_png(preds[n]) for n in names]
    G = [io.load_label_png(gts[n]) for n in names]
    seg = miou_accuracy(P, G, args.num_classes)
    report = {"views": names, "mIoU": seg["mIoU"], "Acc": seg["Acc"],
              "per_class_IoU": [None if np.isnan(x) else x for x in seg["per_class_IoU"]],
              "confusion": seg["confusion"].tolist()}
    if args.image_dir and args.ref_dir:
        imgs, refs = _pngs(Path(args.image_dir)), _pngs(Path(args.ref_dir))
        vals = [psnr(io.load_png(imgs[n]), io.load_png(refs[n])) for n in names
                if n in imgs and n in refs]
        report["PSNR"] = float(np.mean(vals)) if vals else None
    if args.feature_dir:
        feats = [io.load_fmap(Path(args.feature_dir) / f"{n}.fmap") for n in names]
        labels = [g if f.shape[:2] == g.shape else _resize_labels(g, f.shape[:2])
                  for f, g in zip(feats, G)]
        X = np.concatenate([f.reshape(-1, f.shape[-1]) for f in feats])
        y = np.concatenate([lab.ravel() for lab in labels])
        report.update(cluster_indices(X, y))
    timings = {"eval_seconds": time.perf_counter() - t0}
    if (pred_dir / "timings.json").exists():
        timings["render_seconds"] = io.read_json(pred_dir / "timings.json")["seconds"]
    report["timings"] = timings
    io.write_json(args.out, report)
    print(json.dumps({k: report[k] for k in ("mIoU", "Acc")}))


def _resize_labels(labels: np.ndarray, shape) -> np.ndarray:
    rows = (np.arange(shape[0]) + 0.5) * labels.shape[0] / shape[0]
    cols = (np.arange(shape[1]) + 0.5) * labels.shape[1] / shape[1]
    return labels[rows.astype(int)[:, None], cols.astype(int)[None, :]]


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--objects", type=int, default=5)
    s.add_argument("--gaussians-per-object", type=int, default=20)
    s.add_argument("--views", type=int, default=12)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--feature-noise", type=float, default=0.0)
    s.add_argument("--noise-rate", type=float, default=0.0,
                   help="share of instances relabeled per view in raw_labels/")
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--feature-size", type=int, default=32)
    s.add_argument("--feature-dim", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("build", help="stage 1: fit Gaussians to posed images")
    b.add_argument("--scene", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--iterations", type=int)
    b.add_argument("--lambda1", type=float)
    b.add_argument("--densify", action="store_true")
    b.add_argument("--sh", action="store_true", help="degree-1 view-dependent color")
    b.add_argument("--seed", type=int)
    b.add_argument("--views", default="train", choices=["train", "all"])
    b.add_argument("--log")
    b.set_defaults(func=cmd_build)

    u = sub.add_parser("unproject", help="lift feature maps onto a Gaussian set")
    u.add_argument("--scene", required=True)
    u.add_argument("--gaussians", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--attendance-threshold", type=float, default=1e-7)
    u.add_argument("--eps", type=float, default=1e-8)
    u.add_argument("--scales", type=_ints, default=(1, 2, 3, 4))
    u.set_defaults(func=cmd_unproject)

    t = sub.add_parser("train-seg", help="stage 2: train the fusion decoder and bake identities")
    t.add_argument("--scene", required=True)
    t.add_argument("--gaussians", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--labels", default="raw_labels", help="label directory inside the scene")
    t.add_argument("--num-classes", type=int)
    t.add_argument("--config")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--scales", type=_ints)
    t.add_argument("--attendance-threshold", type=float)
    t.add_argument("--pi-rl", type=float)
    t.add_argument("--lambda-pix", type=float)
    t.add_argument("--lambda-reg", type=float)
    t.add_argument("--reg-scales", type=_ints)
    t.add_argument("--reg-M", type=int)
    t.add_argument("--reg-K", type=int)
    t.add_argument("--pixel-loss", choices=["js", "ce"])
    t.add_argument("--encoder-weights")
    t.add_argument("--seed", type=int)
    t.add_argument("--views", default="train", choices=["train", "all"])
    t.set_defaults(func=cmd_train_seg)

    r = sub.add_parser("render", help="render color, segmentation or feature maps")
    r.add_argument("--gaussians", required=True)
    r.add_argument("--cameras", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--mode", default="color",
                   help="color, seg, or feature:N for the scale-N feature field")
    r.add_argument("--views", type=_ints)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score predicted label maps against ground truth")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--num-classes", type=int)
    e.add_argument("--views", type=_ints)
    e.add_argument("--image-dir", help="rendered color images for PSNR")
    e.add_argument("--ref-dir", help="reference color images for PSNR")
    e.add_argument("--feature-dir", help="rendered FMAP feature maps for CH/DB")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "render" and args.mode not in ("color", "seg") \
            and not args.mode.startswith("feature:"):
        raise SystemExit(f"unknown render mode {args.mode!r}")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
