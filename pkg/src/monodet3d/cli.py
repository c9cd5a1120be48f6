"""Command-line surface: train, eval, infer, gradcheck, dump-attn, gen-data."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as dio
from .config import Config, apply_overrides, load_config
from .data import (
    Detection,
    class_name,
    format_kitti_calib,
    generate_scene,
    scale_to_bytes,
    write_kitti_label,
    write_kitti_result,
    write_pgm,
    write_ppm,
)
from .depth import build_depth_target
from .evaluation import evaluate_detections, format_report
from .gradcheck import gradcheck, tiny_config
from .training import (
    detection_to_box3d,
    heldout_scenes,
    load_model,
    object_to_box3d,
    run_inference,
    train,
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="K=V",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="override config.seed")
    p.add_argument("--out", default="out", help="output directory")


def _resolve_config(args, base: Config | None = None) -> Config:
    cfg = base or Config()
    if args.config:
        cfg = load_config(args.config, cfg)
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    result = train(cfg, args.out, resume=args.resume, log_fn=print)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.csv_path}")
    return 0


def _eval_scenes(args, cfg: Config) -> list:
    if args.data_dir:
        return load_scene_dir(args.data_dir)
    return heldout_scenes(cfg)


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    scenes = _eval_scenes(args, cfg)
    os.makedirs(os.path.join(args.out, "results"), exist_ok=True)
    model = None if args.oracle else load_model(cfg, args.checkpoint)
    detections = []
    gts_by_image = {}
    for scene in scenes:
        if args.oracle:
            dets = [
                Detection(o.class_id, o.box2d, o.dims, o.location, o.heading, 1.0)
                for o in scene.objects
            ]
        else:
            dets = run_inference(model, scene, cfg)
        write_kitti_result(dets, os.path.join(args.out, "results", f"{scene.id}.txt"))
        detections += [
            (scene.id, d.class_id, d.score, detection_to_box3d(d)) for d in dets
        ]
        gts_by_image[scene.id] = [
            (o.class_id, object_to_box3d(o)) for o in scene.objects if o.class_id >= 0
        ]
    rows = evaluate_detections(detections, gts_by_image, list(cfg.iou_thresholds))
    report = format_report(rows, class_name)
    with open(os.path.join(args.out, "metrics.txt"), "w") as f:
        f.write(report)
    print(report, end="")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    scenes = _eval_scenes(args, cfg)
    model = load_model(cfg, args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    for scene in scenes:
        dets = run_inference(model, scene, cfg)
        write_kitti_result(dets, os.path.join(args.out, f"{scene.id}.txt"))
    print(f"wrote {len(scenes)} result files to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args, base=tiny_config())
    result = gradcheck(cfg, tolerance=args.tolerance)
    for group, err in sorted(result.group_errors.items()):
        status = "pass" if err < result.tolerance else "FAIL"
        print(f"{status} {group}: max relative error {err:.3e}")
    print(f"gradcheck finished in {result.seconds:.1f}s")
    return 0 if result.passed else 1


def cmd_dump_attn(args) -> int:
    cfg = _resolve_config(args)
    model = load_model(cfg, args.checkpoint)
    scene = generate_scene(args.scene_seed, cfg.scene_spec())
    outputs = model.forward(scene.image)
    if not cfg.use_depth_ca:
        print("model has no depth cross-attention to dump", file=sys.stderr)
        return 1
    queries = [int(q) for q in args.queries.split(",")] if args.queries else [0]
    n = cfg.num_queries
    for q in queries:
        if not 0 <= q < n:
            raise ValueError(f"query index {q} outside 0..{n - 1}")
    os.makedirs(args.out, exist_ok=True)
    gh, gw = outputs.grid_hw
    for b, attn in enumerate(outputs.depth_attn):
        mean_attn = attn.data.mean(axis=0)  # heads averaged, [N, S]
        for q in queries:
            amap = mean_attn[q].reshape(gh, gw)
            total = float(amap.sum())
            if abs(total - 1.0) > 1e-6:
                print(f"warning: block {b} query {q} attention sums to {total}",
                      file=sys.stderr)
            write_pgm(os.path.join(args.out, f"attn_b{b}_q{q:03d}.pgm"),
                      scale_to_bytes(amap))
    write_pgm(os.path.join(args.out, "depth_map.pgm"),
              scale_to_bytes(outputs.depth_map.data))
    write_ppm(os.path.join(args.out, "scene.ppm"), scene.image.data)
    print(f"wrote attention maps for queries {queries} to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    spec = cfg.scene_spec()
    os.makedirs(args.out, exist_ok=True)
    bin_spec = cfg.bin_spec()
    for i in range(args.count):
        scene = generate_scene(cfg.scene_seed + i, spec)
        write_ppm(os.path.join(args.out, f"{scene.id}.ppm"), scene.image.data)
        write_kitti_label(scene.objects, os.path.join(args.out, f"{scene.id}.txt"))
        with open(os.path.join(args.out, f"{scene.id}_calib.txt"), "w") as f:
            f.write(format_kitti_calib(scene.camera))
        if args.depth_targets:
            target = build_depth_target(
                scene.objects, bin_spec, cfg.image_h // 16, cfg.image_w // 16
            )
            with open(os.path.join(args.out, f"{scene.id}_depth.pgm"), "wb") as f:
                f.write(target.to_pgm_bytes(bin_spec.k))
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def load_scene_dir(path) -> list:
    """Scenes previously written by gen-data (ppm + label + calib triples)."""
    from .autodiff import Tensor
    from .data import SceneSample, decode_ppm, parse_kitti_calib, parse_kitti_labels

    scenes = []
    for name in sorted(os.listdir(path)):
        if not name.endswith(".ppm"):
            continue
        stem = name[: -len(".ppm")]
        with open(os.path.join(path, name), "rb") as f:
            img = decode_ppm(f.read())
        with open(os.path.join(path, f"{stem}.txt")) as f:
            objects = parse_kitti_labels(f.read())
        with open(os.path.join(path, f"{stem}_calib.txt")) as f:
            cam = parse_kitti_calib(f.read())
        w, h = img.shape[2], img.shape[1]
        for obj in objects:
            center = (
                obj.location[0],
                obj.location[1] - obj.dims[0] / 2.0,
                obj.location[2],
            )
            u, v, _ = dio.project(center, cam)
            obj.center3d_norm = (u / w, v / h)
        scenes.append(SceneSample(image=Tensor(img), camera=cam, objects=objects, id=stem))
    return scenes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monodet3d",
        description="Depth-guided set-prediction detector for monocular 3-D detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic scenes")
    _add_common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run inference and score AP")
    _add_common(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--data-dir", help="evaluate scenes from a gen-data directory")
    p.add_argument("--oracle", action="store_true",
                   help="feed ground truth as predictions (evaluator identity)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="write KITTI result files")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dump-attn", help="export depth cross-attention maps as PGM")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--queries", default="0", help="comma-separated query indices")
    p.set_defaults(fn=cmd_dump_attn)

    p = sub.add_parser("gen-data", help="write synthetic scenes to disk")
    _add_common(p)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--depth-targets", action="store_true",
                   help="also dump depth-bin target grids as PGM")
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
