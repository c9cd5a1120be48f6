"""Training loop, inference and scene-level evaluation drivers."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .data import Detection, SceneSample, generate_scene, hflip_scene
from .depth import build_depth_target, expected_depth_map
from .evaluation import Box3D
from .heads import (
    LossContext,
    predicted_depth,
    reconstruct_heading,
    recover_box2d,
    sample_depth_map,
)
from .matcher import match, overall_loss
from .model import Model, ModelOutputs
from .optim import AdamW

CSV_HEADER = "epoch,L_class,L_C3D,L_lrtb,L_GIoU,L_dim,L_orien,L_depth,L_dmap,total"
_TERM_KEYS = ("class", "c3d", "lrtb", "giou", "dim", "orien", "depth", "dmap", "total")


def build_model(cfg: Config) -> Model:
    return Model(cfg)


def training_scenes(cfg: Config) -> list:
    """The fixed training set: one scene per seed scene_seed + index."""
    spec = cfg.scene_spec()
    return [generate_scene(cfg.scene_seed + i, spec) for i in range(cfg.train_scenes)]


def heldout_scenes(cfg: Config, count: int | None = None) -> list:
    spec = cfg.scene_spec()
    n = cfg.eval_scenes if count is None else count
    return [generate_scene(cfg.eval_scene_seed + i, spec) for i in range(n)]


def loss_context(scene: SceneSample, outputs: ModelOutputs, cfg: Config) -> LossContext:
    return LossContext(
        image_w=float(scene.image.shape[2]),
        image_h=float(scene.image.shape[1]),
        f_y=scene.camera.fy,
        depth_map=outputs.depth_map,
        d_min=cfg.d_min,
        d_max=cfg.d_max,
        num_classes=cfg.num_classes,
        orient_bins=cfg.orient_bins,
        focal_alpha=cfg.focal_alpha,
        focal_gamma=cfg.focal_gamma,
    )


def scene_loss(model: Model, scene: SceneSample, cfg: Config,
               fixed_assignments: list | None = None):
    """Forward one scene and assemble the full objective.

    Returns (loss Tensor, per-term dict, ModelOutputs).
    """
    outputs = model.forward(scene.image)
    target = build_depth_target(scene.objects, model.bin_spec, *outputs.grid_hw)
    ctx = loss_context(scene, outputs, cfg)
    blocks = outputs.block_heads if cfg.aux_loss else [outputs.final]
    total, terms = overall_loss(
        blocks, scene.objects, outputs.fg, target, ctx, cfg.loss_weights(),
        dmap_gamma=cfg.dmap_focal_gamma, fixed_assignments=fixed_assignments,
    )
    return total, terms, outputs


def _check_terms(terms: dict, epoch: int, step: int) -> None:
    for name, value in terms.items():
        if not np.isfinite(value):
            raise RuntimeError(
                f"non-finite loss term L_{name} = {value} at epoch {epoch}, step {step}"
            )


def _epoch_lr(cfg: Config, epoch: int) -> float:
    decays = sum(1 for m in cfg.lr_decay_epochs if epoch > m)
    return cfg.lr * (cfg.lr_decay_factor**decays)


def _rng_state_array(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    parts = []
    for value in (st["state"]["state"], st["state"]["inc"]):
        for shift in range(4):
            parts.append(float((value >> (32 * shift)) & 0xFFFFFFFF))
    parts.append(float(st["has_uint32"]))
    parts.append(float(st["uinteger"]))
    return np.asarray(parts)


def _rng_from_state_array(arr: np.ndarray) -> np.random.Generator:
    vals = [int(v) for v in arr]
    state = sum(vals[i] << (32 * i) for i in range(4))
    inc = sum(vals[4 + i] << (32 * i) for i in range(4))
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": vals[8],
        "uinteger": vals[9],
    }
    return rng


def checkpoint_arrays(model: Model, optimizer: AdamW, epoch: int,
                      rng: np.random.Generator) -> dict:
    out = {"meta.epoch": np.asarray(float(epoch)), "meta.rng": _rng_state_array(rng)}
    for name, p in model.params().items():
        out[f"param.{name}"] = p.data
    out.update(optimizer.state_arrays())
    return out


@dataclass
class TrainResult:
    checkpoint_path: str
    csv_path: str
    epochs_run: int


def train(cfg: Config, out_dir, resume: str | None = None,
          log_fn=None) -> TrainResult:
    """Train on the fixed synthetic set; write per-epoch losses and checkpoints.

    The CSV holds one row per epoch with per-term means over the epoch's
    scenes. Zero-weighted terms still report their raw values; they simply
    do not enter the total. Resuming restores parameters, optimizer
    moments and the data-order RNG, so a resumed run reproduces an
    uninterrupted one bit for bit.
    """
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(cfg)
    optimizer = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    start_epoch = 0
    if resume is not None:
        arrays = load_checkpoint(resume)
        model.load_params(arrays)
        optimizer.load_state(arrays)
        rng = _rng_from_state_array(arrays["meta.rng"])
        start_epoch = int(arrays["meta.epoch"])
    scenes = training_scenes(cfg)
    csv_path = os.path.join(out_dir, "losses.csv")
    with open(csv_path, "w") as f:
        f.write(CSV_HEADER + "\n")
    last_path = os.path.join(out_dir, "last.mdtr")
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(cfg.to_text())

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        lr = _epoch_lr(cfg, epoch)
        order = rng.permutation(len(scenes))
        flips = rng.random(len(scenes)) < cfg.augment_hflip if cfg.augment_hflip > 0 \
            else np.zeros(len(scenes), dtype=bool)
        sums = dict.fromkeys(_TERM_KEYS, 0.0)
        step = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            optimizer.zero_grad()
            for pos in batch:
                scene = scenes[pos]
                if flips[pos]:
                    scene = hflip_scene(scene)
                loss, terms, _ = scene_loss(model, scene, cfg)
                _check_terms(terms, epoch, step)
                ad.mul(loss, 1.0 / len(batch)).backward()
                for key in _TERM_KEYS:
                    sums[key] += terms[key]
            optimizer.step(lr)
            step += 1
        means = {k: sums[k] / len(scenes) for k in _TERM_KEYS}
        row = f"{epoch}," + ",".join(f"{means[k]:.17g}" for k in _TERM_KEYS)
        with open(csv_path, "a") as f:
            f.write(row + "\n")
        if log_fn is not None:
            log_fn(f"epoch {epoch}/{cfg.epochs} lr={lr:g} total={means['total']:.5f}")
        save_checkpoint(last_path, checkpoint_arrays(model, optimizer, epoch, rng))
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            epoch_path = os.path.join(out_dir, f"epoch_{epoch:04d}.mdtr")
            save_checkpoint(epoch_path, checkpoint_arrays(model, optimizer, epoch, rng))
    return TrainResult(checkpoint_path=last_path, csv_path=csv_path,
                       epochs_run=cfg.epochs - start_epoch)


def load_model(cfg: Config, checkpoint_path) -> Model:
    model = build_model(cfg)
    model.load_params(load_checkpoint(checkpoint_path))
    return model


# -- inference ----------------------------------------------------------------


def run_inference(model: Model, scene: SceneSample, cfg: Config,
                  outputs: ModelOutputs | None = None) -> list:
    """Detections from the final decoder block, no NMS.

    A query is emitted when its best class probability (optionally scaled
    by exp(-sigma)) clears the confidence floor.
    """
    if outputs is None:
        outputs = model.forward(scene.image)
    final = outputs.final
    probs = final.class_probs.data
    sigmas = np.exp(final.depth_log_sigma.data)
    w = float(scene.image.shape[2])
    h = float(scene.image.shape[1])
    cam = scene.camera
    ctx = loss_context(scene, outputs, cfg)
    detections = []
    for q in range(len(final)):
        class_id = int(np.argmax(probs[q]))
        score = float(probs[q, class_id])
        if cfg.score_sigma_modulation:
            score *= float(np.exp(-sigmas[q]))
        if score < cfg.confidence_floor:
            continue
        pred = final.query(q)
        depth = predicted_depth(pred, ctx).item()
        cx, cy = pred.center3d.data
        u, v = cx * w, cy * h
        x = ((u - cam.cx) * depth - cam.P[0, 3]) / cam.fx
        y_center = ((v - cam.cy) * depth - cam.P[1, 3]) / cam.fy
        dims = tuple(pred.dims.data)
        location = (x, y_center + dims[0] / 2.0, depth)
        bin_idx = int(np.argmax(pred.orient_bin_logits.data))
        heading = reconstruct_heading(bin_idx, float(pred.orient_residuals.data[bin_idx]),
                                      cfg.orient_bins)
        box = recover_box2d(pred.center3d, pred.sides, w, h)
        detections.append(
            Detection(
                class_id=class_id,
                box2d=tuple(float(b.item()) for b in box),
                dims=dims,
                location=location,
                heading=heading,
                score=score,
            )
        )
    return detections


def detection_to_box3d(det: Detection) -> Box3D:
    return Box3D(center=det.location, dims=det.dims, heading=det.heading)


def object_to_box3d(obj) -> Box3D:
    return Box3D(center=obj.location, dims=obj.dims, heading=obj.heading)


# -- matched-pair error statistics ---------------------------------------------


@dataclass
class DepthErrorStats:
    center_errors: list  # Euclidean error of matched centers, normalized units
    depth_errors: list  # |d_pred - d_gt| of matched pairs, meters
    dmap_errors: list  # |decoded map at GT center - d_gt|, meters
    num_objects: int

    @property
    def mean_depth_error(self) -> float:
        return float(np.mean(self.depth_errors)) if self.depth_errors else float("inf")

    @property
    def mean_dmap_error(self) -> float:
        return float(np.mean(self.dmap_errors)) if self.dmap_errors else float("inf")


def depth_error_stats(model: Model, scenes: list, cfg: Config,
                      decode_override: str | None = None) -> DepthErrorStats:
    """Match final predictions to labels and collect depth/center errors.

    decode_override recomputes the decoded depth grid with the given mode
    (weighted or argmax) before sampling it at the labeled centers.
    """
    center_errors, depth_errors, dmap_errors = [], [], []
    num_objects = 0
    for scene in scenes:
        outputs = model.forward(scene.image)
        num_objects += len(scene.objects)
        if not scene.objects:
            continue
        ctx = loss_context(scene, outputs, cfg)
        assign = match(outputs.final, scene.objects, ctx, cfg.loss_weights())
        dmap = outputs.depth_map
        if decode_override is not None:
            dmap = expected_depth_map(outputs.fg, model.bin_spec, decode_override)
        gh, gw = outputs.grid_hw
        for g, q in assign.pairs:
            gt = scene.objects[g]
            pred = outputs.final.query(q)
            gx, gy = gt.center3d_norm
            px, py = pred.center3d.data
            center_errors.append(float(np.hypot(px - gx, py - gy)))
            depth_errors.append(abs(predicted_depth(pred, ctx).item() - gt.depth))
            sampled = sample_depth_map(
                dmap, Tensor(np.asarray(gx * gw)), Tensor(np.asarray(gy * gh))
            )
            dmap_errors.append(abs(sampled.item() - gt.depth))
    return DepthErrorStats(center_errors, depth_errors, dmap_errors, num_objects)
