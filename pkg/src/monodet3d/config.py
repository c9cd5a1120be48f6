"""Flat key = value configuration with command-line overrides.

Every tunable of the model, losses, training loop and scene generator
lives here. Files hold one ``key = value`` per line (# starts a comment);
``--set key=value`` overrides from the command line. Defaults reproduce
the reference choices: 3/1/3 encoder/decoder blocks, 8 heads, 50 queries,
80 lid bins on [0, 80], weighted-average decoding, depth cross-attention
first, term weights (2, 10, 5, 2, 1, 1, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .data import SceneSpec
from .depth import DepthBinSpec
from .matcher import LossWeights


@dataclass
class Config:
    seed: int = 0

    # model
    image_h: int = 96
    image_w: int = 320
    channels: int = 64
    ffn_width: int = 256
    heads: int = 8
    num_queries: int = 50
    visual_encoder_blocks: int = 3
    depth_encoder_blocks: int = 1
    decoder_blocks: int = 3
    depth_ca_position: int = 1
    use_depth_ca: bool = True
    depth_embed_source: str = "encoder"  # encoder | none | conv1x1 | dmap_sine | dmap_pd
    depth_pos_mode: str = "learned"  # learned | sine
    pos_depth_stop_gradient: bool = False
    num_classes: int = 3
    orient_bins: int = 12

    # depth bins
    d_min: float = 0.0
    d_max: float = 80.0
    depth_bins: int = 80
    bin_mode: str = "lid"  # lid | ud | sid
    depth_decode: str = "weighted"  # weighted | argmax

    # losses
    aux_loss: bool = True
    lambda_class: float = 2.0
    lambda_center: float = 10.0
    lambda_lrtb: float = 5.0
    lambda_giou: float = 2.0
    lambda_dim: float = 1.0
    lambda_orient: float = 1.0
    lambda_depth: float = 1.0
    lambda_dmap: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dmap_focal_gamma: float = 2.0
    focal_class_cost: bool = False

    # training
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 60
    lr_decay_epochs: tuple = (40, 52)
    lr_decay_factor: float = 0.1
    train_scenes: int = 200
    scene_seed: int = 1000
    augment_hflip: float = 0.0
    checkpoint_every: int = 0  # 0 keeps only the latest

    # inference / evaluation
    confidence_floor: float = 0.2
    score_sigma_modulation: bool = False
    eval_scenes: int = 50
    eval_scene_seed: int = 900000
    iou_thresholds: tuple = (0.7, 0.5, 0.5)

    # synthetic scenes
    min_objects: int = 1
    max_objects: int = 5
    scene_depth_min: float = 5.0
    scene_depth_max: float = 45.0
    focal_length: float = 210.0

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            image_h=self.image_h,
            image_w=self.image_w,
            num_classes=self.num_classes,
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            depth_min=self.scene_depth_min,
            depth_max=self.scene_depth_max,
            focal=self.focal_length,
        )

    def bin_spec(self) -> DepthBinSpec:
        return DepthBinSpec(d_min=self.d_min, d_max=self.d_max, k=self.depth_bins,
                            mode=self.bin_mode)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            class_w=self.lambda_class,
            center=self.lambda_center,
            lrtb=self.lambda_lrtb,
            giou=self.lambda_giou,
            dim=self.lambda_dim,
            orien=self.lambda_orient,
            depth=self.lambda_depth,
            dmap=self.lambda_dmap,
            focal_class_cost=self.focal_class_cost,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"


_FIELD_DEFAULTS = {f.name: f.default for f in fields(Config)}


def _parse_value(key: str, raw: str):
    if key not in _FIELD_DEFAULTS:
        raise ValueError(f"unknown config key {key!r}")
    default = _FIELD_DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if not raw:
            return ()
        elem = float if any(isinstance(v, float) for v in default) else int
        return tuple(elem(part) for part in raw.split(","))
    return raw


def parse_config_text(text: str, base: Config | None = None) -> Config:
    cfg = base or Config()
    for i, line in enumerate(text.splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {i + 1}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def load_config(path, base: Config | None = None) -> Config:
    with open(path) as f:
        return parse_config_text(f.read(), base)


def apply_overrides(cfg: Config, pairs: list) -> Config:
    """Apply repeatable 'key=value' strings from the command line."""
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, raw = (part.strip() for part in pair.split("=", 1))
        setattr(cfg, key, _parse_value(key, raw))
    return cfg
