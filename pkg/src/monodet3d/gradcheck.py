"""Finite-difference verification of the full training gradient.

Central differences on sampled parameter entries versus the recorded
backward pass, per parameter group, on a tiny configuration. The
query-label assignment is computed once and held fixed so that both
sides differentiate the same (locally smooth) objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import Config
from .data import generate_scene
from .matcher import match
from .training import build_model, loss_context, scene_loss

GROUP_PREFIXES = {
    "backbone": ("backbone.",),
    "depth_predictor": ("depth_predictor.",),
    "depth_pos_table": ("depth_pos.",),
    "encoders": ("visual_encoder.", "depth_encoder.", "depth_proj."),
    "decoder": ("decoder.",),
    "heads": ("heads.",),
    "queries": ("queries.",),
}


def tiny_config(**overrides) -> Config:
    cfg = Config(
        image_h=32,
        image_w=64,
        channels=16,
        ffn_width=32,
        heads=4,
        num_queries=12,
        min_objects=2,
        max_objects=2,
        scene_depth_min=4.0,
        scene_depth_max=14.0,
        focal_length=60.0,
        train_scenes=1,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@dataclass
class GradCheckResult:
    group_errors: dict  # group name -> max relative error
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.group_errors.values())


def gradcheck(cfg: Config | None = None, tolerance: float = 1e-3, h: float = 1e-4,
              samples_per_group: int = 6, seed: int = 0) -> GradCheckResult:
    t0 = time.perf_counter()
    cfg = cfg or tiny_config()
    model = build_model(cfg)
    scene = generate_scene(cfg.scene_seed, cfg.scene_spec())

    # fix the assignment at the base point; matching is piecewise constant
    outputs = model.forward(scene.image)
    ctx = loss_context(scene, outputs, cfg)
    blocks = outputs.block_heads if cfg.aux_loss else [outputs.final]
    weights = cfg.loss_weights()
    assignments = [match(b, scene.objects, ctx, weights) for b in blocks]

    def loss_value() -> float:
        total, _, _ = scene_loss(model, scene, cfg, fixed_assignments=assignments)
        return total.item()

    params = model.params()
    for p in params.values():
        p.grad = None
    total, _, _ = scene_loss(model, scene, cfg, fixed_assignments=assignments)
    total.backward()

    rng = np.random.default_rng(seed)
    group_errors = {}
    for group, prefixes in GROUP_PREFIXES.items():
        names = [n for n in params if n.startswith(prefixes)]
        if not names:
            continue
        entries = []
        for name in names:
            g = params[name].grad
            if g is None:
                continue
            flat = np.abs(g.reshape(-1))
            entries.extend((name, i, flat[i]) for i in range(flat.size))
        alive = [e for e in entries if e[2] > 0.0]
        if not alive:
            # a group no gradient reaches is a wiring failure
            group_errors[group] = float("inf")
            continue
        floor = float(np.median([e[2] for e in alive]))
        eligible = [e for e in alive if e[2] >= floor] or alive
        picks = rng.choice(len(eligible), size=min(samples_per_group, len(eligible)),
                           replace=False)
        worst = 0.0
        for pick in picks:
            name, idx, _ = eligible[int(pick)]
            p = params[name]
            flat = p.data.reshape(-1)
            saved = flat[idx]
            flat[idx] = saved + h
            up = loss_value()
            flat[idx] = saved - h
            down = loss_value()
            flat[idx] = saved
            fd = (up - down) / (2.0 * h)
            an = float(p.grad.reshape(-1)[idx])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
        group_errors[group] = worst
    return GradCheckResult(group_errors=group_errors, tolerance=tolerance,
                           seconds=time.perf_counter() - t0)
