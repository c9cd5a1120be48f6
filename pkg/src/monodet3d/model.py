"""Full detector: backbone, depth predictor, transformer and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, MultiScaleFeatures
from .config import Config
from .depth import DepthPredictor, ForegroundDepthMap, expected_depth_map
from .heads import HeadOutputs, Heads
from .layers import Conv2d
from .transformer import (
    DepthAwareDecoder,
    DepthPositionalTable,
    Encoder,
    QuerySet,
    depth_pos_encoding,
    sine_cosine_pos_1d,
    sine_cosine_pos_2d,
    tokens_from_map,
)


@dataclass
class ModelOutputs:
    """Everything one forward pass produces."""

    features: MultiScaleFeatures
    depth_features: Tensor  # [C, H/16, W/16]
    fg: ForegroundDepthMap
    depth_map: Tensor  # decoded per-pixel depth [H/16, W/16]
    visual_tokens: Tensor  # [H*W/32^2, C]
    depth_tokens: Tensor | None  # [H*W/16^2, C]
    block_queries: list  # decoded queries per decoder block, [N, C] each
    depth_attn: list  # per block: [heads, N, H*W/16^2] or None
    block_heads: list  # HeadOutputs per decoder block
    grid_hw: tuple  # (H/16, W/16)

    @property
    def final(self) -> HeadOutputs:
        return self.block_heads[-1]


class Model:
    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.bin_spec = cfg.bin_spec()
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.backbone = Backbone(rng, c)
        self.depth_predictor = DepthPredictor(rng, c, cfg.depth_bins)
        self.visual_encoder = Encoder(rng, c, cfg.heads, cfg.ffn_width,
                                      cfg.visual_encoder_blocks)
        self.depth_encoder = None
        self.depth_proj = None
        self.pos_table = None
        if cfg.use_depth_ca:
            if cfg.depth_embed_source == "encoder":
                self.depth_encoder = Encoder(rng, c, cfg.heads, cfg.ffn_width,
                                             cfg.depth_encoder_blocks)
            elif cfg.depth_embed_source == "conv1x1":
                self.depth_proj = Conv2d(rng, c, c, 1)
            elif cfg.depth_embed_source not in ("none", "dmap_sine", "dmap_pd"):
                raise ValueError(f"unknown depth_embed_source {cfg.depth_embed_source!r}")
            if cfg.depth_pos_mode == "learned" or cfg.depth_embed_source == "dmap_pd":
                self.pos_table = DepthPositionalTable(rng, cfg.d_min, cfg.d_max, c)
            elif cfg.depth_pos_mode != "sine":
                raise ValueError(f"unknown depth_pos_mode {cfg.depth_pos_mode!r}")
        self.queries = QuerySet(rng, cfg.num_queries, c)
        self.decoder = DepthAwareDecoder(rng, c, cfg.heads, cfg.ffn_width,
                                         cfg.decoder_blocks, cfg.depth_ca_position,
                                         cfg.use_depth_ca)
        self.heads = Heads(rng, c, cfg.ffn_width, cfg.num_classes, cfg.orient_bins,
                           cfg.d_min, cfg.d_max)

    def forward(self, image: Tensor) -> ModelOutputs:
        cfg = self.cfg
        ms = self.backbone.forward(image)
        f_d, fg = self.depth_predictor.forward(ms)
        grid_hw = (f_d.shape[1], f_d.shape[2])
        depth_map = expected_depth_map(fg, self.bin_spec, cfg.depth_decode)
        visual_tokens = self.visual_encoder(ms.f32)
        depth_kv = None
        depth_tokens = None
        if cfg.use_depth_ca:
            depth_tokens = self._depth_tokens(f_d, depth_map)
            pos = self._depth_pos(depth_map)
            depth_kv = ad.add(depth_tokens, pos)
        h32, w32 = ms.f32.shape[1], ms.f32.shape[2]
        visual_pos = Tensor(sine_cosine_pos_2d(h32, w32, cfg.channels))
        block_queries, depth_attn = self.decoder(
            self.queries.embed, visual_tokens, visual_pos, depth_kv
        )
        block_heads = [self.heads.forward(q) for q in block_queries]
        return ModelOutputs(
            features=ms,
            depth_features=f_d,
            fg=fg,
            depth_map=depth_map,
            visual_tokens=visual_tokens,
            depth_tokens=depth_tokens,
            block_queries=block_queries,
            depth_attn=depth_attn,
            block_heads=block_heads,
            grid_hw=grid_hw,
        )

    def _depth_tokens(self, f_d: Tensor, depth_map: Tensor) -> Tensor:
        source = self.cfg.depth_embed_source
        if source == "encoder":
            return self.depth_encoder(f_d)
        if source == "none":
            return tokens_from_map(f_d)
        if source == "conv1x1":
            return tokens_from_map(self.depth_proj(f_d))
        if source == "dmap_sine":
            flat = depth_map.data.reshape(-1)
            return Tensor(sine_cosine_pos_1d(flat, self.cfg.channels))
        # dmap_pd: the per-meter table interpolated at the decoded depths
        return depth_pos_encoding(depth_map, self.pos_table,
                                  self.cfg.pos_depth_stop_gradient)

    def _depth_pos(self, depth_map: Tensor) -> Tensor:
        if self.cfg.depth_pos_mode == "sine":
            return Tensor(sine_cosine_pos_1d(depth_map.data.reshape(-1), self.cfg.channels))
        return depth_pos_encoding(depth_map, self.pos_table,
                                  self.cfg.pos_depth_stop_gradient)

    def params(self) -> dict:
        out = {}
        out.update(self.backbone.params("backbone"))
        out.update(self.depth_predictor.params("depth_predictor"))
        out.update(self.visual_encoder.params("visual_encoder"))
        if self.depth_encoder is not None:
            out.update(self.depth_encoder.params("depth_encoder"))
        if self.depth_proj is not None:
            out.update(self.depth_proj.params("depth_proj"))
        if self.pos_table is not None:
            out.update(self.pos_table.params("depth_pos"))
        out.update(self.queries.params("queries"))
        out.update(self.decoder.params("decoder"))
        out.update(self.heads.params("heads"))
        return out

    def load_params(self, arrays: dict, prefix: str = "param.") -> None:
        params = self.params()
        for name, tensor in params.items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            tensor.data = arrays[key].reshape(tensor.data.shape).copy()
            tensor.grad = None
