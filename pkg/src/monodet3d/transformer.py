"""Visual/depth encoders and the depth-aware decoder.

Object queries first attend over encoded depth embeddings (depth
cross-attention), then over each other, then over encoded visual
embeddings, then pass an FFN; every sublayer is followed by residual
addition and layer norm (post-norm). The depth keys and values carry
learnable per-meter positional encodings interpolated at each pixel's
decoded depth; all other attention uses fixed 2-D sine/cosine encodings
on queries and keys only.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNorm, Linear

_pos2d_cache: dict = {}


def sine_cosine_pos_2d(h: int, w: int, c: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D positional encodings, [h*w, c], half the channels per axis."""
    if c % 4:
        raise ValueError(f"channel count must be divisible by 4, got {c}")
    key = (h, w, c)
    if key in _pos2d_cache:
        return _pos2d_cache[key]
    half = c // 2
    dim_t = temperature ** (2.0 * (np.arange(half) // 2) / half)

    def axis_encoding(positions):
        ang = positions[:, None] / dim_t[None, :]
        enc = np.empty((positions.size, half))
        enc[:, 0::2] = np.sin(ang[:, 0::2])
        enc[:, 1::2] = np.cos(ang[:, 1::2])
        return enc

    ys = (np.arange(h) + 0.5) / h * 2.0 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2.0 * np.pi
    ey = axis_encoding(ys)
    ex = axis_encoding(xs)
    out = np.concatenate(
        [np.repeat(ey, w, axis=0), np.tile(ex, (h, 1))], axis=1
    )
    _pos2d_cache[key] = out
    return out


def sine_cosine_pos_1d(values: np.ndarray, c: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed sine/cosine encoding of arbitrary scalar values, [len(values), c]."""
    if c % 2:
        raise ValueError(f"channel count must be even, got {c}")
    dim_t = temperature ** (2.0 * (np.arange(c) // 2) / c)
    ang = np.asarray(values, dtype=np.float64)[:, None] / dim_t[None, :]
    out = np.empty_like(ang)
    out[:, 0::2] = np.sin(ang[:, 0::2])
    out[:, 1::2] = np.cos(ang[:, 1::2])
    return out


def tokens_from_map(x: Tensor) -> Tensor:
    """[C,h,w] feature map to [h*w, C] token rows (row-major pixels)."""
    c = x.shape[0]
    return ad.transpose(ad.reshape(x, (c, x.shape[1] * x.shape[2])), (1, 0))


class MultiHeadAttention:
    """Dense multi-head attention over full token sets."""

    def __init__(self, rng: np.random.Generator, c: int, heads: int):
        if c % heads:
            raise ValueError(f"head count {heads} must divide channels {c}")
        self.c = c
        self.heads = heads
        self.head_dim = c // heads
        self.wq = Linear(rng, c, c)
        self.wk = Linear(rng, c, c)
        self.wv = Linear(rng, c, c)
        self.wo = Linear(rng, c, c)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (output [Nq,C], attention [heads,Nq,Nk])."""
        nq, nk = q_in.shape[0], k_in.shape[0]

        def split(t: Tensor, n: int) -> Tensor:
            return ad.transpose(ad.reshape(t, (n, self.heads, self.head_dim)), (1, 0, 2))

        q = split(self.wq(q_in), nq)
        k = split(self.wk(k_in), nk)
        v = split(self.wv(v_in), nk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.head_dim))
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(attn, v)
        merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (nq, self.c))
        return self.wo(merged), attn

    def params(self, prefix: str) -> dict:
        out = {}
        out.update(self.wq.params(f"{prefix}.wq"))
        out.update(self.wk.params(f"{prefix}.wk"))
        out.update(self.wv.params(f"{prefix}.wv"))
        out.update(self.wo.params(f"{prefix}.wo"))
        return out


class FeedForward:
    def __init__(self, rng: np.random.Generator, c: int, hidden: int):
        self.lin1 = Linear(rng, c, hidden)
        self.lin2 = Linear(rng, hidden, c)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.relu(self.lin1(x)))

    def params(self, prefix: str) -> dict:
        return {**self.lin1.params(f"{prefix}.1"), **self.lin2.params(f"{prefix}.2")}


class EncoderBlock:
    """Self-attention plus FFN, post-norm residuals, pos added to q and k."""

    def __init__(self, rng: np.random.Generator, c: int, heads: int, ffn_width: int):
        self.attn = MultiHeadAttention(rng, c, heads)
        self.ffn = FeedForward(rng, c, ffn_width)
        self.norm1 = LayerNorm(c)
        self.norm2 = LayerNorm(c)

    def __call__(self, x: Tensor, pos: Tensor) -> Tensor:
        qk = ad.add(x, pos)
        attn_out, _ = self.attn(qk, qk, x)
        x = self.norm1(ad.add(x, attn_out))
        x = self.norm2(ad.add(x, self.ffn(x)))
        return x

    def params(self, prefix: str) -> dict:
        out = {}
        out.update(self.attn.params(f"{prefix}.attn"))
        out.update(self.ffn.params(f"{prefix}.ffn"))
        out.update(self.norm1.params(f"{prefix}.norm1"))
        out.update(self.norm2.params(f"{prefix}.norm2"))
        return out


class Encoder:
    """Stack of encoder blocks over flattened feature-map tokens."""

    def __init__(self, rng: np.random.Generator, c: int, heads: int, ffn_width: int,
                 blocks: int):
        self.blocks = [EncoderBlock(rng, c, heads, ffn_width) for _ in range(blocks)]

    def __call__(self, fmap: Tensor) -> Tensor:
        c, h, w = fmap.shape
        x = tokens_from_map(fmap)
        pos = Tensor(sine_cosine_pos_2d(h, w, c))
        for block in self.blocks:
            x = block(x, pos)
        return x

    def params(self, prefix: str) -> dict:
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"{prefix}.b{i}"))
        return out


class DepthPositionalTable:
    """Learnable embedding per integer meter in [d_min, d_max]."""

    def __init__(self, rng: np.random.Generator, d_min: float, d_max: float, c: int):
        self.d_min = d_min
        self.rows = int(round(d_max - d_min)) + 1
        self.table = Tensor(rng.normal(0.0, 0.02, size=(self.rows, c)), requires_grad=True)

    def params(self, prefix: str = "depth_pos") -> dict:
        return {f"{prefix}.table": self.table}


def depth_pos_encoding(dmap: Tensor, table: DepthPositionalTable,
                       stop_gradient: bool = False) -> Tensor:
    """Interpolate the per-meter table at each pixel's decoded depth.

    dmap is the [h,w] decoded depth grid. Depths land between integer
    rows; linear interpolation blends the two neighbors. Out-of-table
    depths clamp to the end rows.
    """
    if stop_gradient:
        dmap = dmap.detach()
    s = dmap.shape[0] * dmap.shape[1]
    r = ad.clamp(ad.add(ad.reshape(dmap, (s,)), -table.d_min), 0.0, table.rows - 1.0)
    lo = np.minimum(np.floor(r.data).astype(np.int64), max(table.rows - 2, 0))
    frac = ad.reshape(ad.add(r, Tensor(-lo.astype(np.float64))), (s, 1))
    row_lo = ad.gather(table.table, lo, axis=0)
    row_hi = ad.gather(table.table, np.minimum(lo + 1, table.rows - 1), axis=0)
    return ad.add(ad.mul(row_lo, ad.add(ad.mul(frac, -1.0), 1.0)), ad.mul(row_hi, frac))


class DecoderBlock:
    """Depth cross-attention, self-attention, visual cross-attention, FFN.

    The depth cross-attention slot is configurable: position 1 runs it
    before self-attention, 2 between self and visual attention, 3 after
    visual attention. Each sublayer ends with residual + layer norm.
    """

    def __init__(self, rng: np.random.Generator, c: int, heads: int, ffn_width: int,
                 depth_ca_position: int = 1, use_depth_ca: bool = True):
        if depth_ca_position not in (1, 2, 3):
            raise ValueError(f"depth cross-attention position must be 1..3, got {depth_ca_position}")
        self.use_depth_ca = use_depth_ca
        self.position = depth_ca_position
        self.depth_attn = MultiHeadAttention(rng, c, heads) if use_depth_ca else None
        self.self_attn = MultiHeadAttention(rng, c, heads)
        self.visual_attn = MultiHeadAttention(rng, c, heads)
        self.ffn = FeedForward(rng, c, ffn_width)
        self.norm_depth = LayerNorm(c) if use_depth_ca else None
        self.norm_self = LayerNorm(c)
        self.norm_visual = LayerNorm(c)
        self.norm_ffn = LayerNorm(c)

    def __call__(self, q: Tensor, visual_kv: Tensor, visual_pos: Tensor,
                 depth_kv: Tensor | None) -> tuple[Tensor, Tensor | None]:
        attn_map = None

        def run_depth(x):
            nonlocal attn_map
            out, attn_map = self.depth_attn(x, depth_kv, depth_kv)
            return self.norm_depth(ad.add(x, out))

        def run_self(x):
            out, _ = self.self_attn(x, x, x)
            return self.norm_self(ad.add(x, out))

        def run_visual(x):
            out, _ = self.visual_attn(x, ad.add(visual_kv, visual_pos), visual_kv)
            return self.norm_visual(ad.add(x, out))

        order = [run_self, run_visual]
        if self.use_depth_ca:
            order.insert(self.position - 1, run_depth)
        for fn in order:
            q = fn(q)
        q = self.norm_ffn(ad.add(q, self.ffn(q)))
        return q, attn_map

    def params(self, prefix: str) -> dict:
        out = {}
        if self.use_depth_ca:
            out.update(self.depth_attn.params(f"{prefix}.depth_attn"))
            out.update(self.norm_depth.params(f"{prefix}.norm_depth"))
        out.update(self.self_attn.params(f"{prefix}.self_attn"))
        out.update(self.visual_attn.params(f"{prefix}.visual_attn"))
        out.update(self.ffn.params(f"{prefix}.ffn"))
        out.update(self.norm_self.params(f"{prefix}.norm_self"))
        out.update(self.norm_visual.params(f"{prefix}.norm_visual"))
        out.update(self.norm_ffn.params(f"{prefix}.norm_ffn"))
        return out


class DepthAwareDecoder:
    def __init__(self, rng: np.random.Generator, c: int, heads: int, ffn_width: int,
                 blocks: int, depth_ca_position: int = 1, use_depth_ca: bool = True):
        self.blocks = [
            DecoderBlock(rng, c, heads, ffn_width, depth_ca_position, use_depth_ca)
            for _ in range(blocks)
        ]

    def __call__(self, queries: Tensor, visual_tokens: Tensor, visual_pos: Tensor,
                 depth_kv: Tensor | None) -> tuple[list[Tensor], list[Tensor | None]]:
        """Returns per-block decoded queries and per-block depth attention maps."""
        outputs, attn_maps = [], []
        q = queries
        for block in self.blocks:
            q, attn = block(q, visual_tokens, visual_pos, depth_kv)
            outputs.append(q)
            attn_maps.append(attn)
        return outputs, attn_maps

    def params(self, prefix: str = "decoder") -> dict:
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"{prefix}.b{i}"))
        return out


class QuerySet:
    """N learnable object query embeddings."""

    def __init__(self, rng: np.random.Generator, n: int, c: int):
        self.n = n
        self.embed = Tensor(rng.normal(0.0, 0.02, size=(n, c)), requires_grad=True)

    def params(self, prefix: str = "queries") -> dict:
        return {f"{prefix}.embed": self.embed}
