"""Depth predictor, foreground depth map supervision and depth-bin algebra.

The foreground depth map is a per-pixel categorical distribution over k
foreground depth bins plus one background bin at 1/16 resolution. Bins
follow one of three discretizations: linear-increasing (lid, the default),
uniform (ud) or spacing-increasing (sid).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import MultiScaleFeatures
from .layers import Conv2d

# floor guard: keeps bin starts classifying into their own bin despite
# float rounding in the closed-form index
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class DepthBinSpec:
    """Discretization of [d_min, d_max] into k bins plus background index k."""

    d_min: float = 0.0
    d_max: float = 80.0
    k: int = 80
    mode: str = "lid"

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise ValueError(f"need d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.k < 1:
            raise ValueError(f"need at least one bin, got k={self.k}")
        if self.mode not in ("lid", "ud", "sid"):
            raise ValueError(f"unknown bin mode {self.mode!r}")

    @property
    def delta(self) -> float:
        """First interval length; also the arithmetic step between widths."""
        return 2.0 * (self.d_max - self.d_min) / (self.k * (self.k + 1))

    def _sid_shift(self) -> float:
        # avoid log(0) when the range starts at zero
        return 1.0 if self.d_min == 0.0 else 0.0

    def bin_index(self, d: float) -> int:
        """Bin holding depth d, in 0..k-1."""
        if d < self.d_min or d > self.d_max:
            raise ValueError(f"depth {d} outside [{self.d_min}, {self.d_max}]")
        return int(self.bin_index_array(np.asarray([d]))[0])

    def bin_index_array(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        if self.mode == "lid":
            raw = -0.5 + 0.5 * np.sqrt(1.0 + 8.0 * (d - self.d_min) / self.delta)
        elif self.mode == "ud":
            raw = (d - self.d_min) / ((self.d_max - self.d_min) / self.k)
        else:
            s = self._sid_shift()
            lo, hi = self.d_min + s, self.d_max + s
            raw = self.k * np.log((d + s) / lo) / np.log(hi / lo)
        idx = np.floor(raw + _FLOOR_EPS).astype(np.int64)
        return np.clip(idx, 0, self.k - 1)

    def bin_start(self, i: int) -> float:
        """Interval-starting depth of bin i; the background bin k maps to d_max."""
        if i < 0 or i > self.k:
            raise ValueError(f"bin index {i} outside 0..{self.k}")
        if i == self.k:
            return self.d_max
        if self.mode == "lid":
            return self.d_min + self.delta * i * (i + 1) / 2.0
        if self.mode == "ud":
            return self.d_min + i * (self.d_max - self.d_min) / self.k
        s = self._sid_shift()
        lo, hi = self.d_min + s, self.d_max + s
        return lo * (hi / lo) ** (i / self.k) - s

    def bin_starts(self) -> np.ndarray:
        """All k+1 representative depths (bin starts, background = d_max)."""
        return np.asarray([self.bin_start(i) for i in range(self.k + 1)])


@dataclass
class ForegroundDepthMap:
    """Per-pixel depth-bin distribution: logits and softmax probs, [k+1,h,w]."""

    logits: Tensor
    probs: Tensor


@dataclass
class DepthMapTarget:
    """Per-pixel target bin index; background pixels hold class k."""

    classes: np.ndarray

    def to_pgm_bytes(self, k: int) -> bytes:
        from .data import encode_pgm

        scaled = np.round(self.classes.astype(np.float64) * 255.0 / k).astype(np.uint8)
        return encode_pgm(scaled)


class DepthPredictor:
    """Fuse the three feature scales at 1/16 and emit depth features + map.

    The 1/8 map is downsampled and the 1/32 map upsampled (nearest
    neighbor), each smoothed by a 1x1 projection, summed with the 1/16 map,
    then refined by two 3x3 convolutions. A final 1x1 head produces the
    k+1 bin logits.
    """

    def __init__(self, rng: np.random.Generator, channels: int, k: int):
        self.proj8 = Conv2d(rng, channels, channels, 1)
        self.proj32 = Conv2d(rng, channels, channels, 1)
        self.refine1 = Conv2d(rng, channels, channels, 3, padding=1)
        self.refine2 = Conv2d(rng, channels, channels, 3, padding=1)
        self.head = Conv2d(rng, channels, k + 1, 1)

    def forward(self, ms: MultiScaleFeatures) -> tuple[Tensor, ForegroundDepthMap]:
        lo = self.proj8(ad.downsample_nearest(ms.f8, 2))
        hi = self.proj32(ad.interpolate_nearest(ms.f32, 2))
        if lo.shape != ms.f16.shape or hi.shape != ms.f16.shape:
            raise ValueError(
                f"scale mismatch: {lo.shape} / {ms.f16.shape} / {hi.shape}"
            )
        fused = ad.add(ad.add(lo, ms.f16), hi)
        f_d = ad.relu(self.refine1(fused))
        f_d = ad.relu(self.refine2(f_d))
        logits = self.head(f_d)
        probs = ad.softmax(logits, axis=0)
        return f_d, ForegroundDepthMap(logits=logits, probs=probs)

    def params(self, prefix: str = "depth_predictor") -> dict:
        out = {}
        out.update(self.proj8.params(f"{prefix}.proj8"))
        out.update(self.proj32.params(f"{prefix}.proj32"))
        out.update(self.refine1.params(f"{prefix}.refine1"))
        out.update(self.refine2.params(f"{prefix}.refine2"))
        out.update(self.head.params(f"{prefix}.head"))
        return out


def build_depth_target(objects, spec: DepthBinSpec, grid_h: int, grid_w: int,
                       cell: int = 16) -> DepthMapTarget:
    """Rasterize ground-truth boxes into per-pixel bin targets.

    A grid pixel belongs to a box when its center lies inside the box
    scaled by 1/cell; where boxes overlap the object nearest to the camera
    wins. Everything else is background (class k).
    """
    classes = np.full((grid_h, grid_w), spec.k, dtype=np.int64)
    nearest = np.full((grid_h, grid_w), np.inf)
    for obj in objects:
        x1, y1, x2, y2 = (v / cell for v in obj.box2d)
        c0 = max(int(np.ceil(x1 - 0.5)), 0)
        c1 = min(int(np.floor(x2 - 0.5)), grid_w - 1)
        r0 = max(int(np.ceil(y1 - 0.5)), 0)
        r1 = min(int(np.floor(y2 - 0.5)), grid_h - 1)
        if c0 > c1 or r0 > r1:
            continue
        bin_idx = spec.bin_index(obj.depth)
        region = nearest[r0 : r1 + 1, c0 : c1 + 1]
        winner = obj.depth < region
        region[winner] = obj.depth
        classes[r0 : r1 + 1, c0 : c1 + 1][winner] = bin_idx
    return DepthMapTarget(classes=classes)


def depth_map_loss(fg: ForegroundDepthMap, target: DepthMapTarget,
                   gamma: float = 2.0) -> Tensor:
    """Mean per-pixel focal loss -(1-p_t)^gamma * log(p_t) on the bin classes."""
    kp1, h, w = fg.logits.shape
    if target.classes.shape != (h, w):
        raise ValueError(f"target grid {target.classes.shape} != map grid {(h, w)}")
    onehot = np.zeros((h * w, kp1))
    onehot[np.arange(h * w), target.classes.reshape(-1)] = 1.0
    onehot_t = Tensor(onehot)
    flat = ad.transpose(ad.reshape(fg.probs, (kp1, h * w)), (1, 0))
    logflat = ad.log_softmax(
        ad.transpose(ad.reshape(fg.logits, (kp1, h * w)), (1, 0)), axis=1
    )
    p_t = ad.tsum(ad.mul(flat, onehot_t), axis=1)
    log_p_t = ad.tsum(ad.mul(logflat, onehot_t), axis=1)
    focus = ad.mul(1.0 - p_t, 1.0 - p_t) if gamma == 2.0 else _pow_gamma(1.0 - p_t, gamma)
    return ad.mean(ad.mul(focus, ad.mul(log_p_t, -1.0)))


def _pow_gamma(x: Tensor, gamma: float) -> Tensor:
    # x in [0,1); exp(gamma * log(max(x, tiny))) keeps the log finite
    return ad.exp(ad.mul(ad.log(ad.maximum(x, 1e-300)), gamma))


def expected_depth(probs, spec: DepthBinSpec, mode: str = "weighted") -> float:
    """Decode one k+1 probability vector to meters.

    'weighted' takes the probability-weighted sum of the representative
    depths; 'argmax' returns the representative depth of the most likely
    bin.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if p.shape != (spec.k + 1,):
        raise ValueError(f"expected {spec.k + 1} probabilities, got shape {p.shape}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    starts = spec.bin_starts()
    if mode == "argmax":
        return float(starts[int(np.argmax(p))])
    return float(p @ starts)


def expected_depth_map(fg: ForegroundDepthMap, spec: DepthBinSpec,
                       mode: str = "weighted") -> Tensor:
    """Per-pixel decoded depth [h,w]; differentiable in 'weighted' mode."""
    kp1, h, w = fg.probs.shape
    starts = spec.bin_starts()
    if mode == "argmax":
        idx = np.argmax(fg.probs.data, axis=0)
        return Tensor(starts[idx])
    flat = ad.transpose(ad.reshape(fg.probs, (kp1, h * w)), (1, 0))
    d = ad.matmul(flat, Tensor(starts.reshape(kp1, 1)))
    return ad.reshape(d, (h, w))
