"""Task heads on decoded queries and the per-pair attribute losses.

Every query yields sigmoid class probabilities (no background class), a
normalized 3-D projected center, normalized distances to the four 2-D box
sides, a depth estimate with a log-scale uncertainty, exponential-space
dimensions, and a multi-bin heading. Losses: focal classification, L1
center, L1 sides, GIoU on the recovered 2-D box, size-normalized L1
dimensions, bin cross-entropy plus residual L1 for heading, and a
Laplacian uncertainty loss on the ensembled depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, MLP

# sigmoid(-4.595...) ~= 0.01: start all class probabilities near zero so the
# background-heavy focal loss is stable from the first step
CLASS_BIAS_PRIOR = float(-np.log(99.0))

SIGMA_LOG_MIN = float(np.log(1e-3))
SIGMA_LOG_MAX = float(np.log(1e3))


@dataclass
class GroundTruthObject:
    """One labeled object: KITTI-style camera-frame geometry."""

    class_id: int
    box2d: tuple  # (x1, y1, x2, y2) pixels
    depth: float  # camera-frame z of the box center, meters
    dims: tuple  # (h, w, l) meters
    heading: float  # yaw, radians in [-pi, pi)
    location: tuple  # (X, Y, Z) bottom-center, camera meters
    center3d_norm: tuple | None = None  # projected 3-D center / (W, H)


@dataclass
class QueryPrediction:
    """One query's decoded outputs as scalar/vector tensors."""

    class_logits: Tensor  # [num_classes]
    class_probs: Tensor  # [num_classes]
    center3d: Tensor  # [2], normalized
    sides: Tensor  # [4], (l, r, t, b) normalized
    d_reg: Tensor  # scalar, meters
    depth_log_sigma: Tensor  # scalar, clamped log sigma
    dims: Tensor  # [3], (h, w, l) meters
    orient_bin_logits: Tensor  # [B]
    orient_residuals: Tensor  # [B], radians


def _col(t: Tensor, idx) -> Tensor:
    return ad.gather(t, idx, axis=1)


def _row(t: Tensor, i: int) -> Tensor:
    out = ad.gather(t, [i], axis=0)
    return ad.reshape(out, out.shape[1:])


def _elem(vec: Tensor, i: int) -> Tensor:
    return ad.reshape(ad.gather(vec, [i], axis=0), ())


@dataclass
class HeadOutputs:
    """Per-query prediction tensors, each with a leading query axis."""

    class_logits: Tensor
    class_probs: Tensor
    center3d: Tensor
    sides: Tensor
    d_reg: Tensor
    depth_log_sigma: Tensor
    dims: Tensor
    orient_bin_logits: Tensor
    orient_residuals: Tensor

    def __len__(self) -> int:
        return self.class_logits.shape[0]

    def query(self, i: int) -> QueryPrediction:
        return QueryPrediction(
            class_logits=_row(self.class_logits, i),
            class_probs=_row(self.class_probs, i),
            center3d=_row(self.center3d, i),
            sides=_row(self.sides, i),
            d_reg=_elem(self.d_reg, i),
            depth_log_sigma=_elem(self.depth_log_sigma, i),
            dims=_row(self.dims, i),
            orient_bin_logits=_row(self.orient_bin_logits, i),
            orient_residuals=_row(self.orient_residuals, i),
        )

    def predictions(self) -> list[QueryPrediction]:
        return [self.query(i) for i in range(len(self))]


class Heads:
    """Shared task heads applied to every decoded query row."""

    def __init__(self, rng: np.random.Generator, c: int, hidden: int, num_classes: int,
                 orient_bins: int, d_min: float, d_max: float):
        self.num_classes = num_classes
        self.orient_bins = orient_bins
        self.d_min = d_min
        self.d_max = d_max
        self.class_head = Linear(rng, c, num_classes, bias_init=CLASS_BIAS_PRIOR)
        self.box_head = MLP(rng, [c, hidden, hidden, 6])
        self.depth_head = MLP(rng, [c, hidden, 2])
        self.dim_head = MLP(rng, [c, hidden, 3])
        self.orient_head = MLP(rng, [c, hidden, 2 * orient_bins])

    def forward(self, q_d: Tensor) -> HeadOutputs:
        class_logits = self.class_head(q_d)
        box = ad.sigmoid(self.box_head(q_d))
        depth_raw = self.depth_head(q_d)
        d_reg = ad.add(
            ad.mul(ad.sigmoid(_col(depth_raw, [0])), self.d_max - self.d_min), self.d_min
        )
        log_sigma = ad.clamp(_col(depth_raw, [1]), SIGMA_LOG_MIN, SIGMA_LOG_MAX)
        orient = self.orient_head(q_d)
        b = self.orient_bins
        n = q_d.shape[0]
        return HeadOutputs(
            class_logits=class_logits,
            class_probs=ad.sigmoid(class_logits),
            center3d=_col(box, [0, 1]),
            sides=_col(box, [2, 3, 4, 5]),
            d_reg=ad.reshape(d_reg, (n,)),
            depth_log_sigma=ad.reshape(log_sigma, (n,)),
            dims=ad.exp(self.dim_head(q_d)),
            orient_bin_logits=_col(orient, list(range(b))),
            orient_residuals=_col(orient, list(range(b, 2 * b))),
        )

    def params(self, prefix: str = "heads") -> dict:
        out = {}
        out.update(self.class_head.params(f"{prefix}.class"))
        out.update(self.box_head.params(f"{prefix}.box"))
        out.update(self.depth_head.params(f"{prefix}.depth"))
        out.update(self.dim_head.params(f"{prefix}.dim"))
        out.update(self.orient_head.params(f"{prefix}.orient"))
        return out


def heads_forward(heads: Heads, q_d: Tensor) -> list[QueryPrediction]:
    """All N per-query predictions for one decoded query tensor."""
    return heads.forward(q_d).predictions()


# -- 2-D box recovery ------------------------------------------------------


def recover_box2d(center3d: Tensor, sides: Tensor, image_w: float, image_h: float,
                  clip: bool = True):
    """Pixel box (x1, y1, x2, y2) as scalar tensors from center + distances."""
    x, y = _elem(center3d, 0), _elem(center3d, 1)
    l, r = _elem(sides, 0), _elem(sides, 1)
    t, b = _elem(sides, 2), _elem(sides, 3)
    x1 = ad.mul(x - l, image_w)
    x2 = ad.mul(x + r, image_w)
    y1 = ad.mul(y - t, image_h)
    y2 = ad.mul(y + b, image_h)
    if clip:
        x1 = ad.clamp(x1, 0.0, image_w)
        x2 = ad.clamp(x2, 0.0, image_w)
        y1 = ad.clamp(y1, 0.0, image_h)
        y2 = ad.clamp(y2, 0.0, image_h)
    return x1, y1, x2, y2


def giou_xyxy(pred_box, gt_box: tuple) -> Tensor:
    """Generalized IoU between a predicted box (scalar tensors) and a fixed box."""
    px1, py1, px2, py2 = pred_box
    gx1, gy1, gx2, gy2 = (float(v) for v in gt_box)
    pw = ad.relu(px2 - px1)
    ph = ad.relu(py2 - py1)
    area_p = ad.mul(pw, ph)
    area_g = max(gx2 - gx1, 0.0) * max(gy2 - gy1, 0.0)
    iw = ad.relu(ad.minimum(px2, gx2) - ad.maximum(px1, gx1))
    ih = ad.relu(ad.minimum(py2, gy2) - ad.maximum(py1, gy1))
    inter = ad.mul(iw, ih)
    union = ad.maximum(area_p + area_g - inter, 1e-9)
    cw = ad.maximum(px2, gx2) - ad.minimum(px1, gx1)
    ch = ad.maximum(py2, gy2) - ad.minimum(py1, gy1)
    enclosing = ad.maximum(ad.mul(cw, ch), 1e-9)
    return ad.div(inter, union) - ad.div(enclosing - union, enclosing)


# -- depth ensembling -------------------------------------------------------


def geometric_depth(h3d: Tensor, h2d_pixels: Tensor, f_y: float, d_min: float,
                    d_max: float) -> Tensor:
    """Pinhole height-ratio depth f_y * h3d / h2d, clamped to the bin range.

    Boxes shorter than one pixel count as degenerate and end up at d_max
    through the clamp.
    """
    safe_h2d = ad.maximum(h2d_pixels, 1.0)
    return ad.clamp(ad.div(ad.mul(h3d, f_y), safe_h2d), d_min, d_max)


def sample_depth_map(dmap: Tensor, cx: Tensor, cy: Tensor) -> Tensor:
    """Bilinear sample of a [h,w] map at continuous grid coords (cx, cy).

    Values sit at integer grid points; coordinates clamp to the grid.
    """
    h, w = dmap.shape
    cx = ad.clamp(cx, 0.0, float(w - 1))
    cy = ad.clamp(cy, 0.0, float(h - 1))
    x0 = min(int(np.floor(cx.data)), max(w - 2, 0))
    y0 = min(int(np.floor(cy.data)), max(h - 2, 0))
    fx = cx - float(x0)
    fy = cy - float(y0)
    flat = ad.reshape(dmap, (h * w,))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    v00 = _elem(flat, y0 * w + x0)
    v01 = _elem(flat, y0 * w + x1)
    v10 = _elem(flat, y1 * w + x0)
    v11 = _elem(flat, y1 * w + x1)
    top = v00 + ad.mul(v01 - v00, fx)
    bot = v10 + ad.mul(v11 - v10, fx)
    return top + ad.mul(bot - top, fy)


def ensemble_depth(d_reg: Tensor, d_geo: Tensor, d_map: Tensor) -> Tensor:
    """Plain average of the three depth sources."""
    return ad.mul(d_reg + d_geo + d_map, 1.0 / 3.0)


# -- heading bins -----------------------------------------------------------


def wrap_angle(theta: float) -> float:
    return float((theta + np.pi) % (2.0 * np.pi) - np.pi)


def heading_bin_centers(bins: int) -> np.ndarray:
    width = 2.0 * np.pi / bins
    return -np.pi + (np.arange(bins) + 0.5) * width


def heading_to_bin(theta: float, bins: int) -> tuple[int, float]:
    """Disjoint-bin index plus in-bin residual for a heading angle."""
    theta = wrap_angle(theta)
    width = 2.0 * np.pi / bins
    idx = min(int((theta + np.pi) / width), bins - 1)
    residual = wrap_angle(theta - heading_bin_centers(bins)[idx])
    return idx, residual


def reconstruct_heading(bin_idx: int, residual: float, bins: int) -> float:
    return wrap_angle(heading_bin_centers(bins)[bin_idx] + residual)


# -- losses -----------------------------------------------------------------


def sigmoid_focal_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.25,
                       gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss over a class-logit tensor of any shape."""
    p = ad.sigmoid(logits)
    log_p = ad.log_sigmoid(logits)
    log_np = ad.log_sigmoid(ad.mul(logits, -1.0))
    t = Tensor(np.asarray(target, dtype=np.float64))
    pos = ad.mul(ad.mul(t, _pow_const(1.0 - p, gamma)), ad.mul(log_p, -alpha))
    neg = ad.mul(ad.mul(1.0 - t, _pow_const(p, gamma)), ad.mul(log_np, -(1.0 - alpha)))
    return ad.tsum(pos + neg)


def _pow_const(x: Tensor, p: float) -> Tensor:
    if p == 1.0:
        return x
    if p == 2.0:
        return ad.mul(x, x)
    return ad.exp(ad.mul(ad.log(ad.maximum(x, 1e-300)), p))


@dataclass
class LossContext:
    """Per-image constants the attribute losses need."""

    image_w: float
    image_h: float
    f_y: float
    depth_map: Tensor  # decoded per-pixel depth at 1/16, [h,w]
    d_min: float
    d_max: float
    num_classes: int
    orient_bins: int = 12
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    cell: int = 16


def predicted_depth(pred: QueryPrediction, ctx: LossContext) -> Tensor:
    """Ensembled depth for a query: regressed, geometric and map-sampled."""
    h2d = ad.mul(_elem(pred.sides, 2) + _elem(pred.sides, 3), ctx.image_h)
    d_geo = geometric_depth(_elem(pred.dims, 0), h2d, ctx.f_y, ctx.d_min, ctx.d_max)
    cx = ad.mul(_elem(pred.center3d, 0), ctx.image_w / ctx.cell)
    cy = ad.mul(_elem(pred.center3d, 1), ctx.image_h / ctx.cell)
    d_map = sample_depth_map(ctx.depth_map, cx, cy)
    return ensemble_depth(pred.d_reg, d_geo, d_map)


def attribute_losses(pred: QueryPrediction, gt: GroundTruthObject,
                     ctx: LossContext) -> dict:
    """All seven per-pair losses for a matched (prediction, label) pair."""
    if min(gt.dims) <= 0.0:
        raise ValueError(f"ground-truth dims must be positive, got {gt.dims}")
    onehot = np.zeros(ctx.num_classes)
    onehot[gt.class_id] = 1.0
    l_class = sigmoid_focal_loss(pred.class_logits, onehot, ctx.focal_alpha, ctx.focal_gamma)

    gx, gy = gt.center3d_norm
    l_c3d = ad.tsum(ad.absolute(pred.center3d - Tensor([gx, gy])))

    x1, y1, x2, y2 = gt.box2d
    target_sides = np.array(
        [
            gx - x1 / ctx.image_w,
            x2 / ctx.image_w - gx,
            gy - y1 / ctx.image_h,
            y2 / ctx.image_h - gy,
        ]
    )
    l_lrtb = ad.tsum(ad.absolute(pred.sides - Tensor(target_sides)))

    pred_box = recover_box2d(pred.center3d, pred.sides, ctx.image_w, ctx.image_h)
    l_giou = 1.0 - giou_xyxy(pred_box, gt.box2d)

    gt_dims = np.asarray(gt.dims, dtype=np.float64)
    l_dim = ad.tsum(ad.div(ad.absolute(pred.dims - Tensor(gt_dims)), Tensor(gt_dims)))

    bin_idx, residual = heading_to_bin(gt.heading, ctx.orient_bins)
    log_probs = ad.log_softmax(pred.orient_bin_logits, axis=0)
    l_bins = ad.mul(_elem(log_probs, bin_idx), -1.0)
    l_res = ad.absolute(_elem(pred.orient_residuals, bin_idx) - residual)
    l_orien = l_bins + l_res

    d_pred = predicted_depth(pred, ctx)
    sigma = ad.exp(pred.depth_log_sigma)
    l_depth = ad.div(ad.mul(ad.absolute(d_pred - gt.depth), np.sqrt(2.0)), sigma) \
        + pred.depth_log_sigma

    return {
        "class": l_class,
        "c3d": l_c3d,
        "lrtb": l_lrtb,
        "giou": l_giou,
        "dim": l_dim,
        "orien": l_orien,
        "depth": l_depth,
    }
