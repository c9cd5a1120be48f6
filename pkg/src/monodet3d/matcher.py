"""Bipartite query-label matching and assembly of the training loss.

Matching runs on detached predictions: a cost matrix of weighted 2-D
losses per (label, query) pair, minimized by a shortest-augmenting-path
assignment solver. Ties between equal-cost assignments resolve to the
lexicographically smallest pair list so training is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .depth import ForegroundDepthMap, DepthMapTarget, depth_map_loss
from .heads import (
    GroundTruthObject,
    HeadOutputs,
    LossContext,
    QueryPrediction,
    attribute_losses,
    sigmoid_focal_loss,
)


@dataclass
class MatchAssignment:
    """Injective map from ground-truth index to query index."""

    pairs: list  # [(gt_index, query_index)], sorted by gt_index
    total_cost: float


@dataclass
class LossWeights:
    """Term weights: matching uses the first four, the loss uses them all."""

    class_w: float = 2.0
    center: float = 10.0
    lrtb: float = 5.0
    giou: float = 2.0
    dim: float = 1.0
    orien: float = 1.0
    depth: float = 1.0
    dmap: float = 1.0
    focal_class_cost: bool = False
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


def _class_cost_np(probs: np.ndarray, class_ids: np.ndarray,
                   weights: LossWeights) -> np.ndarray:
    """[N_gt, N] class term of the matching cost."""
    if not weights.focal_class_cost:
        return -probs[:, class_ids].T
    a, g = weights.focal_alpha, weights.focal_gamma
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    pos = a * (1.0 - p) ** g * (-np.log(p))
    neg = (1.0 - a) * p**g * (-np.log(1.0 - p))
    return (pos - neg)[:, class_ids].T


def cost_matrix(outputs: HeadOutputs, gts: list, ctx: LossContext,
                weights: LossWeights) -> np.ndarray:
    """Matching costs [N_gt, N] from detached prediction arrays."""
    n = len(outputs)
    probs = outputs.class_probs.data
    centers = outputs.center3d.data
    sides = outputs.sides.data
    w, h = ctx.image_w, ctx.image_h
    boxes = np.empty((n, 4))
    boxes[:, 0] = np.clip((centers[:, 0] - sides[:, 0]) * w, 0.0, w)
    boxes[:, 1] = np.clip((centers[:, 1] - sides[:, 2]) * h, 0.0, h)
    boxes[:, 2] = np.clip((centers[:, 0] + sides[:, 1]) * w, 0.0, w)
    boxes[:, 3] = np.clip((centers[:, 1] + sides[:, 3]) * h, 0.0, h)

    class_ids = np.asarray([gt.class_id for gt in gts], dtype=np.int64)
    cost = weights.class_w * _class_cost_np(probs, class_ids, weights)
    for g, gt in enumerate(gts):
        gx, gy = gt.center3d_norm
        cost[g] += weights.center * (
            np.abs(centers[:, 0] - gx) + np.abs(centers[:, 1] - gy)
        )
        x1, y1, x2, y2 = gt.box2d
        target = np.array([gx - x1 / w, x2 / w - gx, gy - y1 / h, y2 / h - gy])
        cost[g] += weights.lrtb * np.abs(sides - target).sum(axis=1)
        cost[g] += weights.giou * (1.0 - _giou_np(boxes, gt.box2d))
    return cost


def _giou_np(boxes: np.ndarray, gt_box) -> np.ndarray:
    gx1, gy1, gx2, gy2 = (float(v) for v in gt_box)
    pw = np.maximum(boxes[:, 2] - boxes[:, 0], 0.0)
    ph = np.maximum(boxes[:, 3] - boxes[:, 1], 0.0)
    area_p = pw * ph
    area_g = max(gx2 - gx1, 0.0) * max(gy2 - gy1, 0.0)
    iw = np.maximum(np.minimum(boxes[:, 2], gx2) - np.maximum(boxes[:, 0], gx1), 0.0)
    ih = np.maximum(np.minimum(boxes[:, 3], gy2) - np.maximum(boxes[:, 1], gy1), 0.0)
    inter = iw * ih
    union = np.maximum(area_p + area_g - inter, 1e-9)
    cw = np.maximum(boxes[:, 2], gx2) - np.minimum(boxes[:, 0], gx1)
    ch = np.maximum(boxes[:, 3], gy2) - np.minimum(boxes[:, 1], gy1)
    enclosing = np.maximum(cw * ch, 1e-9)
    return inter / union - (enclosing - union) / enclosing


def matching_cost(pred: QueryPrediction, gt: GroundTruthObject, ctx: LossContext,
                  weights: LossWeights | None = None) -> float:
    """Scalar matching cost of one (prediction, label) pair."""
    weights = weights or LossWeights()
    fake = _SingleOutputs(pred)
    return float(cost_matrix(fake, [gt], ctx, weights)[0, 0])


class _SingleOutputs:
    """Adapter exposing one QueryPrediction with a leading query axis."""

    def __init__(self, pred: QueryPrediction):
        self.class_probs = Tensor(pred.class_probs.data.reshape(1, -1))
        self.center3d = Tensor(pred.center3d.data.reshape(1, 2))
        self.sides = Tensor(pred.sides.data.reshape(1, 4))

    def __len__(self):
        return 1


def hungarian(costs: np.ndarray) -> MatchAssignment:
    """Globally minimal assignment of rows (labels) to columns (queries).

    Requires rows <= columns and finite entries. Among equal-cost optima
    the lexicographically smallest pair list wins; pruning candidates by
    zero reduced cost keeps that refinement cheap.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {costs.shape}")
    rows, cols = costs.shape
    if rows > cols:
        raise ValueError(f"more labels ({rows}) than queries ({cols})")
    if rows and not np.all(np.isfinite(costs)):
        raise ValueError("cost matrix contains non-finite entries")
    if rows == 0:
        return MatchAssignment(pairs=[], total_cost=0.0)

    col_of, u, v = kernels.jv_assign(costs)
    tau = 1e-9 * max(1.0, float(np.abs(costs).max()))
    rem_best = float(costs[np.arange(rows), col_of].sum())
    avail = np.ones(cols, dtype=bool)
    chosen_cols = np.empty(rows, dtype=np.int64)
    for i in range(rows):
        cbar = costs[i] - u[i] - v
        cands = np.nonzero(avail & (cbar <= tau))[0]
        chosen = -1
        for j in cands:
            if i == rows - 1:
                sub_total = 0.0
                ok = costs[i, j] <= rem_best + tau
            else:
                sub_cols = np.nonzero(avail & (np.arange(cols) != j))[0]
                sub = np.ascontiguousarray(costs[i + 1 :][:, sub_cols])
                sub_assign, _, _ = kernels.jv_assign(sub)
                sub_total = float(sub[np.arange(rows - 1 - i), sub_assign].sum())
                ok = costs[i, j] + sub_total <= rem_best + tau
            if ok:
                chosen = int(j)
                rem_best = sub_total
                break
        if chosen < 0:
            # numeric safety net; candidates from optimal duals make this
            # unreachable in practice
            open_cols = np.nonzero(avail)[0]
            chosen = int(open_cols[np.argmin(costs[i, open_cols])])
            rem_best = rem_best - costs[i, chosen]
        avail[chosen] = False
        chosen_cols[i] = chosen
    total = float(costs[np.arange(rows), chosen_cols].sum())
    return MatchAssignment(pairs=[(i, int(chosen_cols[i])) for i in range(rows)],
                           total_cost=total)


def match(outputs: HeadOutputs, gts: list, ctx: LossContext,
          weights: LossWeights | None = None) -> MatchAssignment:
    """Hungarian assignment of labels to queries on detached predictions."""
    weights = weights or LossWeights()
    if not gts:
        return MatchAssignment(pairs=[], total_cost=0.0)
    return hungarian(cost_matrix(outputs, gts, ctx, weights))


def overall_loss(block_outputs: list, gts: list, fg: ForegroundDepthMap,
                 target: DepthMapTarget, ctx: LossContext, weights: LossWeights,
                 dmap_gamma: float = 2.0,
                 fixed_assignments: list | None = None) -> tuple[Tensor, dict]:
    """Training objective over all supervised decoder blocks plus the map loss.

    Per block: matched pairs contribute the matching cost plus dimension,
    orientation and depth terms; unmatched queries contribute the focal
    class loss against all-zero targets; the block sum divides by the
    label count (1 when there are no labels). Returns the scalar loss and
    a dict of unweighted per-term values from the final block.

    fixed_assignments, when given, bypasses matching (one MatchAssignment
    per block); gradient checks use this to hold the assignment constant.
    """
    n_gt = len(gts)
    div = float(max(n_gt, 1))
    l_dmap = depth_map_loss(fg, target, dmap_gamma)
    total = ad.mul(l_dmap, weights.dmap)
    terms = {}
    for b, outputs in enumerate(block_outputs):
        if fixed_assignments is not None:
            assign = fixed_assignments[b]
        else:
            assign = match(outputs, gts, ctx, weights)
        matched_q = [q for _, q in assign.pairs]
        parts = {k: 0.0 for k in ("class", "c3d", "lrtb", "giou", "dim", "orien", "depth")}
        block_loss = None
        for g, q in assign.pairs:
            pred = outputs.query(q)
            al = attribute_losses(pred, gts[g], ctx)
            if weights.focal_class_cost:
                class_term = al["class"]
            else:
                class_term = ad.mul(
                    ad.reshape(ad.gather(pred.class_probs, [gts[g].class_id]), ()), -1.0
                )
            pair = (
                ad.mul(class_term, weights.class_w)
                + ad.mul(al["c3d"], weights.center)
                + ad.mul(al["lrtb"], weights.lrtb)
                + ad.mul(al["giou"], weights.giou)
                + ad.mul(al["dim"], weights.dim)
                + ad.mul(al["orien"], weights.orien)
                + ad.mul(al["depth"], weights.depth)
            )
            block_loss = pair if block_loss is None else block_loss + pair
            parts["class"] += class_term.item()
            for key, name in (("c3d", "c3d"), ("lrtb", "lrtb"), ("giou", "giou"),
                              ("dim", "dim"), ("orien", "orien"), ("depth", "depth")):
                parts[key] += al[name].item()
        unmatched = [q for q in range(len(outputs)) if q not in set(matched_q)]
        if unmatched:
            logits = ad.gather(outputs.class_logits, unmatched, axis=0)
            neg = sigmoid_focal_loss(
                logits, np.zeros(logits.shape), weights.focal_alpha, weights.focal_gamma
            )
            block_loss = ad.mul(neg, weights.class_w) if block_loss is None \
                else block_loss + ad.mul(neg, weights.class_w)
            parts["class"] += neg.item()
        if block_loss is not None:
            total = total + ad.mul(block_loss, 1.0 / div)
        if b == len(block_outputs) - 1:
            terms = {k: val / div for k, val in parts.items()}
    terms["dmap"] = l_dmap.item()
    terms["total"] = total.item()
    return total, terms
