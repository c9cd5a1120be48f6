"""Oriented-box overlap and average precision at 40 recall positions.

Boxes are yaw-rotated only. Bird's-eye-view overlap intersects the two
rotated rectangles in the XZ plane by convex polygon clipping; the 3-D
overlap multiplies that by the vertical extent intersection. AP follows
the 40-point interpolated protocol: precision sampled at recalls 1/40 ..
40/40, each taken as the maximum precision at recall >= r.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RECALL_POSITIONS = np.arange(1, 41) / 40.0


@dataclass
class Box3D:
    """Yaw-rotated box; center is the bottom center (vertical span [Y-h, Y])."""

    center: tuple  # (X, Y, Z) meters
    dims: tuple  # (h, w, l) meters
    heading: float  # yaw radians

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise ValueError(f"box dims must be positive, got {self.dims}")


def bev_corners(box: Box3D) -> np.ndarray:
    """The rectangle footprint in the XZ plane, counter-clockwise, [4,2]."""
    h, w, l = box.dims
    dx = np.array([l / 2, -l / 2, -l / 2, l / 2])
    dz = np.array([w / 2, w / 2, -w / 2, -w / 2])
    c, s = np.cos(box.heading), np.sin(box.heading)
    x = c * dx + s * dz + box.center[0]
    z = -s * dx + c * dz + box.center[2]
    return np.stack([x, z], axis=1)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _signed_area2(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_clip(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against a convex polygon."""
    if _signed_area2(clip) < 0:
        clip = clip[::-1]
    output = [tuple(p) for p in subject]
    for a_idx in range(len(clip)):
        if not output:
            break
        ax, ay = clip[a_idx]
        bx, by = clip[(a_idx + 1) % len(clip)]
        ex, ey = bx - ax, by - ay
        current = output
        output = []
        for i in range(len(current)):
            px, py = current[i - 1]
            qx, qy = current[i]
            p_in = ex * (py - ay) - ey * (px - ax) >= -1e-12
            q_in = ex * (qy - ay) - ey * (qx - ax) >= -1e-12
            if q_in:
                if not p_in:
                    output.append(_segment_cross(px, py, qx, qy, ax, ay, ex, ey))
                output.append((qx, qy))
            elif p_in:
                output.append(_segment_cross(px, py, qx, qy, ax, ay, ex, ey))
    return np.asarray(output).reshape(-1, 2)


def _segment_cross(px, py, qx, qy, ax, ay, ex, ey):
    dp = ex * (py - ay) - ey * (px - ax)
    dq = ex * (qy - ay) - ey * (qx - ax)
    t = dp / (dp - dq)
    return (px + t * (qx - px), py + t * (qy - py))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Overlap of the two ground-plane footprints, in [0, 1]."""
    ca, cb = bev_corners(a), bev_corners(b)
    inter = polygon_area(polygon_clip(ca, cb))
    area_a = a.dims[1] * a.dims[2]
    area_b = b.dims[1] * b.dims[2]
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(np.clip(inter / union, 0.0, 1.0))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volume overlap: BEV intersection times vertical extent intersection."""
    inter_bev = polygon_area(polygon_clip(bev_corners(a), bev_corners(b)))
    ya1, yb1 = a.center[1], b.center[1]
    ya0, yb0 = ya1 - a.dims[0], yb1 - b.dims[0]
    overlap = max(0.0, min(ya1, yb1) - max(ya0, yb0))
    inter = inter_bev * overlap
    vol_a = a.dims[0] * a.dims[1] * a.dims[2]
    vol_b = b.dims[0] * b.dims[1] * b.dims[2]
    union = vol_a + vol_b - inter
    if union <= 0:
        return 0.0
    return float(np.clip(inter / union, 0.0, 1.0))


@dataclass
class APResult:
    ap: float  # percentage
    num_gt: int
    warning: str | None = None


def average_precision_r40(detections: list, gts_by_image: dict, iou_fn,
                          threshold: float) -> APResult:
    """Interpolated AP over 40 recall positions.

    detections: [(image_id, score, Box3D)]; gts_by_image: image_id ->
    [Box3D]. Greedy matching in descending score order; each detection
    takes the highest-IoU still-unmatched label with IoU >= threshold.
    """
    num_gt = sum(len(v) for v in gts_by_image.values())
    if num_gt == 0:
        return APResult(ap=0.0, num_gt=0, warning="no ground truth; AP defined as 0")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    matched = {img: np.zeros(len(v), dtype=bool) for img, v in gts_by_image.items()}
    tp = np.zeros(len(order))
    for rank, det_idx in enumerate(order):
        image_id, _, box = detections[det_idx]
        gts = gts_by_image.get(image_id, [])
        best_iou, best_g = 0.0, -1
        for g, gt_box in enumerate(gts):
            if matched[image_id][g]:
                continue
            iou = iou_fn(box, gt_box)
            if iou >= threshold and iou > best_iou:
                best_iou, best_g = iou, g
        if best_g >= 0:
            matched[image_id][best_g] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(order) + 1)
    precision = cum_tp / ranks if len(order) else np.zeros(0)
    recall = cum_tp / num_gt if len(order) else np.zeros(0)
    ap = 0.0
    for r in RECALL_POSITIONS:
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return APResult(ap=ap / len(RECALL_POSITIONS) * 100.0, num_gt=num_gt)


def evaluate_detections(detections: list, gts_by_image: dict,
                        class_thresholds: list) -> list:
    """Per-class AP_3D and AP_BEV rows.

    detections: [(image_id, class_id, score, Box3D)]; gts_by_image:
    image_id -> [(class_id, Box3D)], negative class ids are ignored.
    Returns [(class_id, threshold, ap3d: APResult, apbev: APResult)].
    """
    rows = []
    for class_id, threshold in enumerate(class_thresholds):
        dets_c = [
            (img, score, box)
            for img, cid, score, box in detections
            if cid == class_id
        ]
        gts_c = {
            img: [box for cid, box in objs if cid == class_id]
            for img, objs in gts_by_image.items()
        }
        ap3d = average_precision_r40(dets_c, gts_c, iou3d, threshold)
        apbev = average_precision_r40(dets_c, gts_c, bev_iou, threshold)
        rows.append((class_id, threshold, ap3d, apbev))
    return rows


def format_report(rows: list, class_name_fn) -> str:
    lines = []
    for class_id, threshold, ap3d, apbev in rows:
        name = class_name_fn(class_id)
        lines.append(f"{name} AP_3D|R40 thr={threshold:.2f} AP={ap3d.ap:.2f}")
        lines.append(f"{name} AP_BEV|R40 thr={threshold:.2f} AP={apbev.ap:.2f}")
        if ap3d.warning:
            lines.append(f"{name} warning: {ap3d.warning}")
    return "\n".join(lines) + "\n"
