"""Box arithmetic on plain numpy arrays.

Boxes are ``(N, 4)`` float arrays in corner form ``(x1, y1, x2, y2)`` with
continuous coordinates (no +1 pixel convention).  Deltas are ``(N, 4)``
arrays ``(dx, dy, dw, dh)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# exp() clamp for dw/dh so a wild regression output cannot overflow
BBOX_XFORM_CLIP = float(np.log(1000.0 / 16))


class GeometryError(ValueError):
    pass


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    return arr.reshape(-1, 4)


def box_area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` boxes -> ``(N, M)``.

    Pairs whose union is zero (both degenerate) get IoU 0.
    """
    a = as_boxes(a)
    b = as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum.outer(a[:, 2], b[:, 2]) - np.maximum.outer(a[:, 0], b[:, 0])
    ih = np.minimum.outer(a[:, 3], b[:, 3]) - np.maximum.outer(a[:, 1], b[:, 1])
    np.clip(iw, 0, None, out=iw)
    np.clip(ih, 0, None, out=ih)
    inter = iw * ih
    union = np.add.outer(box_area(a), box_area(b)) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    return float(iou_matrix(a, b)[0, 0])


def encode(targets, anchors, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Regression deltas that move ``anchors`` onto ``targets`` (row-aligned)."""
    t = as_boxes(targets)
    a = as_boxes(anchors)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("degenerate anchor")
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    tw = np.clip(t[:, 2] - t[:, 0], 1e-6, None)
    th = np.clip(t[:, 3] - t[:, 1], 1e-6, None)
    tcx = t[:, 0] + 0.5 * (t[:, 2] - t[:, 0])
    tcy = t[:, 1] + 0.5 * (t[:, 3] - t[:, 1])
    wx, wy, ww, wh = weights
    return np.stack(
        [wx * (tcx - acx) / aw, wy * (tcy - acy) / ah, ww * np.log(tw / aw), wh * np.log(th / ah)],
        axis=1,
    )


def decode(deltas, anchors, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    a = as_boxes(anchors)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("degenerate anchor")
    wx, wy, ww, wh = weights
    cx = a[:, 0] + 0.5 * aw + d[:, 0] / wx * aw
    cy = a[:, 1] + 0.5 * ah + d[:, 1] / wy * ah
    w = aw * np.exp(np.minimum(d[:, 2] / ww, BBOX_XFORM_CLIP))
    h = ah * np.exp(np.minimum(d[:, 3] / wh, BBOX_XFORM_CLIP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    return b


def nms(boxes, scores, iou_threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns indices into ``boxes`` of the kept boxes, ordered by descending
    score.  Equal scores are broken by the lower original index.
    """
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0 < iou_threshold < 1:
        raise GeometryError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if len(b) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(s)), -s))
    limit = len(b) if max_keep is None else max_keep
    keep = []
    if len(b) <= 4000:
        ov = iou_matrix(b[order], b[order]) > iou_threshold
        alive = np.ones(len(b), dtype=bool)
        for pos in range(len(b)):
            if not alive[pos]:
                continue
            keep.append(order[pos])
            if len(keep) >= limit:
                break
            alive &= ~ov[pos]
        return np.asarray(keep, dtype=np.int64)
    areas = box_area(b)
    suppressed = np.zeros(len(b), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        if len(keep) >= limit:
            break
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest) == 0:
            continue
        lt = np.maximum(b[i, :2], b[rest, :2])
        rb = np.minimum(b[i, 2:], b[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        ov = np.zeros_like(inter)
        np.divide(inter, union, out=ov, where=union > 0)
        suppressed[rest[ov > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def batched_nms(boxes, scores, labels, iou_threshold: float) -> np.ndarray:
    """Per-label NMS; result sorted by descending score across labels."""
    labels = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    kept = [np.flatnonzero(labels == c)[nms(as_boxes(boxes)[labels == c], s[labels == c], iou_threshold)]
            for c in np.unique(labels)]
    if not kept:
        return np.zeros(0, dtype=np.int64)
    idx = np.concatenate(kept)
    return idx[np.lexsort((idx, -s[idx]))]


@dataclass(frozen=True)
class AnchorGrid:
    stride: int
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    feat_height: int
    feat_width: int
    boxes: np.ndarray

    @property
    def num_per_position(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return len(self.boxes)


def base_anchors(stride: int, scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """Anchor shapes centred on the origin; ``scales`` are multiples of ``stride``.

    A ratio is height / width; area is ``(scale * stride) ** 2``.
    """
    out = []
    for r in ratios:
        for s in scales:
            size = s * stride
            w = size / np.sqrt(r)
            h = size * np.sqrt(r)
            out.append([-w / 2, -h / 2, w / 2, h / 2])
    return np.asarray(out, dtype=np.float64)


def feature_shape(image_size: tuple[int, int], stride: int) -> tuple[int, int]:
    h, w = image_size
    return h // stride, w // stride


def generate_anchors(image_size: tuple[int, int], stride: int,
                     scales: Sequence[float] = (4.0, 8.0, 16.0),
                     ratios: Sequence[float] = (0.5, 1.0, 2.0)) -> AnchorGrid:
    """Tile anchors over the feature grid, position-major then shape.

    Anchor ``k`` at feature cell ``(i, j)`` is centred at
    ``((j + 0.5) * stride, (i + 0.5) * stride)`` and lives at flat index
    ``(i * W + j) * A + k``.
    """
    fh, fw = feature_shape(image_size, stride)
    if fh < 1 or fw < 1:
        raise GeometryError("no feature positions")
    shapes = base_anchors(stride, scales, ratios)
    ys = (np.arange(fh) + 0.5) * stride
    xs = (np.arange(fw) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centres = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
    boxes = (centres + shapes[None]).reshape(-1, 4)
    return AnchorGrid(stride, tuple(scales), tuple(ratios), fh, fw, boxes)
