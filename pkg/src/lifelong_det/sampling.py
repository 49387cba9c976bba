"""Anchor and RoI selection for supervised and distillation losses.

All samplers are pure given an explicit ``numpy.random.Generator``.  The
pseudo-positive-aware switches only ever remove candidates from a pool
before the random draw, so with every switch off (or no pseudo-positive
boxes) the draws are identical to the standard sampler.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import as_boxes, iou_matrix

log = logging.getLogger(__name__)

ABLATIONS = {
    "no-rpn-filter": {"rpn_filter": False},
    "no-rpn-topscore": {"rpn_topscore": False},
    "no-rcnn-filter": {"rcnn_filter": False},
    "no-rcnn-topscore": {"rcnn_topscore": False},
    "no-ppas": {"rpn_filter": False, "rpn_topscore": False,
                "rcnn_filter": False, "rcnn_topscore": False},
    "filter-fp": {"filter_fp": True},
}


@dataclass
class SamplerConfig:
    rpn_batch: int = 256
    rpn_positive_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_batch: int = 128
    roi_positive_fraction: float = 0.25
    roi_pos_iou: float = 0.5
    roi_neg_iou_lo: float = 0.1
    roi_neg_iou_hi: float = 0.5
    rpn_filter: bool = True
    rpn_topscore: bool = True
    rcnn_filter: bool = True
    rcnn_topscore: bool = True
    filter_fp: bool = False
    fp_iou: float = 0.5
    distill_anchor_pool: int = 512
    distill_anchors: int = 256
    distill_roi_pool: int = 256
    distill_rois: int = 128
    pseudo_positive_threshold: float = 0.5

    def __post_init__(self):
        for name in ("rpn_batch", "roi_batch", "distill_anchors", "distill_rois",
                     "distill_anchor_pool", "distill_roi_pool"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.rpn_neg_iou <= self.rpn_pos_iou:
            raise ValueError("rpn_neg_iou must not exceed rpn_pos_iou")
        if not self.roi_neg_iou_lo <= self.roi_neg_iou_hi <= self.roi_pos_iou:
            raise ValueError("RoI IoU thresholds must be ordered lo <= hi <= pos")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_ablation(self, name: str) -> "SamplerConfig":
        if name not in ABLATIONS:
            raise KeyError(f"unknown sampler ablation {name!r}; valid: {sorted(ABLATIONS)}")
        return SamplerConfig(**{**asdict(self), **ABLATIONS[name]})


@dataclass
class PseudoPositiveSet:
    boxes: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    @classmethod
    def empty(cls) -> "PseudoPositiveSet":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0))


@dataclass
class SampleSet:
    positives: np.ndarray
    negatives: np.ndarray
    matched_gt: np.ndarray            # gt index per positive
    excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.positives, self.negatives])

    @property
    def labels(self) -> np.ndarray:
        """1 for positives, 0 for negatives, aligned with :attr:`indices`."""
        return np.concatenate([np.ones(len(self.positives), np.int64),
                               np.zeros(len(self.negatives), np.int64)])


def pseudo_positive_boxes(boxes, probs, threshold: float = 0.5) -> PseudoPositiveSet:
    """Teacher output boxes whose best foreground probability exceeds ``threshold``.

    ``probs`` is ``(R, 1 + K)`` with background in column 0; ``boxes`` holds
    the teacher's box for each row (refined with its top class's deltas).
    """
    boxes = as_boxes(boxes)
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) == 0 or probs.shape[1] < 2:
        return PseudoPositiveSet.empty()
    fg = probs[:, 1:]
    best = fg.max(1)
    keep = best > threshold
    return PseudoPositiveSet(boxes[keep], fg[keep].argmax(1), best[keep])


def _max_iou(boxes, others):
    if len(others) == 0:
        return np.zeros(len(boxes)), np.zeros(len(boxes), dtype=np.int64)
    ov = iou_matrix(boxes, others)
    return ov.max(1), ov.argmax(1)


def label_anchors(anchors, gt_boxes, pos_iou: float, neg_iou: float):
    """Standard anchor labelling: 1 positive, 0 negative, -1 ignored.

    Also marks as positive the best anchor(s) for every ground-truth box.
    Returns ``(labels, matched_gt_index)``.
    """
    anchors = as_boxes(anchors)
    gt = as_boxes(gt_boxes)
    labels = np.full(len(anchors), -1, dtype=np.int64)
    if len(gt) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchors), dtype=np.int64)
    ov = iou_matrix(anchors, gt)
    best, arg = ov.max(1), ov.argmax(1)
    labels[best < neg_iou] = 0
    best_per_gt = ov.max(0)
    for j in range(len(gt)):
        if best_per_gt[j] > 0:
            hits = np.flatnonzero(ov[:, j] == best_per_gt[j])
            labels[hits] = 1
            arg[hits] = j
    labels[best >= pos_iou] = 1
    return labels, arg


def _draw(pos, neg, batch, pos_fraction, rng):
    n_pos = min(len(pos), int(batch * pos_fraction))
    pos = rng.permutation(pos)[:n_pos]
    n_neg = min(len(neg), batch - n_pos)
    neg = rng.permutation(neg)[:n_neg]
    return pos, neg


def sample_rpn_supervised(anchors, gt_boxes, pp: PseudoPositiveSet | None,
                          cfg: SamplerConfig, rng: np.random.Generator) -> SampleSet:
    """Up to ``rpn_batch`` anchors with at most half positive.

    With ``cfg.rpn_filter`` on, anchors overlapping a pseudo-positive box by
    ``rpn_pos_iou`` or more are never drawn as negatives.
    """
    anchors = as_boxes(anchors)
    labels, arg = label_anchors(anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    excluded = np.zeros(0, dtype=np.int64)
    if cfg.rpn_filter and pp is not None and len(pp):
        pp_iou, _ = _max_iou(anchors, pp.boxes)
        barred = (labels == 0) & (pp_iou >= cfg.rpn_pos_iou)
        excluded = np.flatnonzero(barred)
        labels[barred] = -1
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(neg) == 0:
        log.debug("rpn sampler: negative pool empty after filtering")
    pos, neg = _draw(pos, neg, cfg.rpn_batch, cfg.rpn_positive_fraction, rng)
    return SampleSet(pos, neg, arg[pos], excluded)


def sample_roi_supervised(proposals, gt_boxes, pp: PseudoPositiveSet | None,
                          cfg: SamplerConfig, rng: np.random.Generator) -> SampleSet:
    """Up to ``roi_batch`` RoIs with at most a quarter positive.

    Positives overlap some ground truth by ``roi_pos_iou``; negatives have
    best overlap in ``[roi_neg_iou_lo, roi_neg_iou_hi)``.  With
    ``cfg.rcnn_filter`` on, RoIs overlapping a pseudo-positive box by
    ``roi_pos_iou`` or more are barred from the negatives.
    """
    rois = as_boxes(proposals)
    gt = as_boxes(gt_boxes)
    best, arg = _max_iou(rois, gt)
    pos_mask = best >= cfg.roi_pos_iou
    neg_mask = (best >= cfg.roi_neg_iou_lo) & (best < cfg.roi_neg_iou_hi)
    excluded = np.zeros(0, dtype=np.int64)
    if cfg.rcnn_filter and pp is not None and len(pp):
        pp_iou, _ = _max_iou(rois, pp.boxes)
        barred = neg_mask & (pp_iou >= cfg.roi_pos_iou)
        excluded = np.flatnonzero(barred)
        neg_mask &= ~barred
    pos = np.flatnonzero(pos_mask)
    neg = np.flatnonzero(neg_mask)
    if len(neg) == 0:
        log.debug("roi sampler: negative pool empty after filtering")
    pos, neg = _draw(pos, neg, cfg.roi_batch, cfg.roi_positive_fraction, rng)
    return SampleSet(pos, neg, arg[pos], excluded)


def sample_distill_anchors(teacher_objectness, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Anchor indices for RPN distillation.

    With ``rpn_topscore``: a uniform draw of ``distill_anchors`` from the
    ``distill_anchor_pool`` anchors of highest teacher objectness; otherwise
    a uniform draw over all anchors.
    """
    obj = np.asarray(teacher_objectness, dtype=np.float64).reshape(-1)
    if cfg.rpn_topscore:
        pool = top_pool(-obj, cfg.distill_anchor_pool)
    else:
        pool = np.arange(len(obj))
    return np.sort(rng.choice(pool, size=min(cfg.distill_anchors, len(pool)), replace=False))


def sample_distill_rois(proposals, background_probs, cfg: SamplerConfig, rng: np.random.Generator,
                        gt_boxes=None) -> np.ndarray:
    """Indices into the teacher's proposals for R-CNN distillation.

    With ``rcnn_topscore``: a uniform draw of ``distill_rois`` from the
    ``distill_roi_pool`` proposals with the lowest teacher background
    probability; otherwise a uniform draw over all proposals.  With
    ``filter_fp``, proposals overlapping a current-task ground-truth box by
    more than ``fp_iou`` are dropped before pooling.
    """
    bg = np.asarray(background_probs, dtype=np.float64).reshape(-1)
    candidates = np.arange(len(bg))
    if cfg.filter_fp and gt_boxes is not None and len(as_boxes(gt_boxes)):
        ov, _ = _max_iou(as_boxes(proposals), as_boxes(gt_boxes))
        candidates = candidates[ov <= cfg.fp_iou]
    if cfg.rcnn_topscore:
        pool = candidates[top_pool(bg[candidates], cfg.distill_roi_pool)]
    else:
        pool = candidates
    return np.sort(rng.choice(pool, size=min(cfg.distill_rois, len(pool)), replace=False))


def top_pool(keys, size: int) -> np.ndarray:
    """Indices of the ``size`` smallest ``keys``; ties go to the lower index."""
    keys = np.asarray(keys, dtype=np.float64)
    order = np.lexsort((np.arange(len(keys)), keys))
    return order[:size]
