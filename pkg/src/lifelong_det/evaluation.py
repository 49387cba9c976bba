"""Detection metrics: VOC/COCO-style AP, proposal recall and inference timing."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import as_boxes, iou_matrix

METRICS_SCHEMA_VERSION = 1
AP_STYLES = ("voc07-11pt", "area")
COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def match_detections(det_boxes, gt_boxes, iou_threshold: float = 0.5, gt_ignore=None) -> np.ndarray:
    """Greedy one-to-one matching of score-sorted detections to ground truth.

    Each detection takes the unconsumed ground-truth box of highest IoU
    (lowest index on ties) and is a true positive iff that IoU reaches the
    threshold.  Returns an int array: 1 TP, 0 FP, -1 matched an ignored
    (difficult) box and counts as neither.
    """
    det = as_boxes(det_boxes)
    gt = as_boxes(gt_boxes)
    flags = np.zeros(len(det), dtype=np.int64)
    if len(gt) == 0 or len(det) == 0:
        return flags
    ignore = np.zeros(len(gt), bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    ov = iou_matrix(det, gt)
    used = np.zeros(len(gt), dtype=bool)
    for i in range(len(det)):
        cand = np.where(used, -1.0, ov[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            if ignore[j]:
                flags[i] = -1
            else:
                flags[i] = 1
                used[j] = True
    return flags


def pr_curve(flags, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(flags)
    f = f[f >= 0]
    tp = np.cumsum(f == 1)
    fp = np.cumsum(f == 0)
    recall = tp / max(num_gt, 1)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision


def average_precision(flags, num_gt: int, style: str = "area") -> float | None:
    """AP from score-ordered TP/FP flags.  ``None`` when there is no ground truth."""
    if style not in AP_STYLES:
        raise ValueError(f"unknown AP style {style!r}; expected one of {AP_STYLES}")
    if num_gt == 0:
        return None
    rec, prec = pr_curve(flags, num_gt)
    if style == "voc07-11pt":
        ap = 0.0
        for k in range(11):
            # tolerance so a recall of exactly k/10 counts despite float rounding
            hit = rec >= k / 10 - 1e-12
            ap += prec[hit].max() if hit.any() else 0.0
        return float(ap / 11)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


@dataclass
class ImageDetections:
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray


@dataclass
class ImageTruth:
    boxes: np.ndarray
    labels: np.ndarray
    ignore: np.ndarray = None

    def __post_init__(self):
        self.boxes = as_boxes(self.boxes)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.ignore is None:
            self.ignore = np.zeros(len(self.boxes), dtype=bool)


def class_ap(dets: Sequence[ImageDetections], truths: Sequence[ImageTruth], cls: int,
             iou_threshold: float = 0.5, style: str = "area") -> float | None:
    num_gt = int(sum(np.sum((t.labels == cls) & ~t.ignore) for t in truths))
    scores, flags = [], []
    for d, t in zip(dets, truths):
        sel = np.asarray(d.labels) == cls
        if not sel.any():
            continue
        s = np.asarray(d.scores, dtype=np.float64)[sel]
        order = np.argsort(-s, kind="stable")
        g = t.labels == cls
        flags.append(match_detections(as_boxes(d.boxes)[sel][order], t.boxes[g], iou_threshold, t.ignore[g]))
        scores.append(s[order])
    if num_gt == 0:
        return None
    if not scores:
        return 0.0
    s = np.concatenate(scores)
    f = np.concatenate(flags)
    order = np.argsort(-s, kind="stable")
    return average_precision(f[order], num_gt, style)


def per_class_ap(dets, truths, num_classes: int, iou_threshold: float = 0.5, style: str = "area") -> list[float | None]:
    return [class_ap(dets, truths, c, iou_threshold, style) for c in range(num_classes)]


def coco_map(dets, truths, num_classes: int) -> float | None:
    """mAP averaged over IoU thresholds 0.50:0.05:0.95 (area-style AP)."""
    vals = []
    for thr in COCO_THRESHOLDS:
        aps = [a for a in per_class_ap(dets, truths, num_classes, float(thr), "area") if a is not None]
        if aps:
            vals.append(np.mean(aps))
    return float(np.mean(vals)) if vals else None


def mean_ap(aps: Iterable[float | None]) -> float | None:
    vals = [a for a in aps if a is not None]
    return float(np.mean(vals)) if vals else None


# -- proposal recall -----------------------------------------------------------

@dataclass
class RecallCurve:
    iou_thresholds: list[float]
    recall: list[float]
    budget: int
    num_gt: int


def proposal_recall(proposals: Sequence[np.ndarray], gt_boxes: Sequence[np.ndarray],
                    iou_thresholds: Sequence[float], budget: int | None = None) -> RecallCurve | None:
    """Fraction of ground-truth boxes covered by some proposal at each IoU threshold.

    ``proposals[i]`` are ranked; only the first ``budget`` count.  Returns
    ``None`` when there is no ground truth.
    """
    best = []
    for props, gts in zip(proposals, gt_boxes):
        gts = as_boxes(gts)
        if len(gts) == 0:
            continue
        p = as_boxes(props)[:budget] if budget is not None else as_boxes(props)
        best.append(iou_matrix(gts, p).max(1) if len(p) else np.zeros(len(gts)))
    if not best:
        return None
    b = np.concatenate(best)
    thr = [float(t) for t in iou_thresholds]
    return RecallCurve(thr, [float(np.mean(b >= t)) for t in thr], -1 if budget is None else int(budget), len(b))


def grouped_recall(proposals, truths: Sequence[ImageTruth], groups: dict[str, Sequence[int]],
                   iou_thresholds, budget: int) -> dict[str, RecallCurve | None]:
    """Recall curves per class group, each averaged over that group's classes."""
    out = {}
    for name, classes in groups.items():
        per_cls = []
        for c in classes:
            gts = [t.boxes[t.labels == c] for t in truths]
            curve = proposal_recall(proposals, gts, iou_thresholds, budget)
            if curve is not None:
                per_cls.append(curve)
        if not per_cls:
            out[name] = None
            continue
        rec = np.mean([c.recall for c in per_cls], axis=0)
        out[name] = RecallCurve([float(t) for t in iou_thresholds], [float(r) for r in rec], int(budget),
                                sum(c.num_gt for c in per_cls))
    return out


# -- reports -------------------------------------------------------------------

@dataclass
class MetricsReport:
    class_names: list[str]
    per_class: dict[str, float | None]
    old_classes: list[str]
    new_classes: list[str]
    map_old: float | None
    map_new: float | None
    map_all: float | None
    ap_style: str
    iou_threshold: float = 0.5
    score_filter: float | None = 0.5
    map_coco: float | None = None
    recall_curves: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    forgetting: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = METRICS_SCHEMA_VERSION
        return d

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        d.pop("schema_version", None)
        return cls(**d)


def build_report(per_class: Sequence[float | None], class_names: Sequence[str], old: Sequence[str],
                 new: Sequence[str], style: str, **extra) -> MetricsReport:
    ap = dict(zip(class_names, per_class))
    return MetricsReport(
        class_names=list(class_names), per_class=ap, old_classes=list(old), new_classes=list(new),
        map_old=mean_ap(ap[c] for c in old), map_new=mean_ap(ap[c] for c in new),
        map_all=mean_ap(ap.values()), ap_style=style, **extra)


def forgetting(before: MetricsReport, after: MetricsReport) -> dict[str, float]:
    """AP drop per class present (with ground truth) in both reports."""
    out = {}
    for c, a in before.per_class.items():
        b = after.per_class.get(c)
        if a is not None and b is not None:
            out[c] = float(a - b)
    return out


def detections_to_arrays(dets) -> ImageDetections:
    if not dets:
        return ImageDetections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
    return ImageDetections(np.stack([d.box for d in dets]), np.array([d.score for d in dets]),
                           np.array([d.class_id for d in dets]))


def truth_from_sample(sample, class_names: Sequence[str]) -> ImageTruth:
    """Ground truth restricted to ``class_names``; other classes are dropped."""
    index = {c: i for i, c in enumerate(class_names)}
    keep = [i for i, c in enumerate(sample.classes) if c in index]
    return ImageTruth(sample.boxes[keep], [index[sample.classes[i]] for i in keep], sample.difficult[keep])


def evaluate_detector(detector, dataset, class_names: Sequence[str], old: Sequence[str] = (),
                      new: Sequence[str] = (), score_filter: float | None = 0.5, style: str = "area",
                      coco: bool = False, recall_budgets: Sequence[int] = (),
                      iou_grid: Sequence[float] = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))) -> MetricsReport:
    """Run ``detector`` over ``dataset`` and score it on ``class_names``."""
    detector.eval()
    dets, truths, props = [], [], []
    for i in range(len(dataset)):
        s = dataset[i]
        dets.append(detections_to_arrays(detector.predict(s.image, score_filter or 0.0)))
        truths.append(truth_from_sample(s, class_names))
        if recall_budgets:
            props.append(proposals_for(detector, s.image, max(recall_budgets)))
    k = len(class_names)
    aps = per_class_ap(dets, truths, k, 0.5, style)
    extra = {"score_filter": score_filter}
    if coco:
        extra["map_coco"] = coco_map(dets, truths, k)
    if recall_budgets:
        idx = {c: i for i, c in enumerate(class_names)}
        groups = {"old": [idx[c] for c in old], "new": [idx[c] for c in new], "all": list(range(k))}
        extra["recall_curves"] = {
            str(b): {g: (asdict(c) if c else None) for g, c in grouped_recall(props, truths, groups, iou_grid, b).items()}
            for b in recall_budgets}
    return build_report(aps, class_names, old, new, style, **extra)


def proposals_for(detector, image, budget: int) -> np.ndarray:
    import torch
    saved = detector.config.test_top_n, detector.config.train_top_n
    detector.config.test_top_n = budget
    detector.config.train_top_n = max(budget, saved[1])
    try:
        with torch.no_grad():
            _, rpn = detector.forward_rpn(image, training=False)
    finally:
        detector.config.test_top_n, detector.config.train_top_n = saved
    return rpn.proposals


# -- timing --------------------------------------------------------------------

def benchmark_inference(detector, images: Sequence, proposal_budget: int, warmup: int = 2,
                        repeats: int = 1) -> dict:
    """Mean per-image seconds for backbone+RPN and for the R-CNN head.

    The head is timed on exactly the proposals the RPN keeps under
    ``proposal_budget``.
    """
    import torch
    if len(images) == 0:
        raise ValueError("benchmark needs at least one image")
    detector.eval()
    tensors = [detector.to_tensor(im) for im in images]
    saved = detector.config.test_top_n, detector.config.train_top_n
    detector.config.test_top_n = proposal_budget
    detector.config.train_top_n = max(proposal_budget, saved[1])
    rpn_t, head_t, counts = [], [], []
    try:
        with torch.no_grad():
            for x in tensors[:warmup]:
                feat, rpn = detector.forward_rpn(x, training=False)
                detector.postprocess(rpn.proposals, detector.forward_rcnn(feat, rpn.proposals), x.shape[-2:], 0.5)
            for _ in range(repeats):
                for x in tensors:
                    t0 = time.perf_counter()
                    feat, rpn = detector.forward_rpn(x, training=False)
                    t1 = time.perf_counter()
                    out = detector.forward_rcnn(feat, rpn.proposals)
                    detector.postprocess(rpn.proposals, out, x.shape[-2:], 0.5)
                    t2 = time.perf_counter()
                    rpn_t.append(t1 - t0)
                    head_t.append(t2 - t1)
                    counts.append(len(rpn.proposals))
    finally:
        detector.config.test_top_n, detector.config.train_top_n = saved
    total = float(np.mean(rpn_t) + np.mean(head_t))
    return {
        "proposal_budget": int(proposal_budget),
        "mean_proposals": float(np.mean(counts)),
        "backbone_rpn_seconds": float(np.mean(rpn_t)),
        "rcnn_head_seconds": float(np.mean(head_t)),
        "seconds_per_image": total,
        "fps": 1.0 / total,
        "images": len(tensors) * repeats,
    }
