"""Teacher/student training for class-incremental detection.

One optimizer step processes one image:

1. teacher forward (or cache hit): RPN outputs, top proposals and region
   classifier outputs on them;
2. student RPN forward, supervised + distillation RPN losses on anchors
   chosen by the pseudo-positive-aware samplers;
3. supervised RoIs drawn from the student proposals, distillation RoIs from
   the teacher proposals, both run through the student region classifier;
4. weighted total, backward, clipped SGD update.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import geometry
from .data import DatasetError, Sample, TaskView, hflip
from .detector import PARAM_GROUPS, Detector, DetectorConfig, extend_classes, load_checkpoint, save_checkpoint, weights_digest
from .losses import (LossBreakdown, rcnn_distill_loss, rcnn_supervised_loss, rpn_distill_loss,
                     rpn_supervised_loss, total_loss)
from .sampling import (PseudoPositiveSet, SamplerConfig, pseudo_positive_boxes, sample_distill_anchors,
                       sample_distill_rois, sample_roi_supervised, sample_rpn_supervised)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "lr", "total", "l_rpn", "l_rcnn", "l_rpn_dist", "l_rcnn_dist",
                "rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg",
                "rpn_dist_cls", "rpn_dist_reg", "rcnn_dist_cls", "rcnn_dist_reg")


@dataclass
class TrainSchedule:
    iterations: int = 70000
    lr: float = 1e-3
    lr_step: int | None = 50000
    lr_after_step: float = 1e-4
    warmup: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    hflip: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.lr_after_step <= 0:
            raise ValueError("learning rates must be positive")
        if self.iterations <= 0:
            raise ValueError("iteration budget must be positive")

    def lr_at(self, step: int) -> float:
        lr = self.lr if self.lr_step is None or step < self.lr_step else self.lr_after_step
        if self.warmup and step < self.warmup:
            lr *= (step + 1) / self.warmup
        return lr


@dataclass
class DistillConfig:
    """Loss weights and switches for one incremental task."""
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    rpn_reg_weight: float = 1.0
    rcnn_reg_weight: float = 1.0
    soft_rpn_labels: bool = True
    distill_all_old_deltas: bool = False
    freeze: tuple[str, ...] = ()

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        bad = set(self.freeze) - set(PARAM_GROUPS)
        if bad:
            raise ValueError(f"unknown parameter group(s) {sorted(bad)}; valid: {PARAM_GROUPS}")

    @property
    def uses_teacher(self) -> bool:
        return self.lambda2 != 0 or self.lambda3 != 0


@dataclass
class TaskSpec:
    universe: list[str]
    old_classes: list[str]
    tasks: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for group in [self.old_classes, *self.tasks]:
            for c in group:
                if c not in self.universe:
                    raise ValueError(f"class {c!r} not in class universe")
                if c in seen:
                    raise ValueError(f"class re-added: {c!r}")
                seen.add(c)
        if not self.old_classes:
            raise ValueError("old class set must be nonempty")

    def seen_after(self, stage: int) -> list[str]:
        """Classes known after ``stage`` incremental tasks (0 = base)."""
        out = list(self.old_classes)
        for t in self.tasks[:stage]:
            out += t
        return out


# -- teacher -------------------------------------------------------------------

@dataclass
class TeacherOutputs:
    rpn_probs: np.ndarray       # (A, 2)
    rpn_deltas: np.ndarray      # (A, 4)
    proposals: np.ndarray       # (P, 4)
    rcnn_logits: np.ndarray     # (P, 1 + K)
    rcnn_deltas: np.ndarray     # (P, K, 4)

    @property
    def rcnn_probs(self) -> np.ndarray:
        z = self.rcnn_logits - self.rcnn_logits.max(1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(1, keepdims=True)


class TeacherSnapshot:
    """Frozen detector plus an optional per-image output cache.

    Cache entries are keyed by a hash of the exact image bytes, so flipped
    and unflipped views are distinct entries.  An on-disk cache lives in a
    directory named after the teacher's weight digest, so a different
    teacher never reads stale entries.
    """

    def __init__(self, detector: Detector, class_names: Sequence[str], cache: bool = True,
                 cache_dir: str | Path | None = None):
        self.detector = copy.deepcopy(detector)
        self.detector.eval()
        for p in self.detector.parameters():
            p.requires_grad_(False)
        self.class_names = list(class_names)
        self.digest = weights_digest(self.detector)
        self.use_cache = cache
        self._memory: dict[str, TeacherOutputs] = {}
        self.cache_dir = Path(cache_dir) / self.digest[:16] if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    @property
    def num_classes(self) -> int:
        return self.detector.num_classes

    @staticmethod
    def key(image: np.ndarray) -> str:
        h = hashlib.sha256(np.ascontiguousarray(image).tobytes())
        h.update(str(image.shape).encode())
        return h.hexdigest()[:32]

    @torch.no_grad()
    def compute(self, image) -> TeacherOutputs:
        feat, rpn = self.detector.forward_rpn(image, training=True)
        out = self.detector.forward_rcnn(feat, rpn.proposals)
        return TeacherOutputs(rpn.probs.numpy(), rpn.deltas.numpy(), rpn.proposals,
                              out.logits.numpy(), out.deltas.numpy())

    def outputs(self, image: np.ndarray) -> TeacherOutputs:
        if not self.use_cache:
            return self.compute(image)
        k = self.key(image)
        hit = self._memory.get(k)
        if hit is None and self.cache_dir is not None:
            path = self.cache_dir / f"{k}.npz"
            if path.exists():
                with np.load(path) as z:
                    hit = TeacherOutputs(**{f: z[f] for f in TeacherOutputs.__dataclass_fields__})
                self._memory[k] = hit
        if hit is not None:
            self.hits += 1
            return hit
        self.misses += 1
        out = self.compute(image)
        self._memory[k] = out
        if self.cache_dir is not None:
            np.savez(self.cache_dir / f"{k}.npz", **asdict(out))
        return out

    def pseudo_positives(self, out: TeacherOutputs, threshold: float = 0.5) -> PseudoPositiveSet:
        probs = out.rcnn_probs
        if len(probs) == 0:
            return PseudoPositiveSet.empty()
        top = probs[:, 1:].argmax(1)
        deltas = out.rcnn_deltas[np.arange(len(top)), top]
        boxes = geometry.decode(deltas, out.proposals, self.detector.config.rcnn_box_weights)
        return pseudo_positive_boxes(boxes, probs, threshold)


# -- one step ------------------------------------------------------------------

def _targets(sample: Sample, class_names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    index = {c: i for i, c in enumerate(class_names)}
    labels = np.array([index[c] for c in sample.classes], dtype=np.int64)
    return sample.boxes, labels


def compute_losses(student: Detector, teacher: TeacherSnapshot | None, sample: Sample,
                   class_names: Sequence[str], sampler: SamplerConfig, distill: DistillConfig,
                   rng: np.random.Generator) -> LossBreakdown:
    """Forward both networks on one image and return the weighted losses (no update)."""
    cfg = student.config
    gt_boxes, gt_labels = _targets(sample, class_names)
    if len(gt_boxes) == 0:
        raise DatasetError(f"image {sample.image_id} has no labels for the current task")
    image = student.to_tensor(sample.image)
    size = tuple(image.shape[-2:])
    anchors = student.anchors(size).boxes

    use_teacher = teacher is not None and distill.uses_teacher
    t_out = teacher.outputs(sample.image) if use_teacher else None
    pp = teacher.pseudo_positives(t_out, sampler.pseudo_positive_threshold) if use_teacher else None

    feat, rpn = student.forward_rpn(image, training=True)
    zero = rpn.logits.sum() * 0

    # RPN supervised
    s_rpn = sample_rpn_supervised(anchors, gt_boxes, pp, sampler, rng)
    idx = torch.as_tensor(s_rpn.indices)
    pos = torch.as_tensor(s_rpn.positives)
    tgt = geometry.encode(gt_boxes[s_rpn.matched_gt], anchors[s_rpn.positives]) if len(pos) else np.zeros((0, 4))
    rpn_sup = rpn_supervised_loss(rpn.logits[idx], torch.as_tensor(s_rpn.labels),
                                  rpn.deltas[pos], torch.as_tensor(tgt, dtype=rpn.deltas.dtype))

    # RPN distillation
    if use_teacher and distill.lambda2:
        d_idx = sample_distill_anchors(t_out.rpn_probs[:, 1], sampler, rng)
        ti = torch.as_tensor(d_idx)
        rpn_dist = rpn_distill_loss(rpn.logits[ti], rpn.deltas[ti], torch.as_tensor(t_out.rpn_probs[d_idx]),
                                    torch.as_tensor(t_out.rpn_deltas[d_idx]),
                                    hard_labels=not distill.soft_rpn_labels)
    else:
        rpn_dist = (zero, zero)

    # RoI sets
    props = np.concatenate([rpn.proposals, gt_boxes]) if len(rpn.proposals) else gt_boxes.copy()
    s_roi = sample_roi_supervised(props, gt_boxes, pp, sampler, rng)
    sup_rois = props[s_roi.indices]
    sup_labels = np.concatenate([gt_labels[s_roi.matched_gt] + 1, np.zeros(len(s_roi.negatives), np.int64)])
    if len(s_roi.positives):
        sup_tgt = geometry.encode(gt_boxes[s_roi.matched_gt], props[s_roi.positives], cfg.rcnn_box_weights)
    else:
        sup_tgt = np.zeros((0, 4))
    if use_teacher and distill.lambda3 and len(t_out.proposals):
        d_rois = sample_distill_rois(t_out.proposals, t_out.rcnn_probs[:, 0], sampler, rng,
                                     gt_boxes if sampler.filter_fp else None)
    else:
        d_rois = np.zeros(0, dtype=np.int64)
    dist_rois = t_out.proposals[d_rois] if len(d_rois) else np.zeros((0, 4))

    out = student.forward_rcnn(feat, np.concatenate([sup_rois, dist_rois]))
    n_sup = len(sup_rois)
    rcnn_sup = rcnn_supervised_loss(out.logits[:n_sup], torch.as_tensor(sup_labels), out.deltas[:n_sup],
                                    torch.as_tensor(sup_tgt, dtype=out.deltas.dtype))
    if len(d_rois):
        rcnn_dist = rcnn_distill_loss(out.logits[n_sup:], out.deltas[n_sup:],
                                      torch.as_tensor(t_out.rcnn_logits[d_rois]),
                                      torch.as_tensor(t_out.rcnn_deltas[d_rois]),
                                      teacher.num_classes, distill.distill_all_old_deltas)
    else:
        rcnn_dist = (zero, zero)

    return total_loss(rpn_sup, rcnn_sup, rpn_dist, rcnn_dist, distill.lambda1, distill.lambda2,
                      distill.lambda3, distill.rpn_reg_weight, distill.rcnn_reg_weight)


def make_optimizer(detector: Detector, schedule: TrainSchedule) -> torch.optim.Optimizer:
    params = [p for p in detector.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=schedule.lr_at(0), momentum=schedule.momentum,
                           weight_decay=schedule.weight_decay)


def train_step(student: Detector, teacher: TeacherSnapshot | None, sample: Sample,
               class_names: Sequence[str], sampler: SamplerConfig, distill: DistillConfig,
               optimizer: torch.optim.Optimizer, rng: np.random.Generator,
               grad_clip: float | None = 10.0) -> LossBreakdown:
    """One optimizer update.  Raises ``NonFiniteLoss`` before touching weights."""
    student.train()
    losses = compute_losses(student, teacher, sample, class_names, sampler, distill, rng)
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_([p for p in student.parameters() if p.requires_grad], grad_clip)
    optimizer.step()
    return losses


# -- loops ---------------------------------------------------------------------

def _image_stream(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n)


def train_detector(student: Detector, data: TaskView, class_names: Sequence[str], schedule: TrainSchedule,
                   sampler: SamplerConfig, distill: DistillConfig, teacher: TeacherSnapshot | None = None,
                   seed: int = 0, log_path: str | Path | None = None,
                   progress: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Run ``schedule.iterations`` single-image steps; returns per-step loss rows."""
    if len(data) == 0:
        raise DatasetError("training set is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    student.freeze(distill.freeze)
    opt = make_optimizer(student, schedule)
    order = _image_stream(len(data), rng)
    rows = []
    writer = fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
    try:
        for step in range(schedule.iterations):
            lr = schedule.lr_at(step)
            for g in opt.param_groups:
                g["lr"] = lr
            sample = data[int(next(order))]
            if schedule.hflip and rng.random() < 0.5:
                sample = hflip(sample)
            losses = train_step(student, teacher, sample, class_names, sampler, distill, opt, rng,
                                schedule.grad_clip)
            row = {"step": step, "lr": lr, **{k: v for k, v in losses.as_floats().items() if k in LOSS_COLUMNS}}
            rows.append(row)
            if writer:
                writer.writerow(row)
            if progress:
                progress(step, row)
    finally:
        if fh:
            fh.close()
    student.eval()
    return rows


def train_base(data: TaskView, class_names: Sequence[str], det_config: DetectorConfig,
               schedule: TrainSchedule, sampler: SamplerConfig | None = None, seed: int = 0,
               log_path=None, progress=None) -> Detector:
    """Train a detector from scratch on the old classes with the supervised losses only."""
    if len(data) == 0:
        raise DatasetError("base training set is empty")
    if det_config.num_classes != len(class_names):
        raise ValueError("detector class count does not match class list")
    torch.manual_seed(seed)
    det = Detector(det_config)
    sampler = sampler or SamplerConfig()
    train_detector(det, data, class_names, schedule, sampler, DistillConfig(lambda2=0.0, lambda3=0.0),
                   None, seed, log_path, progress)
    return det


def train_incremental(teacher_det: Detector, teacher_classes: Sequence[str], new_classes: Sequence[str],
                      data: TaskView, schedule: TrainSchedule, sampler: SamplerConfig,
                      distill: DistillConfig, seed: int = 0, cache: bool = True, cache_dir=None,
                      log_path=None, progress=None) -> tuple[Detector, dict]:
    """Algorithm loop for one new task.  Returns the student and a small audit dict."""
    overlap = set(new_classes) & set(teacher_classes)
    if overlap:
        raise ValueError(f"class re-added: {sorted(overlap)}")
    teacher = TeacherSnapshot(teacher_det, teacher_classes, cache=cache, cache_dir=cache_dir)
    before = teacher.digest
    student = extend_classes(teacher.detector, len(new_classes), rng_seed=seed)
    for p in student.parameters():
        p.requires_grad_(True)
    classes = list(teacher_classes) + list(new_classes)
    t0 = time.perf_counter()
    rows = train_detector(student, data, classes, schedule, sampler, distill,
                          teacher if distill.uses_teacher else None, seed, log_path, progress)
    after = weights_digest(teacher.detector)
    audit = {"teacher_digest_before": before, "teacher_digest_after": after,
             "teacher_unchanged": before == after, "seconds": time.perf_counter() - t0,
             "cache_hits": teacher.hits, "cache_misses": teacher.misses,
             "final_loss": rows[-1]["total"] if rows else None}
    return student, audit


def budget_for_task(num_new: int, per_class: int | None = None, single: int = 4000, base_iterations: int = 70000) -> int:
    """Iterations for a task adding ``num_new`` classes.

    With ``per_class`` set the budget is ``per_class * num_new`` (the
    sequential-protocol law that keeps total iterations constant);
    otherwise ``single`` for one class and ``base_iterations`` for more.
    """
    if per_class is not None:
        return per_class * num_new
    return single if num_new == 1 else base_iterations


def run_task_sequence(spec: TaskSpec, base: tuple[Detector, list[str]], train_data, test_data,
                      schedule_for: Callable[[int], TrainSchedule], sampler: SamplerConfig,
                      distill: DistillConfig, out_dir, seed: int = 0, evaluate=None,
                      cache: bool = True, progress=None) -> list[dict]:
    """Train every task in order, handing each student over as the next teacher.

    Writes ``stage-<k>/checkpoint.pt``, ``metrics.json`` and ``loss_log.csv``
    (stage 0 is the base model).  A stage whose checkpoint already exists is
    loaded instead of retrained.  ``evaluate(detector, seen_classes, old,
    new)`` returns a ``MetricsReport``.
    """
    out_dir = Path(out_dir)
    det, classes = base
    if list(classes) != list(spec.old_classes):
        raise ValueError("base checkpoint classes do not match the task spec")
    stages = []
    stage0 = out_dir / "stage-0"
    if not (stage0 / "checkpoint.pt").exists():
        save_checkpoint(stage0 / "checkpoint.pt", det, classes)
    if evaluate is not None and not (stage0 / "metrics.json").exists():
        evaluate(det, classes, classes, []).save(stage0 / "metrics.json")
    stages.append({"stage": 0, "classes": list(classes), "checkpoint": str(stage0 / "checkpoint.pt")})
    for k, new in enumerate(spec.tasks, start=1):
        d = out_dir / f"stage-{k}"
        ckpt = d / "checkpoint.pt"
        seen = spec.seen_after(k)
        if ckpt.exists():
            det, classes, extra = load_checkpoint(ckpt)
            audit = extra.get("audit", {})
        else:
            view = TaskView(train_data, new)
            det, audit = train_incremental(det, classes, new, view, schedule_for(len(new)), sampler, distill,
                                           seed=seed + k, cache=cache, cache_dir=out_dir / "teacher-cache",
                                           log_path=d / "loss_log.csv", progress=progress)
            classes = seen
            save_checkpoint(ckpt, det, classes, {"audit": audit})
        if evaluate is not None:
            old = [c for c in seen if c not in new]
            report = evaluate(det, seen, old, list(new))
            report.save(d / "metrics.json")
        stages.append({"stage": k, "classes": list(classes), "checkpoint": str(ckpt), "audit": audit})
    (out_dir / "stages.json").write_text(json.dumps(stages, indent=2))
    return stages
