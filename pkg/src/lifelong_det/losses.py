"""Supervised and distillation losses as pure torch functions.

Every function takes already-gathered tensors (the samplers decide which
anchors / RoIs participate) and returns ``(cls, reg)`` scalars, so each term
can be differentiated and checked in isolation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

LOG_FLOOR = 1e-12


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """Smooth L1 summed over the last (delta) axis and averaged over samples."""
    x = torch.as_tensor(x)
    if x.ndim == 1:
        x = x.unsqueeze(0)
    if x.shape[0] == 0:
        return x.new_zeros(())
    ax = x.abs()
    per = torch.where(ax < 1, 0.5 * x * x, ax - 0.5)
    return per.sum(-1).mean()


def _gated_smooth_l1(diff: torch.Tensor, gate: torch.Tensor, n: int) -> torch.Tensor:
    if n == 0:
        return diff.new_zeros(())
    ax = diff.abs()
    per = torch.where(ax < 1, 0.5 * diff * diff, ax - 0.5).sum(-1)
    return (per * gate.to(per.dtype)).sum() / n


def rpn_supervised_loss(logits: torch.Tensor, labels: torch.Tensor,
                        deltas: torch.Tensor, targets: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Objectness cross-entropy over the sampled anchors plus box regression on positives.

    ``logits`` ``(n, 2)`` and ``labels`` ``(n,)`` in {0, 1} are the sampled
    anchors; ``deltas`` / ``targets`` ``(p, 4)`` are the positive anchors only.
    """
    if len(labels) == 0:
        z = logits.sum() * 0
        return z, z + deltas.sum() * 0
    cls = F.cross_entropy(logits, labels.long())
    reg = smooth_l1(deltas - targets) if len(targets) else deltas.sum() * 0
    return cls, reg


def rcnn_supervised_loss(logits: torch.Tensor, labels: torch.Tensor,
                         deltas: torch.Tensor, targets: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy over background + classes, regression on positives.

    ``labels`` use 0 for background and ``c + 1`` for class ``c``.
    ``deltas`` is ``(n, K, 4)``; only the ground-truth class's delta of the
    positive rows enters the regression term.
    """
    if len(labels) == 0:
        z = logits.sum() * 0
        return z, z + deltas.sum() * 0
    labels = labels.long()
    cls = F.cross_entropy(logits, labels)
    pos = torch.nonzero(labels > 0).flatten()
    if len(pos) == 0:
        return cls, deltas.sum() * 0
    picked = deltas[pos, labels[pos] - 1]
    return cls, smooth_l1(picked - targets)


def soft_cross_entropy(student_logits: torch.Tensor, teacher_probs: torch.Tensor) -> torch.Tensor:
    """Per-row ``-sum_c p_T[c] * log p_S[c]``."""
    logp = torch.log(F.softmax(student_logits, dim=1).clamp_min(LOG_FLOOR))
    return -(teacher_probs * logp).sum(1)


def rpn_distill_loss(student_logits: torch.Tensor, student_deltas: torch.Tensor,
                     teacher_probs: torch.Tensor, teacher_deltas: torch.Tensor,
                     hard_labels: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Pairwise RPN distillation over the same N anchors.

    Student objectness enters as logits ``(N, 2)``; the teacher as softmax
    probabilities.  Box deltas are matched only where the teacher's
    objectness is at least 0.5.  Both terms are divided by N.
    """
    n = len(teacher_probs)
    if n == 0:
        z = student_logits.sum() * 0
        return z, z + student_deltas.sum() * 0
    tp = teacher_probs.to(student_logits.dtype)
    if hard_labels:
        tp = F.one_hot(tp.argmax(1), 2).to(tp.dtype)
    cls = soft_cross_entropy(student_logits, tp).mean()
    gate = teacher_probs[:, 1] >= 0.5
    reg = _gated_smooth_l1(student_deltas - teacher_deltas.to(student_deltas.dtype), gate, n)
    return cls, reg


def centered(logits: torch.Tensor) -> torch.Tensor:
    return logits - logits.mean(dim=1, keepdim=True)


def rcnn_distill_loss(student_logits: torch.Tensor, student_deltas: torch.Tensor,
                      teacher_logits: torch.Tensor, teacher_deltas: torch.Tensor,
                      num_old: int, all_old_classes: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """R-CNN distillation over the same M teacher-selected RoIs.

    Logits are ``(M, 1 + K)`` with background first; only the ``num_old``
    old foreground columns are compared, each row mean-subtracted over that
    set, by mean squared difference.  Deltas ``(M, K, 4)`` are compared for
    the teacher's most probable old class (or every old class with
    ``all_old_classes``) on rows whose max old-class teacher probability
    reaches 0.5.
    """
    m = len(teacher_logits)
    if m == 0:
        z = student_logits.sum() * 0
        return z, z + student_deltas.sum() * 0
    old = slice(1, 1 + num_old)
    qs = centered(student_logits[:, old])
    qt = centered(teacher_logits[:, old].to(qs.dtype))
    cls = ((qs - qt) ** 2).mean(1).mean()
    tprob = F.softmax(teacher_logits.to(qs.dtype), dim=1)[:, old]
    z, top = tprob.max(1)
    gate = z >= 0.5
    td = teacher_deltas[:, :num_old].to(student_deltas.dtype)
    sd = student_deltas[:, :num_old]
    if all_old_classes:
        diff = sd - td
        ax = diff.abs()
        per = torch.where(ax < 1, 0.5 * diff * diff, ax - 0.5).sum(-1).mean(1)
        reg = (per * gate.to(per.dtype)).sum() / m
    else:
        rows = torch.arange(m)
        reg = _gated_smooth_l1(sd[rows, top] - td[rows, top], gate, m)
    return cls, reg


@dataclass
class LossBreakdown:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    rcnn_cls: torch.Tensor
    rcnn_reg: torch.Tensor
    rpn_dist_cls: torch.Tensor
    rpn_dist_reg: torch.Tensor
    rcnn_dist_cls: torch.Tensor
    rcnn_dist_reg: torch.Tensor
    l_rpn: torch.Tensor
    l_rcnn: torch.Tensor
    l_rpn_dist: torch.Tensor
    l_rcnn_dist: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term}: {value}")
        self.term = term


def total_loss(rpn: tuple, rcnn: tuple, rpn_dist: tuple, rcnn_dist: tuple,
               lambda1: float = 1.0, lambda2: float = 1.0, lambda3: float = 1.0,
               rpn_reg_weight: float = 1.0, rcnn_reg_weight: float = 1.0) -> LossBreakdown:
    """Combine the four ``(cls, reg)`` pairs into the training objective.

    ``rpn_reg_weight`` and ``rcnn_reg_weight`` weight the regression part of
    the two supervised terms.  Raises :class:`NonFiniteLoss` naming the
    first offending term.
    """
    named = {
        "rpn_cls": rpn[0], "rpn_reg": rpn[1], "rcnn_cls": rcnn[0], "rcnn_reg": rcnn[1],
        "rpn_dist_cls": rpn_dist[0], "rpn_dist_reg": rpn_dist[1],
        "rcnn_dist_cls": rcnn_dist[0], "rcnn_dist_reg": rcnn_dist[1],
    }
    for k, v in named.items():
        named[k] = torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v
        val = float(named[k].detach())
        if not math.isfinite(val):
            raise NonFiniteLoss(k, val)
    l_rpn = named["rpn_cls"] + rpn_reg_weight * named["rpn_reg"]
    l_rcnn = named["rcnn_cls"] + rcnn_reg_weight * named["rcnn_reg"]
    l_rpn_dist = named["rpn_dist_cls"] + named["rpn_dist_reg"]
    l_rcnn_dist = named["rcnn_dist_cls"] + named["rcnn_dist_reg"]
    total = l_rpn + lambda1 * l_rcnn + lambda2 * l_rpn_dist + lambda3 * l_rcnn_dist
    return LossBreakdown(l_rpn=l_rpn, l_rcnn=l_rcnn, l_rpn_dist=l_rpn_dist,
                         l_rcnn_dist=l_rcnn_dist, total=total, **named)
