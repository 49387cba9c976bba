"""Two-stage detector: backbone, region proposal head and region classifier.

Class columns of the region classifier are laid out as ``[background,
class_0, ..., class_{K-1}]``; per-class box deltas cover foreground classes
only, so the regression output has ``4 * K`` channels.
"""
from __future__ import annotations

import copy
import hashlib
import io
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision import ops as box_ops
from torchvision.ops import roi_align

from . import geometry

CHECKPOINT_VERSION = 1
BACKBONES = ("tiny-conv", "resnet50-style")
PARAM_GROUPS = ("backbone", "rpn", "rcnn")
# torchvision's CPU roi_align backward is slow on tiny maps; below this size
# pooling is done as two small interpolation matmuls instead
SEPARABLE_POOL_MAX_CELLS = 1024


@dataclass
class DetectorConfig:
    num_classes: int
    backbone: str = "tiny-conv"
    stride: int = 16
    anchor_scales: tuple[float, ...] = (4.0, 8.0, 16.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    train_top_n: int = 2000
    test_top_n: int = 300
    pre_nms_top_n: int = 6000
    rpn_nms_threshold: float = 0.7
    min_proposal_size: float = 1.0
    pool_size: int = 7
    det_nms_threshold: float = 0.3
    max_detections: int = 100
    # R-CNN targets are scaled so their spread is comparable to the RPN's
    rcnn_box_weights: tuple[float, ...] = (10.0, 10.0, 5.0, 5.0)
    width: int = 64
    head_dim: int = 256
    new_weight_std: float = 0.01
    pixel_mean: float = 127.5
    pixel_std: float = 64.0

    def __post_init__(self):
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        self.rcnn_box_weights = tuple(float(w) for w in self.rcnn_box_weights)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.train_top_n < 1 or self.test_top_n < 1:
            raise ValueError("proposal keep counts must be positive")
        if self.backbone == "tiny-conv" and (self.width < 16 or self.width % 16):
            raise ValueError("tiny-conv width must be a positive multiple of 16")
        if self.test_top_n > self.train_top_n:
            raise ValueError("test_top_n must not exceed train_top_n")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


@dataclass
class Detection:
    box: np.ndarray
    class_id: int
    score: float


@dataclass
class RPNOutputs:
    logits: torch.Tensor       # (A, 2), column 1 = object
    deltas: torch.Tensor       # (A, 4)
    proposals: np.ndarray      # (P, 4), ranked by objectness
    proposal_scores: np.ndarray

    @property
    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=1)


@dataclass
class RCNNOutputs:
    logits: torch.Tensor       # (R, K + 1)
    deltas: torch.Tensor       # (R, K, 4)

    @property
    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=1)


def _conv(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Four stride-2 conv blocks (stride 16) plus a stride-2 stage for the RoI head."""

    def __init__(self, width: int):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            _conv(3, w // 2, 2), _conv(w // 2, w, 2), _conv(w, w, 1),
            _conv(w, 2 * w, 2), _conv(2 * w, 2 * w, 2),
        )
        self.out_channels = 2 * w
        self.top = _conv(2 * w, 2 * w, 2)
        self.top_channels = 2 * w * 4 * 4

    def head(self, pooled):
        x = self.top(pooled)
        return F.adaptive_avg_pool2d(x, 4).flatten(1)


class ResNet50Backbone(nn.Module):
    """ResNet-50 layout: conv1..layer3 feed the RPN, layer4 runs on pooled RoIs."""

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50
        net = resnet50(weights=None, norm_layer=lambda c: nn.GroupNorm(32, c))
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3)
        self.out_channels = 1024
        self.top = net.layer4
        self.top_channels = 2048

    def head(self, pooled):
        return F.adaptive_avg_pool2d(self.top(pooled), 1).flatten(1)


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        if config.backbone == "tiny-conv":
            self.backbone = TinyBackbone(config.width)
        else:
            self.backbone = ResNet50Backbone()
        c = self.backbone.out_channels
        a = config.num_anchors
        self.rpn = nn.ModuleDict({
            "conv": nn.Conv2d(c, c, 3, 1, 1),
            "cls": nn.Conv2d(c, 2 * a, 1),
            "reg": nn.Conv2d(c, 4 * a, 1),
        })
        self.rcnn = nn.ModuleDict({
            "fc": nn.Sequential(
                nn.Linear(self.backbone.top_channels, config.head_dim), nn.ReLU(inplace=True),
                nn.Linear(config.head_dim, config.head_dim), nn.ReLU(inplace=True),
            ),
            "cls": nn.Linear(config.head_dim, config.num_classes + 1),
            "reg": nn.Linear(config.head_dim, 4 * config.num_classes),
        })
        for m in list(self.rpn.values()):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)
        nn.init.normal_(self.rcnn["cls"].weight, std=0.01)
        nn.init.normal_(self.rcnn["reg"].weight, std=0.001)
        nn.init.zeros_(self.rcnn["cls"].bias)
        nn.init.zeros_(self.rcnn["reg"].bias)
        self._anchor_cache: dict[tuple[int, int], geometry.AnchorGrid] = {}

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "backbone": list(self.backbone.body.parameters()),
            "rpn": list(self.rpn.parameters()),
            "rcnn": list(self.backbone.top.parameters()) + list(self.rcnn.parameters()),
        }

    def freeze(self, groups: Sequence[str]) -> None:
        params = self.param_groups()
        for g in groups:
            if g not in PARAM_GROUPS:
                raise ValueError(f"unknown parameter group {g!r}")
            for p in params[g]:
                p.requires_grad_(False)

    # -- input / anchors -------------------------------------------------

    def to_tensor(self, image) -> torch.Tensor:
        """``(H, W, 3)`` uint8 array (or a prepared ``(3, H, W)`` tensor) -> normalised tensor."""
        if isinstance(image, torch.Tensor):
            return image
        arr = np.asarray(image, dtype=np.float32)
        t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
        return (t - self.config.pixel_mean) / self.config.pixel_std

    def anchors(self, image_size: tuple[int, int]) -> geometry.AnchorGrid:
        key = tuple(image_size)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = geometry.generate_anchors(
                key, self.config.stride, self.config.anchor_scales, self.config.anchor_ratios)
        return self._anchor_cache[key]

    # -- stages ------------------------------------------------------------

    def features(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        if h < self.config.stride or w < self.config.stride:
            raise geometry.GeometryError("no feature positions")
        return self.backbone.body(image.unsqueeze(0))

    def rpn_head(self, feat: torch.Tensor, image_size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-anchor objectness logits ``(A, 2)`` and deltas ``(A, 4)`` in anchor order."""
        grid = self.anchors(image_size)
        feat = feat[..., :grid.feat_height, :grid.feat_width]
        x = F.relu(self.rpn["conv"](feat))
        a = self.config.num_anchors
        cls = self.rpn["cls"](x)[0]           # (2A, H, W)
        reg = self.rpn["reg"](x)[0]           # (4A, H, W)
        cls = cls.view(a, 2, *cls.shape[-2:]).permute(2, 3, 0, 1).reshape(-1, 2)
        reg = reg.view(a, 4, *reg.shape[-2:]).permute(2, 3, 0, 1).reshape(-1, 4)
        return cls, reg

    def make_proposals(self, logits: torch.Tensor, deltas: torch.Tensor,
                       image_size: tuple[int, int], top_n: int) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        h, w = image_size
        scores = F.softmax(logits.detach().double(), dim=1)[:, 1].numpy()
        d = deltas.detach().double().numpy()
        anchors = self.anchors(image_size).boxes
        order = np.lexsort((np.arange(len(scores)), -scores))[:cfg.pre_nms_top_n]
        boxes = geometry.clip_boxes(geometry.decode(d[order], anchors[order]), w, h)
        s = scores[order]
        ok = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_proposal_size) & \
             ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_proposal_size)
        boxes, s = boxes[ok], s[ok]
        # torchvision's kernel is the fast path; geometry.nms is the reference it is tested against
        keep = box_ops.nms(torch.from_numpy(boxes), torch.from_numpy(s), cfg.rpn_nms_threshold)[:top_n].numpy()
        return boxes[keep], s[keep]

    def rcnn_head(self, feat: torch.Tensor, rois) -> RCNNOutputs:
        k = self.config.num_classes
        rois = torch.as_tensor(np.asarray(rois, dtype=np.float32).reshape(-1, 4))
        if len(rois) == 0:
            return RCNNOutputs(feat.new_zeros((0, k + 1)), feat.new_zeros((0, k, 4)))
        pooled = self.pool(feat, rois)
        x = self.rcnn["fc"](self.backbone.head(pooled))
        return RCNNOutputs(self.rcnn["cls"](x), self.rcnn["reg"](x).view(-1, k, 4))

    def pool(self, feat: torch.Tensor, rois: torch.Tensor) -> torch.Tensor:
        """Bilinear RoI pooling (align-style, 2x2 samples per bin)."""
        h, w = feat.shape[-2:]
        if h * w <= SEPARABLE_POOL_MAX_CELLS:
            return separable_roi_align(feat[0], rois, self.config.pool_size, 1.0 / self.config.stride)
        idx = torch.zeros((len(rois), 1), dtype=rois.dtype)
        return roi_align(feat, torch.cat([idx, rois], 1), self.config.pool_size,
                         spatial_scale=1.0 / self.config.stride, sampling_ratio=2, aligned=True)

    # -- public passes -----------------------------------------------------

    def forward_rpn(self, image, training: bool | None = None) -> tuple[torch.Tensor, RPNOutputs]:
        """Backbone + RPN.  Returns the feature map and the RPN outputs.

        ``training`` selects the proposal keep count (train vs test);
        defaults to ``self.training``.
        """
        x = self.to_tensor(image)
        size = tuple(x.shape[-2:])
        feat = self.features(x)
        logits, deltas = self.rpn_head(feat, size)
        mode = self.training if training is None else training
        top_n = self.config.train_top_n if mode else self.config.test_top_n
        props, scores = self.make_proposals(logits, deltas, size, top_n)
        return feat, RPNOutputs(logits, deltas, props, scores)

    def forward_rcnn(self, feat: torch.Tensor, rois) -> RCNNOutputs:
        return self.rcnn_head(feat, rois)

    @torch.no_grad()
    def predict(self, image, score_filter: float = 0.5) -> list[Detection]:
        x = self.to_tensor(image)
        h, w = x.shape[-2:]
        feat, rpn = self.forward_rpn(x, training=False)
        out = self.rcnn_head(feat, rpn.proposals)
        return self.postprocess(rpn.proposals, out, (h, w), score_filter)

    def postprocess(self, rois: np.ndarray, out: RCNNOutputs, image_size, score_filter: float) -> list[Detection]:
        cfg = self.config
        h, w = image_size
        k = cfg.num_classes
        if len(rois) == 0:
            return []
        probs = out.probs.double().numpy()[:, 1:]
        deltas = out.deltas.double().numpy()
        boxes, scores, labels = [], [], []
        for c in range(k):
            sel = probs[:, c] >= score_filter
            sel &= probs[:, c] > 0
            if not sel.any():
                continue
            b = geometry.clip_boxes(
                geometry.decode(deltas[sel, c], rois[sel], cfg.rcnn_box_weights), w, h)
            boxes.append(b)
            scores.append(probs[sel, c])
            labels.append(np.full(int(sel.sum()), c))
        if not boxes:
            return []
        boxes = np.concatenate(boxes)
        scores = np.concatenate(scores)
        labels = np.concatenate(labels)
        keep = geometry.batched_nms(boxes, scores, labels, cfg.det_nms_threshold)[:cfg.max_detections]
        return [Detection(boxes[i], int(labels[i]), float(scores[i])) for i in keep]


def _interp_matrix(lo: np.ndarray, hi: np.ndarray, size: int, out: int, samples: int) -> np.ndarray:
    """``(n, out, size)`` weights averaging ``samples`` bilinear taps per output bin."""
    n = len(lo)
    g = (np.arange(out * samples) + 0.5) / (out * samples)
    v = lo[:, None] + (hi - lo)[:, None] * g[None]
    valid = ((v >= -1.0) & (v <= size)).astype(np.float64)
    v = np.clip(v, 0, size - 1)
    v0 = np.floor(v).astype(np.int64)
    v1 = np.minimum(v0 + 1, size - 1)
    frac = v - v0
    m = np.zeros((n, out * samples, size))
    r = np.arange(n)[:, None]
    c = np.arange(out * samples)[None]
    np.add.at(m, (r, c, v0), (1 - frac) * valid)
    np.add.at(m, (r, c, v1), frac * valid)
    return m.reshape(n, out, samples, size).mean(2)


def separable_roi_align(feat: torch.Tensor, rois: torch.Tensor, out: int, scale: float,
                        samples: int = 2) -> torch.Tensor:
    """RoI align on a ``(C, H, W)`` map as ``Ay @ F @ Ax^T`` per RoI.

    Bilinear taps factor into a row and a column weight, so each RoI pools
    with two small matrices; equal to ``roi_align(aligned=True)`` up to
    float rounding.
    """
    r = rois.detach().double().numpy() * scale - 0.5
    h, w = feat.shape[-2:]
    ay = torch.as_tensor(_interp_matrix(r[:, 1], r[:, 3], h, out, samples), dtype=feat.dtype)
    ax = torch.as_tensor(_interp_matrix(r[:, 0], r[:, 2], w, out, samples), dtype=feat.dtype)
    t = torch.einsum("niy,cyx->ncix", ay, feat)
    return torch.einsum("ncix,njx->ncij", t, ax)


def extend_classes(teacher: Detector, num_new: int, rng_seed: int = 0) -> Detector:
    """Copy ``teacher`` and widen its region classifier by ``num_new`` classes.

    Every existing weight is copied verbatim; the added classification rows
    and regression rows are Gaussian (``config.new_weight_std``) with zero
    bias, so old-class logits are unchanged at initialisation.
    """
    if num_new < 1:
        raise ValueError("num_new must be >= 1")
    cfg = copy.deepcopy(teacher.config)
    k_old = cfg.num_classes
    cfg.num_classes = k_old + num_new
    student = Detector(cfg)
    state = teacher.state_dict()
    gen = torch.Generator().manual_seed(rng_seed)
    std = cfg.new_weight_std
    new_state = {}
    for name, value in student.state_dict().items():
        old = state[name]
        if old.shape == value.shape:
            new_state[name] = old.clone()
            continue
        grown = torch.zeros_like(value)
        if name.endswith("weight"):
            grown.normal_(0.0, std, generator=gen)
        grown[:old.shape[0]] = old
        new_state[name] = grown
    student.load_state_dict(new_state)
    student.train(teacher.training)
    return student


# -- checkpoints ---------------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, detector: Detector, class_names: Sequence[str], extra: dict | None = None) -> None:
    if len(class_names) != detector.num_classes:
        raise CheckpointError("class name count does not match detector")
    state = detector.state_dict()
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": detector.config.to_dict(),
        "class_names": list(class_names),
        "manifest": {k: list(v.shape) for k, v in state.items()},
        "weights": state,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Detector, list[str], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (pickle.UnpicklingError, RuntimeError, EOFError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e.__class__.__name__})") from e
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    det = Detector(DetectorConfig.from_dict(payload["config"]))
    expected = {k: list(v.shape) for k, v in det.state_dict().items()}
    if expected != payload["manifest"]:
        raise CheckpointError(f"{path}: weight manifest does not match config")
    for k, v in payload["weights"].items():
        if list(v.shape) != payload["manifest"].get(k):
            raise CheckpointError(f"{path}: tensor {k} has shape {list(v.shape)}, manifest says {payload['manifest'].get(k)}")
    det.load_state_dict(payload["weights"])
    det.eval()
    return det, list(payload["class_names"]), payload.get("extra", {})


def weights_digest(detector: Detector) -> str:
    """Stable hash of all weights; used to key teacher caches and check immutability."""
    h = hashlib.sha256()
    for name, v in sorted(detector.state_dict().items()):
        h.update(name.encode())
        buf = io.BytesIO()
        np.save(buf, v.detach().cpu().numpy(), allow_pickle=False)
        h.update(buf.getvalue())
    return h.hexdigest()
