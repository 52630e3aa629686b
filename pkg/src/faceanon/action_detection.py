"""Compact two-stage (proposal + region classification) spatial action detector.

The structure follows Faster R-CNN: a conv backbone, a region proposal head over
anchors, and a region head on features pooled with the bilinear grid sampler
from :mod:`faceanon.image_ops`. Losses are the usual four terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, box_iou, nms

from .core_data import ActionInstance, Box
from .image_ops import grid_sample, make_crop_grids

RCNN_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
MAX_DELTA_LOG = math.log(1000.0 / 16)

PROFILES = {
    "native": {"min_side": None, "max_side": None},
    "desk": {"min_side": 128, "max_side": None},
    "jhmdb": {"min_side": 340, "max_side": None},
    "daly": {"min_side": 600, "max_side": 800},
}


@dataclass
class DetectorConfig:
    n_classes: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    anchor_sizes: tuple[float, ...] = (16.0, 32.0, 48.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    proposal_nms: float = 0.7
    pre_nms_top: int = 300
    post_nms_train: int = 64
    post_nms_test: int = 64
    roi_batch: int = 128
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    pool_size: int = 7
    hidden: int = 256
    min_side: int | None = None
    max_side: int | None = None

    def __post_init__(self):
        for f in ("channels", "strides", "anchor_sizes", "anchor_ratios"):
            setattr(self, f, tuple(getattr(self, f)))
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")

    @property
    def stride(self) -> int:
        return math.prod(self.strides)


@dataclass(frozen=True)
class Detection:
    box: Box
    action_class: int
    score: float


@dataclass
class LossBundle:
    """Named scalar losses for one update. Absent terms stay ``None``."""

    rpn_cls: torch.Tensor | None = None
    rpn_reg: torch.Tensor | None = None
    rcnn_cls: torch.Tensor | None = None
    rcnn_reg: torch.Tensor | None = None
    adv: torch.Tensor | None = None
    l1: torch.Tensor | None = None

    NAMES = ("rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg", "adv", "l1")

    def items(self):
        return [(n, getattr(self, n)) for n in self.NAMES if getattr(self, n) is not None]

    @property
    def det(self):
        parts = [getattr(self, n) for n in self.NAMES[:4] if getattr(self, n) is not None]
        return sum(parts) if parts else None

    @property
    def total(self):
        parts = [v for _, v in self.items()]
        return sum(parts) if parts else None

    def scaled(self, w: float) -> "LossBundle":
        return LossBundle(**{n: (v * w if v is not None else None) for n, v in
                             ((f.name, getattr(self, f.name)) for f in fields(self))})

    def __add__(self, other: "LossBundle") -> "LossBundle":
        out = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            out[f.name] = b if a is None else (a if b is None else a + b)
        return LossBundle(**out)

    def floats(self) -> dict[str, float]:
        return {n: float(v) for n, v in self.items()}

    def check_finite(self):
        for n, v in self.items():
            if not torch.isfinite(torch.as_tensor(v)).all():
                raise FloatingPointError(f"non-finite {n} loss: {float(v)}")


# ---------------------------------------------------------------------------
# box utilities


def boxes_tensor(boxes: Sequence[Box], dtype=torch.float32) -> torch.Tensor:
    if not boxes:
        return torch.zeros(0, 4, dtype=dtype)
    return torch.tensor([b.to_list() for b in boxes], dtype=dtype)


def encode_boxes(ref: torch.Tensor, gt: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    """Regression targets (dx, dy, dw, dh) taking ``ref`` boxes onto ``gt`` boxes."""
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack(
        [wx * (gx - rx) / rw, wy * (gy - ry) / rh, ww * torch.log(gw / rw), wh * torch.log(gh / rh)],
        dim=1,
    )


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=MAX_DELTA_LOG)
    dh = (deltas[:, 3] / wh).clamp(max=MAX_DELTA_LOG)
    cx = dx * rw + rx
    cy = dy * rh + ry
    w = torch.exp(dw) * rw
    h = torch.exp(dh) * rh
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return torch.stack(
        [
            boxes[:, 0].clamp(0, w - 1),
            boxes[:, 1].clamp(0, h - 1),
            boxes[:, 2].clamp(0, w - 1),
            boxes[:, 3].clamp(0, h - 1),
        ],
        dim=1,
    )


def make_anchors(config: DetectorConfig, feat_h: int, feat_w: int, dtype=torch.float32) -> torch.Tensor:
    """Anchors ordered (row, col, anchor) to match the flattened head outputs."""
    s = config.stride
    base = []
    for size in config.anchor_sizes:
        for r in config.anchor_ratios:
            w = size / math.sqrt(r)
            h = size * math.sqrt(r)
            base.append([-w / 2, -h / 2, w / 2, h / 2])
    base = torch.tensor(base, dtype=dtype)
    cy = torch.arange(feat_h, dtype=dtype) * s + (s - 1) / 2
    cx = torch.arange(feat_w, dtype=dtype) * s + (s - 1) / 2
    gy, gx = torch.meshgrid(cy, cx, indexing="ij")
    shifts = torch.stack([gx, gy, gx, gy], dim=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def assign_anchors(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    match_best: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Label anchors 1 (IoU >= pos_iou), 0 (IoU <= neg_iou) or -1 (ignored).

    With ``match_best`` the highest-IoU anchor of every ground truth is also positive.
    Returns ``(labels, matched_gt_index)``.
    """
    n = anchors.shape[0]
    if gt_boxes.shape[0] == 0:
        return torch.zeros(n, dtype=torch.long), torch.zeros(n, dtype=torch.long)
    ious = box_iou(anchors, gt_boxes)
    best, idx = ious.max(dim=1)
    labels = torch.full((n,), -1, dtype=torch.long)
    labels[best <= neg_iou] = 0
    labels[best >= pos_iou] = 1
    if match_best:
        per_gt = ious.max(dim=0).values
        for j in range(gt_boxes.shape[0]):
            if per_gt[j] > 0:
                hits = torch.nonzero(ious[:, j] == per_gt[j]).flatten()
                labels[hits] = 1
                idx[hits] = j
    return labels, idx


def _sample(labels: torch.Tensor, batch: int, pos_fraction: float, gen: torch.Generator):
    pos = torch.nonzero(labels >= 1).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    n_pos = min(pos.numel(), int(batch * pos_fraction))
    n_neg = min(neg.numel(), batch - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=gen)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=gen)[:n_neg]]
    return pos, neg


# ---------------------------------------------------------------------------
# network


class ActionDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        layers = []
        ch_in = 3
        for ch, s in zip(config.channels, config.strides):
            layers += [
                nn.Conv2d(ch_in, ch, 3, stride=s, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(ch, ch, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            ch_in = ch
        self.backbone = nn.Sequential(*layers)
        n_anchors = len(config.anchor_sizes) * len(config.anchor_ratios)
        self.rpn_conv = nn.Conv2d(ch_in, ch_in, 3, padding=1)
        self.rpn_obj = nn.Conv2d(ch_in, n_anchors, 1)
        self.rpn_reg = nn.Conv2d(ch_in, 4 * n_anchors, 1)
        p = config.pool_size
        self.fc1 = nn.Linear(ch_in * p * p, config.hidden)
        self.fc2 = nn.Linear(config.hidden, config.hidden)
        self.cls_score = nn.Linear(config.hidden, config.n_classes + 1)
        self.bbox_pred = nn.Linear(config.hidden, 4 * (config.n_classes + 1))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        for m in (self.rpn_obj, self.rpn_reg):
            nn.init.normal_(m.weight, std=0.01)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.bbox_pred.bias)

    def features(self, frame: torch.Tensor) -> torch.Tensor:
        return self.backbone((frame * 2 - 1)[None])[0]

    def rpn(self, feats: torch.Tensor):
        t = F.relu(self.rpn_conv(feats[None]))
        a = self.rpn_obj.out_channels
        obj = self.rpn_obj(t)[0].permute(1, 2, 0).reshape(-1)
        reg = self.rpn_reg(t)[0].permute(1, 2, 0).reshape(-1, a, 4).reshape(-1, 4)
        return obj, reg

    def proposals(self, anchors, obj, reg, h, w, post_nms: int) -> torch.Tensor:
        c = self.config
        with torch.no_grad():
            boxes = clip_boxes(decode_boxes(anchors, reg.detach()), h, w)
            scores = obj.detach()
            keep = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1)
            boxes, scores = boxes[keep], scores[keep]
            order = torch.argsort(scores, descending=True, stable=True)[: c.pre_nms_top]
            boxes, scores = boxes[order], scores[order]
            keep = nms(boxes.float(), scores.float(), c.proposal_nms)[:post_nms]
        return boxes[keep]

    def pool(self, feats: torch.Tensor, rois: torch.Tensor) -> torch.Tensor:
        s = self.config.stride
        # pixel x -> feature column whose center sits at x
        feat_boxes = (rois - (s - 1) / 2) / s
        grids = make_crop_grids(feat_boxes, (self.config.pool_size,) * 2)
        pooled = grid_sample(feats, grids)
        return pooled.permute(1, 0, 2, 3).flatten(1)

    def region_head(self, pooled: torch.Tensor):
        x = F.relu(self.fc1(pooled))
        x = F.relu(self.fc2(x))
        return self.cls_score(x), self.bbox_pred(x)


# ---------------------------------------------------------------------------
# training loss and inference


def detector_loss(
    model: ActionDetector,
    frame: torch.Tensor,
    gts: Sequence[ActionInstance],
    generator: torch.Generator | None = None,
) -> LossBundle:
    """The four two-stage detection losses on one (possibly anonymized) frame."""
    if not gts:
        raise ValueError("detector_loss needs at least one ground-truth action")
    c = model.config
    gen = generator if generator is not None else torch.Generator().manual_seed(0)
    dtype = frame.dtype
    _, h, w = frame.shape
    gt_boxes = boxes_tensor([g.box for g in gts], dtype)
    gt_cls = torch.tensor([g.action_class for g in gts], dtype=torch.long)
    if gt_cls.min() < 0 or gt_cls.max() >= c.n_classes:
        raise ValueError(f"action classes must lie in [0, {c.n_classes})")

    feats = model.features(frame)
    fh, fw = feats.shape[-2:]
    anchors = make_anchors(c, fh, fw, dtype)
    obj, reg = model.rpn(feats)

    labels, matched = assign_anchors(anchors, gt_boxes, c.rpn_pos_iou, c.rpn_neg_iou)
    pos, neg = _sample(labels, c.rpn_batch, c.rpn_pos_fraction, gen)
    sampled = torch.cat([pos, neg])
    n_sampled = max(sampled.numel(), 1)
    rpn_cls = F.binary_cross_entropy_with_logits(
        obj[sampled], (labels[sampled] > 0).to(dtype), reduction="sum"
    ) / n_sampled
    targets = encode_boxes(anchors[pos], gt_boxes[matched[pos]])
    rpn_reg = F.smooth_l1_loss(reg[pos], targets, beta=1.0 / 9, reduction="sum") / n_sampled

    rois = model.proposals(anchors, obj, reg, h, w, c.post_nms_train)
    rois = torch.cat([rois, gt_boxes])
    ious = box_iou(rois, gt_boxes)
    best, idx = ious.max(dim=1)
    roi_labels = torch.where(best >= c.roi_fg_iou, gt_cls[idx] + 1, torch.zeros_like(idx))
    fg, bg = _sample(roi_labels, c.roi_batch, c.roi_fg_fraction, gen)
    keep = torch.cat([fg, bg])
    rois, roi_labels, idx = rois[keep], roi_labels[keep], idx[keep]

    logits, deltas = model.region_head(model.pool(feats, rois))
    rcnn_cls = F.cross_entropy(logits, roi_labels)
    n_fg = fg.numel()
    deltas = deltas.reshape(-1, c.n_classes + 1, 4)
    fg_deltas = deltas[torch.arange(n_fg), roi_labels[:n_fg]]
    fg_targets = encode_boxes(rois[:n_fg], gt_boxes[idx[:n_fg]], RCNN_BOX_WEIGHTS)
    rcnn_reg = F.smooth_l1_loss(fg_deltas, fg_targets, beta=1.0, reduction="sum") / max(keep.numel(), 1)

    return LossBundle(rpn_cls=rpn_cls, rpn_reg=rpn_reg, rcnn_cls=rcnn_cls, rcnn_reg=rcnn_reg)


@torch.no_grad()
def detect(
    model: ActionDetector,
    frame: torch.Tensor,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_dets: int = 100,
) -> list[Detection]:
    """Class-wise NMS'd detections above ``score_thresh``, highest score first."""
    c = model.config
    was_training = model.training
    model.eval()
    try:
        _, h, w = frame.shape
        feats = model.features(frame)
        anchors = make_anchors(c, *feats.shape[-2:], dtype=frame.dtype)
        obj, reg = model.rpn(feats)
        rois = model.proposals(anchors, obj, reg, h, w, c.post_nms_test)
        if rois.numel() == 0:
            return []
        logits, deltas = model.region_head(model.pool(feats, rois))
    finally:
        model.train(was_training)
    probs = F.softmax(logits, dim=1)
    deltas = deltas.reshape(-1, c.n_classes + 1, 4)
    all_boxes, all_scores, all_cls = [], [], []
    for k in range(1, c.n_classes + 1):
        boxes = clip_boxes(decode_boxes(rois, deltas[:, k], RCNN_BOX_WEIGHTS), h, w)
        scores = probs[:, k]
        keep = (scores > score_thresh) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        all_boxes.append(boxes[keep])
        all_scores.append(scores[keep])
        all_cls.append(torch.full((int(keep.sum()),), k - 1, dtype=torch.long))
    return suppress(torch.cat(all_boxes), torch.cat(all_scores), torch.cat(all_cls), nms_iou, max_dets)


def suppress(
    boxes: torch.Tensor, scores: torch.Tensor, classes: torch.Tensor, nms_iou: float = 0.5, max_dets: int = 100
) -> list[Detection]:
    """Class-wise NMS over candidate boxes; survivors sorted by descending score."""
    if scores.numel() == 0:
        return []
    keep = batched_nms(boxes.float(), scores.float(), classes, nms_iou)
    keep = keep[torch.argsort(scores[keep], descending=True, stable=True)][:max_dets]
    return [
        Detection(Box(*(float(v) for v in boxes[i])), int(classes[i]), float(scores[i]))
        for i in keep.tolist()
    ]
