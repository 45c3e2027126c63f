"""Lesion-centric feature extractor.

A small residual backbone (stride 16), an anchor-based proposal head, ROI
crop-and-resize with a two-layer head producing unit-norm visual features,
and three branches on those features: class-agnostic box regression, a
cosine classifier whose rows form an imprintable visual dictionary, and a
linear projection into the lexical embedding space.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from . import boxes as B
from .config import TrainConfig
from .embeddings import similarity_logits

STRIDE = 16
MIN_SIDE = 64
NORM_EPS = 1e-8


class ImprintError(ValueError):
    pass


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (elementwise)."""
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


def classify_visual(f_vis: torch.Tensor, cls_weight: torch.Tensor, tau: float, active: Sequence[int]) -> torch.Tensor:
    """softmax(tau * theta_cls[active] . f_vis); rows and features are unit norm."""
    active = list(active)
    if not active:
        raise ValueError("empty active class set")
    return torch.softmax(tau * f_vis @ cls_weight[active].T, dim=-1)


def fused_probabilities(f_vis, cls_weight, prj_weight, emb, tau, active, use_visual=True):
    """(visual, semantic, fused) probabilities over the active classes.

    The fused prediction averages the two branches; without a visual row for
    every active class only the semantic branch is used.
    """
    active = list(active)
    if not active:
        raise ValueError("empty active class set")
    p_sem = torch.softmax(similarity_logits(f_vis @ prj_weight.T, emb[active], tau), dim=-1)
    if not use_visual:
        return None, p_sem, p_sem
    p_vis = classify_visual(f_vis, cls_weight, tau, active)
    return p_vis, p_sem, 0.5 * (p_vis + p_sem)


def detection_loss(f_vis, labels, box_targets, cls_weight, prj_weight, reg_weight, reg_bias, emb, tau,
                   active, reduction: str = "mean"):
    """Cross-entropy of the averaged visual/semantic prediction plus smooth-L1
    box regression, over positive proposals only.

    ``labels`` are catalog class ids (all inside ``active``). Returns
    (loss, components) where components holds ``cls``, ``reg``, ``n_pos`` and
    the fused probabilities.
    """
    n = f_vis.shape[0]
    if n == 0:
        zero = f_vis.sum() * 0.0
        return zero, {"cls": zero, "reg": zero, "n_pos": 0, "empty": True, "probs": None}
    pos_of = {c: i for i, c in enumerate(active)}
    target = torch.tensor([pos_of[int(c)] for c in labels], dtype=torch.long)
    _, _, p = fused_probabilities(f_vis, cls_weight, prj_weight, emb, tau, active)
    nll = -torch.log(p.gather(1, target[:, None]).squeeze(1).clamp(min=1e-12))
    deltas = f_vis @ reg_weight.T + reg_bias
    reg = smooth_l1(deltas - box_targets).sum(dim=1)
    if reduction == "sum":
        l_cls, l_reg = nll.sum(), reg.sum()
    else:
        l_cls, l_reg = nll.mean(), reg.mean()
    return l_cls + l_reg, {"cls": l_cls, "reg": l_reg, "n_pos": n, "empty": False, "probs": p}


def imprint_row(features: torch.Tensor) -> torch.Tensor:
    """Normalized mean of normalized features."""
    f = F.normalize(features, dim=1, eps=NORM_EPS)
    mean = f.mean(dim=0)
    norm = mean.norm()
    if norm < NORM_EPS:
        raise ImprintError("mean support feature has near-zero norm")
    return mean / norm


@dataclass
class Detection:
    image_index: int
    box: tuple[float, float, float, float]
    class_id: int
    score: float
    probs: np.ndarray  # fused prediction over ``active``
    active: tuple[int, ...]
    f_vis: torch.Tensor
    f_sem: torch.Tensor
    objectness: float = 1.0

    def to_json(self) -> dict:
        return {
            "image_index": self.image_index,
            "box": [round(float(v), 3) for v in self.box],
            "class_id": self.class_id,
            "score": round(float(self.score), 6),
            "prob_vector": {str(c): round(float(p), 6) for c, p in zip(self.active, self.probs)},
        }


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5, score_threshold: float = 0.0) -> list[Detection]:
    """Per-class greedy NMS over detections of one image, highest score first."""
    dets = [d for d in detections if d.score >= score_threshold]
    if not dets:
        return []
    boxes = torch.tensor([d.box for d in dets], dtype=torch.float64)
    scores = torch.tensor([d.score for d in dets], dtype=torch.float64)
    classes = torch.tensor([d.class_id for d in dets])
    return [dets[i] for i in B.batched_nms(boxes, scores, classes, iou_threshold).tolist()]


# -- network ------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = nn.GroupNorm(min(8, cout), cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.GroupNorm(min(8, cout), cout))

    def forward(self, x):
        y = F.relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        return F.relu(y + (x if self.short is None else self.short(x)))


class Backbone(nn.Module):
    """Four stride-2 residual stages: output stride 16."""

    def __init__(self, channels=(16, 32, 64, 64), blocks_per_stage=1):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("backbone needs four stages")
        layers, cin = [], 3
        for c in channels:
            layers.append(ResidualBlock(cin, c, 2))
            layers.extend(ResidualBlock(c, c, 1) for _ in range(blocks_per_stage - 1))
            cin = c
        self.body = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.body(x)


def make_anchors(h: int, w: int, size: float, ratios: Sequence[float], stride: int = STRIDE) -> torch.Tensor:
    """(h*w*A, 4) anchors ordered by (row, col, ratio)."""
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    shapes = torch.tensor([[size / r**0.5, size * r**0.5] for r in ratios])  # (A, [w, h])
    cx, cy = cx.reshape(-1, 1), cy.reshape(-1, 1)
    half_w, half_h = shapes[:, 0] / 2, shapes[:, 1] / 2
    a = torch.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], dim=-1)
    return a.reshape(-1, 4)


class LesionDetector(nn.Module):
    def __init__(self, cfg: TrainConfig, n_classes: int, embed_dim: int, seen_ids: Sequence[int]):
        super().__init__()
        self.cfg = cfg
        self.n_classes = n_classes
        self.backbone = Backbone(cfg.channels, cfg.blocks_per_stage)
        c = self.backbone.out_channels
        n_anchor = len(cfg.anchor_ratios)
        self.rpn_conv = nn.Conv2d(c, c, 3, 1, 1)
        self.rpn_obj = nn.Conv2d(c, n_anchor, 1)
        self.rpn_delta = nn.Conv2d(c, 4 * n_anchor, 1)
        nn.init.normal_(self.rpn_obj.weight, std=0.01)
        nn.init.constant_(self.rpn_obj.bias, -2.0)
        nn.init.zeros_(self.rpn_delta.weight)
        nn.init.zeros_(self.rpn_delta.bias)
        self.roi_head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(c * cfg.roi_size**2, cfg.roi_hidden),
            nn.ReLU(),
            nn.Linear(cfg.roi_hidden, cfg.feature_dim),
        )
        self.cls_weight = nn.Parameter(F.normalize(torch.randn(n_classes, cfg.feature_dim), dim=1))
        self.prj = nn.Linear(cfg.feature_dim, embed_dim, bias=False)
        self.reg = nn.Linear(cfg.feature_dim, 4)
        nn.init.normal_(self.reg.weight, std=0.01)
        nn.init.zeros_(self.reg.bias)
        known = torch.zeros(n_classes, dtype=torch.bool)
        known[list(seen_ids)] = True
        self.register_buffer("cls_known", known)

    # -- feature extraction --

    @staticmethod
    def normalize_pixels(x: torch.Tensor) -> torch.Tensor:
        return (x - 0.25) / 0.25

    def extract_global_features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) pixels in [0, 1] -> (B, C, H/16, W/16)."""
        if images.dim() == 3:
            images = images[None]
        h, w = images.shape[-2:]
        if min(h, w) < MIN_SIDE:
            raise ValueError(f"image side must be >= {MIN_SIDE}, got {h}x{w}")
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"image sides must be multiples of {STRIDE}")
        return self.backbone(self.normalize_pixels(images))

    def _head(self, pooled: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.roi_head(pooled), dim=1, eps=NORM_EPS)

    def roi_pool(self, fm: torch.Tensor, boxes: Sequence[torch.Tensor]) -> torch.Tensor:
        """Crop-and-resize each box (image pixels) to roi_size^2, then the head.

        ``fm`` is (B, C, h, w); ``boxes[i]`` are the boxes of image i.
        """
        for b in boxes:
            if len(b) and (B.box_area(b) < 1.0).any():
                raise ValueError("degenerate box (area < 1 px^2)")
        rois = [b.to(fm.dtype) for b in boxes]
        if sum(len(b) for b in rois) == 0:
            return fm.new_zeros((0, self.cfg.feature_dim))
        pooled = roi_align(fm, rois, self.cfg.roi_size, spatial_scale=1.0 / STRIDE, sampling_ratio=1, aligned=True)
        return self._head(pooled)

    def pool_full_map(self, fm: torch.Tensor) -> torch.Tensor:
        """Whole-map features (no ROI pooling): bilinear resize to roi_size^2, then the head."""
        pooled = F.interpolate(fm, size=(self.cfg.roi_size, self.cfg.roi_size), mode="bilinear", align_corners=False)
        return self._head(pooled)

    def global_features(self, images: torch.Tensor) -> torch.Tensor:
        return self.pool_full_map(self.extract_global_features(images))

    def crop_features(self, image: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """Crop annotated boxes from one image, resize each crop and run the global extractor."""
        size = self.cfg.crop_size
        crops = roi_align(image[None], [boxes.to(image.dtype)], size, spatial_scale=1.0, sampling_ratio=2, aligned=True)
        return self.global_features(crops)

    def semantic_features(self, f_vis: torch.Tensor) -> torch.Tensor:
        return self.prj(f_vis)

    # -- proposals --

    def anchors(self, h: int, w: int) -> torch.Tensor:
        return make_anchors(h, w, self.cfg.anchor_size * self.cfg.image_size, self.cfg.anchor_ratios)

    def rpn_forward(self, fm: torch.Tensor):
        t = F.relu(self.rpn_conv(fm))
        n = fm.shape[0]
        obj = self.rpn_obj(t).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.rpn_delta(t).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return obj, deltas

    def proposals_from(self, obj, deltas, anchors, width, height, top_n):
        """Decode, clip, NMS and keep top_n per image. Returns list of (boxes, objectness)."""
        out = []
        for i in range(obj.shape[0]):
            boxes = B.clip_boxes(B.decode(anchors, deltas[i], B.RPN_DELTA_WEIGHTS), width, height)
            scores = torch.sigmoid(obj[i])
            ok = B.box_area(boxes) >= 4.0
            boxes, scores = boxes[ok], scores[ok]
            pre = torch.argsort(-scores, stable=True)[: 4 * top_n]
            boxes, scores = boxes[pre], scores[pre]
            keep = B.nms_indices(boxes, scores, self.cfg.proposal_nms)[:top_n]
            out.append((boxes[keep], scores[keep]))
        return out

    def propose_regions(self, fm: torch.Tensor, max_proposals: int, width: int, height: int):
        obj, deltas = self.rpn_forward(fm)
        anchors = self.anchors(fm.shape[-2], fm.shape[-1]).to(fm.dtype)
        return self.proposals_from(obj, deltas, anchors, width, height, max_proposals)

    def rpn_loss(self, obj, deltas, anchors, gt_boxes: Sequence[torch.Tensor], generator: torch.Generator):
        cfg = self.cfg
        total = obj.sum() * 0.0
        for i, gt in enumerate(gt_boxes):
            labels = torch.zeros(len(anchors))
            labels.fill_(-1)
            if len(gt):
                iou = B.box_iou(anchors, gt)
                best, idx = iou.max(dim=1)
                labels[best < cfg.rpn_neg_iou] = 0
                labels[best >= cfg.rpn_pos_iou] = 1
                labels[iou.argmax(dim=0)] = 1
            else:
                idx = torch.zeros(len(anchors), dtype=torch.long)
                labels.fill_(0)
            pos = torch.nonzero(labels == 1).flatten()
            neg = torch.nonzero(labels == 0).flatten()
            n_pos = min(len(pos), cfg.rpn_batch // 2)
            pos = pos[torch.randperm(len(pos), generator=generator)[:n_pos]]
            neg = neg[torch.randperm(len(neg), generator=generator)[: cfg.rpn_batch - n_pos]]
            sampled = torch.cat([pos, neg])
            target = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]).to(obj.dtype)
            l_obj = F.binary_cross_entropy_with_logits(obj[i, sampled], target, reduction="sum")
            l_reg = obj.sum() * 0.0
            if len(pos):
                t = B.encode(anchors[pos], gt[idx[pos]], B.RPN_DELTA_WEIGHTS)
                l_reg = smooth_l1(deltas[i, pos] - t).sum()
            total = total + (l_obj + l_reg) / max(len(sampled), 1)
        return total / max(len(gt_boxes), 1)

    # -- classification --

    def probabilities(self, f_vis: torch.Tensor, emb: torch.Tensor, active: Sequence[int], use_visual: bool = True):
        use_visual = use_visual and bool(self.cls_known[list(active)].all())
        return fused_probabilities(f_vis, self.cls_weight, self.prj.weight, emb, self.cfg.tau, active, use_visual)

    @torch.no_grad()
    def renormalize(self):
        self.cls_weight.copy_(F.normalize(self.cls_weight, dim=1, eps=NORM_EPS))

    @torch.no_grad()
    def imprint(self, features_by_class: dict[int, torch.Tensor]) -> None:
        """Replace the classifier row of each class with its imprinted weight."""
        rows = {}
        for cid, feats in features_by_class.items():
            if len(feats) == 0:
                raise ImprintError(f"class {cid}: no support features")
            try:
                rows[cid] = imprint_row(feats.to(self.cls_weight.dtype))
            except ImprintError as e:
                raise ImprintError(f"class {cid}: {e}") from e
        for cid, row in rows.items():
            self.cls_weight[cid] = row
            self.cls_known[cid] = True

    # -- inference --

    @torch.no_grad()
    def detect(self, images: torch.Tensor, emb: torch.Tensor, active: Sequence[int], use_visual: bool = True):
        """Detections for each image of one case; per-class NMS per image."""
        cfg = self.cfg
        active = tuple(active)
        h, w = images.shape[-2:]
        fm = self.extract_global_features(images)
        props = self.propose_regions(fm, cfg.test_proposals, w, h)
        out = []
        for i, (boxes, objness) in enumerate(props):
            keep = objness >= cfg.objectness_threshold
            boxes, objness = boxes[keep], objness[keep]
            if len(boxes) == 0:
                continue
            f_vis = self.roi_pool(fm[i:i + 1], [boxes])
            refined = B.clip_boxes(B.decode(boxes, self.reg(f_vis), B.ROI_DELTA_WEIGHTS), w, h)
            valid = B.box_area(refined) >= 1.0
            refined = torch.where(valid[:, None], refined, boxes)
            _, _, p = self.probabilities(f_vis, emb, active, use_visual)
            f_sem = self.prj(f_vis)
            score, arg = p.max(dim=1)
            dets = [
                Detection(i, tuple(refined[k].tolist()), active[int(arg[k])], float(score[k]),
                          p[k].numpy().copy(), active, f_vis[k], f_sem[k], float(objness[k]))
                for k in range(len(refined))
            ]
            out.extend(nms(dets, cfg.nms_iou, cfg.score_threshold))
        return out

    @torch.no_grad()
    def whole_image_detection(self, images: torch.Tensor, emb: torch.Tensor, active: Sequence[int],
                              use_visual: bool = True) -> Detection:
        """Fallback pseudo-detection over the full first image with weight 1/|active|."""
        active = tuple(active)
        h, w = images.shape[-2:]
        fm = self.extract_global_features(images[:1])
        box = torch.tensor([[0.0, 0.0, float(w), float(h)]])
        f_vis = self.roi_pool(fm, [box])
        _, _, p = self.probabilities(f_vis, emb, active, use_visual)
        return Detection(0, (0.0, 0.0, float(w), float(h)), active[int(p[0].argmax())], 1.0 / len(active),
                         p[0].numpy().copy(), active, f_vis[0], self.prj(f_vis)[0], 0.0)


def finetune_after_imprint(detector: LesionDetector, support_features: dict[int, torch.Tensor], emb: torch.Tensor,
                           active: Sequence[int], steps: int = 100, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """SGD on the classifier rows with the fused cross-entropy over the active
    classes on support crop features; every row is renormalized after each
    step. Rows outside the active set receive no gradient. Returns the loss
    curve."""
    torch.manual_seed(seed)
    active = list(active)
    feats = torch.cat([f for f in support_features.values()]).detach()
    labels = torch.cat([torch.full((len(f),), c) for c, f in support_features.items()])
    if steps <= 0 or len(feats) == 0:
        return []
    opt = torch.optim.SGD([detector.cls_weight], lr=lr, momentum=0.9)
    pos_of = {c: i for i, c in enumerate(active)}
    target = torch.tensor([pos_of[int(c)] for c in labels])
    losses = []
    prj = detector.prj.weight.detach()
    for _ in range(steps):
        _, _, p = fused_probabilities(feats, detector.cls_weight, prj, emb, detector.cfg.tau, active)
        loss = F.nll_loss(torch.log(p.clamp(min=1e-12)), target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        detector.renormalize()
        losses.append(float(loss.detach()))
    return losses
