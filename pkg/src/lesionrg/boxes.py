"""Box arithmetic shared by the detector: IoU, delta coding, NMS, matching."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

ROI_DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
RPN_DELTA_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
_CLAMP = math.log(1000.0 / 16)


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of (N, 4) and (M, 4) xyxy boxes."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def clip_boxes(b: torch.Tensor, width: float, height: float) -> torch.Tensor:
    x = b[:, 0::2].clamp(0, width)
    y = b[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def encode(ref: torch.Tensor, target: torch.Tensor, weights=ROI_DELTA_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    pw, ph = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    px, py = ref[:, 0] + 0.5 * pw, ref[:, 1] + 0.5 * ph
    gw, gh = target[:, 2] - target[:, 0], target[:, 3] - target[:, 1]
    gx, gy = target[:, 0] + 0.5 * gw, target[:, 1] + 0.5 * gh
    return torch.stack([
        wx * (gx - px) / pw,
        wy * (gy - py) / ph,
        ww * torch.log(gw / pw),
        wh * torch.log(gh / ph),
    ], dim=1)


def decode(ref: torch.Tensor, deltas: torch.Tensor, weights=ROI_DELTA_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    pw, ph = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    px, py = ref[:, 0] + 0.5 * pw, ref[:, 1] + 0.5 * ph
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_CLAMP)
    dh = (deltas[:, 3] / wh).clamp(max=_CLAMP)
    cx, cy = px + dx * pw, py + dy * ph
    w, h = pw * torch.exp(dw), ph * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def nms_indices(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS; keeps the highest score and drops boxes with IoU > threshold.

    Equal scores are visited in input order. Returns kept indices, best first.
    """
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    order = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))
    order = torch.tensor(order, dtype=torch.long)
    iou = box_iou(boxes, boxes)
    suppressed = torch.zeros(len(scores), dtype=torch.bool)
    keep = []
    for i in order.tolist():
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_threshold
    return torch.tensor(keep, dtype=torch.long)


def batched_nms(boxes: torch.Tensor, scores: torch.Tensor, classes: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Per-class NMS; returns kept indices sorted by score (ties by index)."""
    keep = []
    for c in torch.unique(classes).tolist():
        idx = torch.nonzero(classes == c).flatten()
        keep.extend(idx[nms_indices(boxes[idx], scores[idx], iou_threshold)].tolist())
    keep.sort(key=lambda i: (-float(scores[i]), i))
    return torch.tensor(keep, dtype=torch.long)


@dataclass
class MatchResult:
    gt_index: torch.Tensor  # (N,) long, -1 for background
    labels: torch.Tensor  # (N,) long, -1 for background
    targets: torch.Tensor  # (N, 4) regression targets, zero for background
    ious: torch.Tensor  # (N,) best IoU

    @property
    def positive(self) -> torch.Tensor:
        return self.gt_index >= 0


def match_proposals(proposals: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                    iou_threshold: float = 0.5, weights=ROI_DELTA_WEIGHTS) -> MatchResult:
    """Assign each proposal to its highest-IoU ground-truth box (lowest index on ties)
    when that IoU reaches the threshold, else to background."""
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    n = proposals.shape[0]
    if gt_boxes.numel() == 0 or n == 0:
        return MatchResult(
            torch.full((n,), -1, dtype=torch.long), torch.full((n,), -1, dtype=torch.long),
            proposals.new_zeros((n, 4)), proposals.new_zeros((n,)),
        )
    iou = box_iou(proposals, gt_boxes)
    best, idx = iou.max(dim=1)
    pos = best >= iou_threshold
    gt_index = torch.where(pos, idx, torch.full_like(idx, -1))
    labels = torch.where(pos, gt_labels[idx], torch.full_like(idx, -1))
    targets = proposals.new_zeros((n, 4))
    if pos.any():
        targets[pos] = encode(proposals[pos], gt_boxes[idx[pos]], weights)
    return MatchResult(gt_index, labels, targets, best)
