"""End-to-end model: detector + report decoder, training losses and inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from . import boxes as B
from .config import TrainConfig
from .datamodel import Case, ClassCatalog, ImageRecord, SupportSet, Vocabulary, detokenize
from .detector import Detection, LesionDetector, detection_loss, finetune_after_imprint
from .embeddings import LexicalEmbeddingTable, build_soft_labels, kl_semantic_loss
from .generator import DecodeConfig, ReportDecoder, decode_reports, fuse_batch, fuse_multiview, generation_loss


class ImageBank:
    """Loads manifest images resized to a square side, with boxes rescaled."""

    def __init__(self, image_size: int):
        self.image_size = image_size
        self._cache: dict[str, tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}

    def get(self, record: ImageRecord):
        key = record.resolved_path
        if key not in self._cache:
            with Image.open(key) as im:
                im = im.convert("RGB")
                if im.size != (self.image_size, self.image_size):
                    im = im.resize((self.image_size, self.image_size), Image.BILINEAR)
                pixels = torch.from_numpy(np.asarray(im, dtype=np.float32) / 255.0).permute(2, 0, 1).contiguous()
            sx, sy = self.image_size / record.width, self.image_size / record.height
            boxes = torch.tensor(
                [a.box.scale(sx, sy).as_tuple() for a in record.annotations], dtype=torch.float32
            ).reshape(-1, 4)
            labels = torch.tensor([a.class_id for a in record.annotations], dtype=torch.long)
            self._cache[key] = (pixels, boxes, labels)
        return self._cache[key]

    def case_images(self, case: Case) -> torch.Tensor:
        return torch.stack([self.get(im)[0] for im in case.images])


@dataclass
class GeneratedReport:
    case_id: str
    tokens: tuple[int, ...]
    text: str
    detections: list[Detection]
    fallback: bool = False

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "text": self.text,
            "tokens": list(self.tokens),
            "detections": [d.to_json() for d in self.detections],
            "fallback": self.fallback,
        }


class ReportModel(nn.Module):
    def __init__(self, cfg: TrainConfig, catalog: ClassCatalog, vocab: Vocabulary, table: LexicalEmbeddingTable):
        super().__init__()
        self.cfg = cfg
        self.catalog = catalog
        self.vocab = vocab
        self.table = table
        self.register_buffer("emb", table.tensor(torch.float32))
        self.register_buffer("soft_labels", torch.as_tensor(build_soft_labels(table), dtype=torch.float32))
        self.detector = LesionDetector(cfg, len(catalog), table.dim, catalog.seen_ids)
        self.decoder = ReportDecoder(
            len(vocab), cfg.feature_dim + table.dim, cfg.width, cfg.heads, cfg.layers, cfg.ff_width,
            cfg.max_len, cfg.dropout,
        )

    @property
    def cond_dim(self) -> int:
        return self.cfg.feature_dim + self.table.dim

    # -- training --

    def training_losses(self, cases: Sequence[Case], bank: ImageBank, gen: torch.Generator) -> dict:
        """Loss components for one batch of cases.

        Returns a dict with tensors ``det``, ``kl``, ``gen``, ``rpn``, the
        number of positive proposals ``n_boxes`` and diagnostics.
        """
        if not self.cfg.use_lesion_features:
            return self._global_feature_losses(cases, bank)
        cfg, det = self.cfg, self.detector
        images, gt_boxes, gt_labels, case_of_image = [], [], [], []
        for ci, case in enumerate(cases):
            for im in case.images:
                px, bx, lb = bank.get(im)
                images.append(px)
                gt_boxes.append(bx)
                gt_labels.append(lb)
                case_of_image.append(ci)
        x = torch.stack(images)
        h, w = x.shape[-2:]
        fm = det.extract_global_features(x)
        obj, deltas = det.rpn_forward(fm)
        anchors = det.anchors(fm.shape[-2], fm.shape[-1])
        l_rpn = det.rpn_loss(obj, deltas, anchors, gt_boxes, gen)
        with torch.no_grad():
            props = det.proposals_from(obj.detach(), deltas.detach(), anchors, w, h, cfg.train_proposals)
        roi_boxes, labels, targets, owner = [], [], [], []
        for i, ((pb, _), gb, gl) in enumerate(zip(props, gt_boxes, gt_labels)):
            cand = torch.cat([pb, gb])
            m = B.match_proposals(cand, gb, gl, cfg.roi_pos_iou)
            pos = torch.nonzero(m.positive).flatten()
            if len(pos) > cfg.roi_positives:
                pos = pos[torch.randperm(len(pos), generator=gen)[: cfg.roi_positives]]
            roi_boxes.append(cand[pos])
            labels.append(m.labels[pos])
            targets.append(m.targets[pos])
            owner.append(torch.full((len(pos),), case_of_image[i], dtype=torch.long))
        f_vis = det.roi_pool(fm, roi_boxes)
        labels, targets, owner = torch.cat(labels), torch.cat(targets), torch.cat(owner)
        seen = list(self.catalog.seen_ids)
        l_det, comps = detection_loss(
            f_vis, labels, targets, det.cls_weight, det.prj.weight, det.reg.weight, det.reg.bias,
            self.emb, cfg.tau, seen, reduction="sum",
        )
        l_kl = kl_semantic_loss(det.prj(f_vis), labels, self.emb, self.soft_labels, cfg.tau,
                                one_hot=not cfg.use_soft_label, reduction="sum")
        n_boxes = len(f_vis)
        if n_boxes:
            weight, arg = comps["probs"].max(dim=1)
            y_hat = torch.tensor(seen)[arg]
        else:
            weight, y_hat = f_vis.new_zeros(0), torch.zeros(0, dtype=torch.long)
        # cases without any positive proposal fall back to their whole first image
        missing = sorted(set(range(len(cases))) - set(owner.tolist()))
        if missing:
            first = [case_of_image.index(ci) for ci in missing]
            full = torch.tensor([[0.0, 0.0, float(w), float(h)]])
            fb = det.roi_pool(fm[first], [full] * len(first))
            _, _, p = det.probabilities(fb, self.emb, seen)
            f_vis = torch.cat([f_vis, fb])
            weight = torch.cat([weight, fb.new_full((len(first),), 1.0 / len(seen))])
            y_hat = torch.cat([y_hat, torch.tensor(seen)[p.argmax(dim=1)]])
            owner = torch.cat([owner, torch.tensor(missing, dtype=torch.long)])
        emb_rows = self.emb[y_hat] if cfg.use_multiview else f_vis.new_zeros((len(f_vis), self.table.dim))
        cond = fuse_batch(f_vis, weight, emb_rows, owner, len(cases))
        if cfg.use_multiview and cfg.view_dropout > 0 and self.training:
            keep = (torch.rand(len(cases), generator=gen) >= cfg.view_dropout).to(cond.dtype)
            cond = torch.cat([cond[:, :cfg.feature_dim] * keep[:, None], cond[:, cfg.feature_dim:]], dim=1)
        l_gen = generation_loss(cond, [c.report for c in cases], self.decoder)
        return {"det": l_det, "kl": l_kl, "gen": l_gen, "rpn": l_rpn, "n_boxes": n_boxes,
                "cls": comps["cls"].detach(), "reg": comps["reg"].detach()}

    def _global_feature_losses(self, cases, bank) -> dict:
        cond = torch.stack([self.global_conditioning(bank.case_images(c)) for c in cases])
        l_gen = generation_loss(cond, [c.report for c in cases], self.decoder)
        zero = l_gen * 0.0
        return {"det": zero, "kl": zero, "gen": l_gen, "rpn": zero, "n_boxes": 0, "cls": zero, "reg": zero}

    def global_conditioning(self, images: torch.Tensor) -> torch.Tensor:
        """Image-level baseline: mean of whole-image features, lexical part zero."""
        f = self.detector.global_features(images).mean(dim=0)
        return torch.cat([f, f.new_zeros(self.table.dim)])

    # -- inference --

    def active_ids(self, setting: str, novel_partition: str) -> tuple[int, ...]:
        return self.catalog.active_ids(setting, novel_partition)

    def support_features(self, support: SupportSet, bank: ImageBank) -> dict[int, torch.Tensor]:
        feats: dict[int, list[torch.Tensor]] = {}
        with torch.no_grad():
            for item in support.items:
                px, _, _ = bank.get(item.image)
                sx, sy = bank.image_size / item.image.width, bank.image_size / item.image.height
                bx = torch.tensor([b.scale(sx, sy).as_tuple() for b in item.boxes], dtype=torch.float32)
                feats.setdefault(item.class_id, []).append(self.detector.crop_features(px, bx))
        return {c: torch.cat(v) for c, v in sorted(feats.items())}

    def adapt(self, support: SupportSet, bank: ImageBank, active: Sequence[int], seed: int = 0) -> dict:
        """Imprint novel classifier rows from support crops, then fine-tune the rows."""
        self.eval()
        feats = self.support_features(support, bank)
        self.detector.imprint(feats)
        curve = finetune_after_imprint(self.detector, feats, self.emb, active, self.cfg.finetune_steps,
                                       self.cfg.finetune_lr, seed)
        return {"imprinted": sorted(feats), "finetune_loss": curve}

    @torch.no_grad()
    def conditioning(self, case: Case, bank: ImageBank, active: Sequence[int]):
        """(conditioning vector, detections, used_fallback) for one case."""
        images = bank.case_images(case)
        if not self.cfg.use_lesion_features:
            return self.global_conditioning(images), [], False
        dets = self.detector.detect(images, self.emb, active)
        fallback = not dets
        used = dets or [self.detector.whole_image_detection(images, self.emb, active)]
        return fuse_multiview(used, self.emb, self.cfg.use_multiview), dets, fallback

    @torch.no_grad()
    def generate(self, cases: Sequence[Case], bank: ImageBank, active: Sequence[int],
                 decode: DecodeConfig | None = None) -> list[GeneratedReport]:
        self.eval()
        decode = decode or DecodeConfig(self.cfg.decode_mode, self.cfg.beam_width, self.cfg.max_len)
        if not cases:
            return []
        conds, dets, fallbacks = zip(*(self.conditioning(c, bank, active) for c in cases))
        seqs = decode_reports(torch.stack(conds), self.decoder, decode)
        return [
            GeneratedReport(c.case_id, s.tokens, detokenize(s, self.vocab), list(d), fb)
            for c, s, d, fb in zip(cases, seqs, dets, fallbacks)
        ]
