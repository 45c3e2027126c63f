"""Acceptance suite: eight criteria, each printed as one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the per-criterion
lines appear in the "acceptance criteria" summary section) or
``python tests/test_acceptance.py``.
"""
import math
import os
import random
import sys
import time
import warnings

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from lesionrg import metrics as M
from lesionrg.config import TrainConfig
from lesionrg.datamodel import (
    BOS, EOS, TEST_NOVEL, VAL_NOVEL, EpisodeSpec, TokenSequence, load_manifest, make_splits, sample_episode,
)
from lesionrg.detector import (
    Detection, LesionDetector, classify_visual, detection_loss, imprint_row, nms, smooth_l1,
)
from lesionrg.embeddings import (
    LexicalEmbeddingTable, build_embedding_table, build_soft_labels, cosine_sim, kl_semantic_loss,
)
from lesionrg.generator import ReportDecoder, fuse_multiview, generation_loss, greedy_decode
from lesionrg.harness import ABLATION_LADDER, DESK_LADDER_CONFIG, run_ablation, total_loss, train
from lesionrg.datamodel import ClassCatalog, ClassInfo
from lesionrg.boxes import match_proposals
from lesionrg.pipeline import ImageBank
from lesionrg.synthgen import RenderParams, default_catalog, generate_corpus

sys.path.insert(0, os.path.dirname(__file__))
import oracles  # noqa: E402


class Criterion:
    """Times a criterion and records its PASS/FAIL line.

    An exception inside the block, or exceeding the runtime budget, fails it.
    """

    def __init__(self, record_property, number, title, limit_s):
        self.record = record_property
        self.number, self.title, self.limit = number, title, limit_s
        self.detail = ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        over = elapsed > self.limit
        ok = exc_type is None and not over
        why = ""
        if exc_type is not None:
            why = f" [{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}]"
        elif over:
            why = f" [runtime budget {self.limit:.0f}s exceeded]"
        line = (f"AC{self.number} {'PASS' if ok else 'FAIL'} {self.title}: {self.detail}"
                f" ({elapsed:.1f}s / {self.limit:.0f}s){why}")
        self.record("acceptance", line)
        print(line)
        if exc_type is None and over:
            raise AssertionError(f"AC{self.number} exceeded its runtime budget: {elapsed:.1f}s > {self.limit}s")
        return False


@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    """The default synthetic corpus: 8 seen / 2 validation-novel / 3 test-novel classes, 200 cases."""
    out = tmp_path_factory.mktemp("default_corpus")
    manifest = generate_corpus(default_catalog(), RenderParams(seed=0), 200, str(out))
    return load_manifest(manifest)


# -- AC1 ----------------------------------------------------------------------------

def test_ac1_formula_suite(record_property):
    with Criterion(record_property, 1, "formula suite", 10) as c:
        tol = 1e-6
        # smooth L1
        for x, y in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)]:
            assert abs(smooth_l1(x) - y) < tol
        # cosine similarity
        for u, v, y in [([1, 0], [1, 0], 1.0), ([1, 0], [0, 1], 0.0), ([1, 1], [1, 0], 1 / math.sqrt(2))]:
            assert abs(cosine_sim(u, v) - y) < tol
        # attribute-derived table: {ring, bright} vs {ring, dim} -> 0.5
        cat = ClassCatalog((ClassInfo(0, "a", ("ring", "bright"), "seen"), ClassInfo(1, "b", ("ring", "dim"), "seen"),
                            ClassInfo(2, "c", ("ring",), "seen"), ClassInfo(3, "d", ("ring",), "seen")))
        table = build_embedding_table(cat)
        assert abs(cosine_sim(table.weights[0], table.weights[1]) - 0.5) < tol
        assert abs(cosine_sim(table.weights[2], table.weights[3]) - 1.0) < tol
        # soft-label matrix
        ortho = LexicalEmbeddingTable(np.eye(2), ("x", "y"))
        assert np.abs(build_soft_labels(ortho) - np.eye(2)).max() < tol
        same = LexicalEmbeddingTable(np.ones((3, 4)), ("x", "y", "z"))
        assert np.abs(build_soft_labels(same) - 1.0).max() < tol
        default = build_embedding_table(default_catalog())
        oracle = np.array(oracles.soft_label_matrix(default.weights.tolist()))
        assert np.abs(build_soft_labels(default) - oracle).max() < tol
        # total loss
        for comps, n, y in [((1.0, 0.5, 0.3), 1, 1.8), ((0.0, 0.0, 0.0), 1, 0.0), ((2.0, 1.0, 0.5), 4, 1.25)]:
            got = total_loss(dict(zip(("det", "kl", "gen"), comps)), n)
            assert abs(float(got) - y) < tol
        # multi-view fusion
        emb = torch.tensor([[0.0, 0.0, 0.0], [0.6, 0.0, 0.8]], dtype=torch.float64)
        f = torch.tensor([0.5, -0.5, 0.5, 0.5], dtype=torch.float64)
        det = Detection(0, (0, 0, 1, 1), 1, 0.8, np.array([0.2, 0.8]), (0, 1), f, torch.zeros(3))
        out = fuse_multiview([det], emb)
        assert out.shape == (7,)
        assert (out - 0.8 * torch.cat([f, emb[1]])).abs().max() < tol
        half = Detection(0, (0, 0, 1, 1), 1, 0.5, np.array([0.5, 0.5]), (0, 1), f, torch.zeros(3))
        assert (fuse_multiview([half, half], emb) - 0.5 * torch.cat([f, emb[1]])).abs().max() < tol
        # imprinting
        f1 = torch.tensor([[0.6, 0.8, 0.0]], dtype=torch.float64)
        assert (imprint_row(f1) - f1[0]).abs().max() < tol
        e1, e2 = torch.eye(3, dtype=torch.float64)[:2]
        assert (imprint_row(torch.stack([e1, e2])) - (e1 + e2) / math.sqrt(2)).abs().max() < tol
        with pytest.raises(ValueError):
            imprint_row(torch.stack([e1, -e1]))
        # KL and fused cross-entropy worked examples
        t = np.array([0.7, 0.3])
        assert abs(float(np.sum(t * np.log(t / 0.5))) - 0.08228) < 1e-5
        c.detail = "smooth_l1, cosine_sim, soft labels, total_loss, fuse_multiview, imprint_row match to 1e-6"


# -- AC2 ----------------------------------------------------------------------------

def _rel_err(fn, tensors):
    """Max over tensors of ||analytic - numeric|| / max(||analytic||, ||numeric||)."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = t.data.reshape(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                numeric[i] = oracles.central_difference(fn, flat, i)
        scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
        worst = max(worst, float((analytic - numeric).norm()) / scale)
    return worst


def test_ac2_gradient_checks(record_property):
    with Criterion(record_property, 2, "gradient checks (float64, 5 seeds each)", 120) as c:
        worst = {"detection_loss": 0.0, "kl_semantic_loss": 0.0, "generation_loss": 0.0}
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)

            def rnd(*shape):
                return torch.randn(*shape, generator=g, dtype=torch.float64).requires_grad_()

            # detection loss over every parameter group
            n, d, k, e = 5, 6, 4, 3
            f_vis, w, prj, reg_w, reg_b = rnd(n, d), rnd(k, d), rnd(e, d), rnd(4, d), rnd(4)
            with torch.no_grad():
                f_vis.div_(f_vis.norm(dim=1, keepdim=True))
                w.div_(w.norm(dim=1, keepdim=True))
                w.mul_(0.5)
            emb = F.normalize(torch.randn(k, e, generator=g, dtype=torch.float64), dim=1)
            labels = torch.randint(0, k, (n,), generator=g)
            targets = torch.randn(n, 4, generator=g, dtype=torch.float64)
            worst["detection_loss"] = max(worst["detection_loss"], _rel_err(
                lambda: detection_loss(f_vis, labels, targets, w, prj, reg_w, reg_b, emb, 10.0, list(range(k)))[0],
                [f_vis, w, prj, reg_w, reg_b]))

            # KL semantic alignment w.r.t. F_sem
            f_sem = rnd(6, e)
            table = LexicalEmbeddingTable(emb.numpy(), tuple("abcd"))
            soft = torch.as_tensor(build_soft_labels(table))
            y = torch.randint(0, k, (6,), generator=g)
            worst["kl_semantic_loss"] = max(worst["kl_semantic_loss"], _rel_err(
                lambda: kl_semantic_loss(f_sem, y, emb, soft, 10.0), [f_sem]))

            # generation loss w.r.t. the conditioning and decoder parameters
            torch.manual_seed(seed)
            dec = ReportDecoder(9, 5, width=8, heads=2, layers=1, ff_width=12, max_len=8, dropout=0.0)
            dec = dec.double().eval()
            cond = rnd(2, 5)
            seqs = [TokenSequence((BOS, 4, 5, 6, EOS)), TokenSequence((BOS, 7, EOS))]
            params = [cond, dec.cond.weight, dec.out.bias, dec.tok.weight]
            worst["generation_loss"] = max(worst["generation_loss"], _rel_err(
                lambda: generation_loss(cond, seqs, dec), params))
        c.detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        assert all(v < 1e-4 for v in worst.values()), worst


# -- AC3 ----------------------------------------------------------------------------

def test_ac3_imprinting_contract(record_property, default_corpus):
    with Criterion(record_property, 3, "imprinting contract", 30) as c:
        cat, cases, _ = default_corpus
        cfg = TrainConfig()
        table = build_embedding_table(cat)
        torch.manual_seed(0)
        det = LesionDetector(cfg, len(cat), table.dim, cat.seen_ids).eval()
        bank = ImageBank(cfg.image_size)
        _, _, test = make_splits(cat, cases)
        checked = 0
        for seed in range(3):
            support, _ = sample_episode(EpisodeSpec(1, "test-novel", seed), test, cat)
            for item in support.items:
                px, _, _ = bank.get(item.image)
                s = cfg.image_size / item.image.width
                boxes = torch.tensor([item.boxes[0].scale(s, s).as_tuple()])
                with torch.no_grad():
                    crop = det.crop_features(px, boxes)
                det.imprint({item.class_id: crop})
                p = classify_visual(crop, det.cls_weight.detach(), 10.0, range(len(cat)))
                assert int(p.argmax()) == item.class_id
                row = det.cls_weight.detach()[item.class_id].clone()
                det.imprint({item.class_id: crop})
                assert torch.equal(det.cls_weight.detach()[item.class_id], row), "not idempotent"
                checked += 1
        # positive-scale invariance: bitwise for power-of-two scales, to rounding otherwise
        g = torch.Generator().manual_seed(0)
        feats = torch.randn(5, 16, generator=g, dtype=torch.float64)
        base = imprint_row(feats)
        for s in (0.25, 2.0, 1024.0):
            assert torch.equal(imprint_row(feats * s), base)
        for s in (0.3, 7.1, 1e3):
            assert float((imprint_row(feats * s) - base).abs().max()) <= 4 * np.finfo(np.float64).eps
        c.detail = f"{checked} one-shot imprints ranked first among {len(cat)} classes; idempotent; scale-invariant"


# -- AC4 ----------------------------------------------------------------------------

def test_ac4_metric_oracles(record_property):
    with Criterion(record_property, 4, "metric oracles", 60) as c:
        words = ["a", "b", "c", "d", "lesion", "lesions", "observed", "bright", "dim", "."]
        rng = random.Random(0)
        corpus = []
        for _ in range(20):
            hyp = [rng.choice(words) for _ in range(rng.randint(1, 8))]
            ref = [rng.choice(words) for _ in range(rng.randint(1, 8))]
            corpus.append((hyp, [ref]))
        pairs = [M.EvalPair.of(h, r) for h, r in corpus]
        worst = 0.0
        for n in range(1, 5):
            worst = max(worst, abs(M.bleu_n(pairs, n) - oracles.bleu(corpus, n)))
        worst = max(worst, abs(M.rouge_l(pairs) - oracles.rouge_l(corpus)))
        worst = max(worst, abs(M.meteor_lite(pairs) - oracles.meteor(corpus)))
        worst = max(worst, abs(M.cider(pairs) - oracles.cider_d(corpus)))
        assert worst < 1e-6, worst
        ident = [M.EvalPair.of(s.split(), [s.split()]) for s in
                 ("a dim lesion is observed .", "a bright round lesion .", "no abnormality observed .")]
        rep = M.evaluate_corpus(ident)
        assert abs(rep.bleu4 - 1) < 1e-9 and abs(rep.rouge_l - 1) < 1e-9 and abs(rep.cider - 10) < 1e-9
        c.detail = f"20 pairs, max |impl - oracle| = {worst:.1e}; identity BLEU 1, ROUGE-L 1, CIDEr 10"


# -- AC5 ----------------------------------------------------------------------------

def _scene(rng):
    n = rng.integers(1, 25)
    centers = rng.uniform(10, 118, size=(rng.integers(1, 5), 2))
    dets = []
    for _ in range(n):
        cx, cy = centers[rng.integers(len(centers))] + rng.normal(0, 4, 2)
        w, h = rng.uniform(6, 30, 2)
        box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        cls = int(rng.integers(0, 3))
        score = float(rng.uniform(0.05, 1))
        dets.append(Detection(0, box, cls, score, np.array([score]), (cls,), torch.zeros(1), torch.zeros(1)))
    return dets


def test_ac5_nms_and_matching(record_property):
    with Criterion(record_property, 5, "NMS / matching contracts", 60) as c:
        rng = np.random.default_rng(0)
        kept_total = 0
        for _ in range(1000):
            kept = nms(_scene(rng), 0.5)
            kept_total += len(kept)
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    if a.class_id == b.class_id:
                        assert oracles.iou(a.box, b.box) <= 0.5
        for _ in range(200):
            props = [d.box for d in _scene(rng)]
            gts = [d.box for d in _scene(rng)][:5]
            m = match_proposals(torch.tensor(props, dtype=torch.float64), torch.tensor(gts, dtype=torch.float64),
                                torch.arange(len(gts)), 0.5)
            assert m.gt_index.tolist() == oracles.match_bruteforce(props, gts, 0.5)
        c.detail = f"1000 scenes ({kept_total} kept boxes) without a same-class IoU > 0.5 pair; 200 matchings exact"


# -- AC6 ----------------------------------------------------------------------------

OVERFIT_CONFIG = dict(epochs=200, lr_decay_epochs=(150,), dropout=0.0)


def test_ac6_overfit_sanity(record_property, default_corpus):
    with Criterion(record_property, 6, "overfit sanity (10 cases)", 600) as c:
        cat, cases, vocab = default_corpus
        train_cases, _, _ = make_splits(cat, cases)
        subset = train_cases[:10]
        cfg = TrainConfig(**OVERFIT_CONFIG)
        table = build_embedding_table(cat)
        bank = ImageBank(cfg.image_size)
        model, _ = train(cfg, subset, cat, vocab, table, bank=bank)
        seen = cat.seen_ids
        with torch.no_grad():
            cond = torch.stack([model.conditioning(case, bank, seen)[0] for case in subset])
            ce = float(generation_loss(cond, [case.report for case in subset], model.decoder))
            decoded = greedy_decode(cond, model.decoder, cfg.max_len)
        verbatim = sum(d == case.report for d, case in zip(decoded, subset))
        c.detail = f"per-token CE {ce:.4f} (< 0.1), verbatim {verbatim}/10 (>= 8)"
        assert ce < 0.1 and verbatim >= 8


# -- AC7 ----------------------------------------------------------------------------

def test_ac7_directional_ablation(record_property, default_corpus, tmp_path):
    with Criterion(record_property, 7, "directional ablation ordering (test-novel BLEU-1, 3 seeds)", 1800) as c:
        cat, cases, vocab = default_corpus
        names = ("ablation-2", "ablation-3", "ablation-4", "ours")
        rows = run_ablation({n: ABLATION_LADDER[n] for n in names}, DESK_LADDER_CONFIG, cat, cases, vocab,
                            seeds=(0, 1, 2), setting="test-novel", K=5, out_dir=str(tmp_path))
        b1 = {r.name: r.mean.bleu1 for r in rows}
        c.detail = " ".join(f"{n}={b1[n]:.4f}" for n in names) + f" gap={b1['ours'] - b1['ablation-2']:+.4f}"
        assert b1["ours"] >= b1["ablation-4"] >= b1["ablation-3"] >= b1["ablation-2"], b1
        assert b1["ours"] - b1["ablation-2"] >= 0.03, b1


# -- AC8 ----------------------------------------------------------------------------

def test_ac8_protocol_hygiene(record_property, default_corpus):
    with Criterion(record_property, 8, "protocol hygiene", 10) as c:
        cat, cases, _ = default_corpus
        novel = set(cat.novel_ids)
        n_images = n_episodes = 0
        for split_seed in range(5):
            train_cases, val, test = make_splits(cat, cases, seed=split_seed)
            for case in train_cases:
                for im in case.images:
                    assert not im.class_ids & novel, f"novel annotation in training image {im.image_id}"
                    n_images += 1
            for partition, pool in ((TEST_NOVEL, test), (VAL_NOVEL, val)):
                for setting in ("test-novel", "test-mix"):
                    for seed in range(5):
                        support, query = sample_episode(EpisodeSpec(5, setting, seed), pool, cat, partition)
                        assert support.image_ids.isdisjoint(query.image_ids)
                        assert not {c.case_id for c in train_cases} & {it.case_id for it in support.items}
                        n_episodes += 1
        c.detail = f"{n_images} training images without novel annotations; {n_episodes} episodes disjoint"


if __name__ == "__main__":
    with warnings.catch_warnings():
        sys.exit(pytest.main([__file__, "-v"]))
