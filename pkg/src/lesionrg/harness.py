"""Training loop, checkpoints, episodic evaluation and the ablation ladder."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .datamodel import (
    TEST_NOVEL, TEST_SEEN, VAL_NOVEL, Case, ClassCatalog, EpisodeSpec, SupportSet, Vocabulary,
    catalog_to_json, filter_setting, make_splits, parse_catalog, sample_episode, surface_tokens,
)
from .embeddings import LexicalEmbeddingTable, build_embedding_table
from .metrics import EvalPair, MetricReport, evaluate_corpus
from .pipeline import GeneratedReport, ImageBank, ReportModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lesionrg-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# -- objective ----------------------------------------------------------------

def total_loss(components: dict, n_boxes: int):
    """L = L_det/|B| + L_kl/|B| + L_gen; with |B| = 0 the detection and KL
    terms are zero and the scale is skipped."""
    for key in ("det", "kl", "gen"):
        value = components[key]
        if isinstance(value, torch.Tensor):
            value = value.detach()
        if float(value) < 0:
            raise ValueError(f"loss component {key} is negative ({float(value)})")
    if n_boxes < 0:
        raise ValueError("n_boxes must be non-negative")
    if n_boxes == 0:
        return components["det"] + components["kl"] + components["gen"]
    return components["det"] / n_boxes + components["kl"] / n_boxes + components["gen"]


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay_factor ** sum(epoch >= d for d in cfg.lr_decay_epochs)


# -- records ------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    lr: float
    det: float
    kl: float
    gen: float
    rpn: float
    total: float
    n_boxes: int


@dataclass
class RunRecord:
    config: dict
    seed: int
    epochs: list[EpochLog] = field(default_factory=list)
    metrics: dict[str, dict] = field(default_factory=dict)
    wall_clock: float = 0.0
    best_epoch: int | None = None
    train_case_ids: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, data: dict) -> "RunRecord":
        data = dict(data)
        data["epochs"] = [EpochLog(**e) for e in data.get("epochs", [])]
        return cls(**data)


# -- checkpoints --------------------------------------------------------------

def catalog_hash(catalog: ClassCatalog) -> str:
    blob = json.dumps(catalog_to_json(catalog), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def config_from_dict(data: dict) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    kw = {}
    for k, v in data.items():
        if k not in known:
            raise CheckpointError(f"unknown config key {k!r}")
        kw[k] = tuple(v) if isinstance(v, list) else v
    return TrainConfig(**kw)


def save_checkpoint(path: str, model: ReportModel, epoch: int | None = None) -> None:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.as_dict(),
        "catalog": catalog_to_json(model.catalog),
        "catalog_hash": catalog_hash(model.catalog),
        "vocab": list(model.vocab.itos),
        "embedding": {"names": list(model.table.names), "weights": model.table.weights.tolist()},
        "tensors": state,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "epoch": epoch,
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> ReportModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')}")
    catalog = parse_catalog(payload["catalog"])
    if catalog_hash(catalog) != payload["catalog_hash"]:
        raise CheckpointError(f"{path}: class catalog hash mismatch")
    cfg = config_from_dict(payload["config"])
    vocab = Vocabulary(payload["vocab"][4:])
    if vocab.itos != list(payload["vocab"]):
        raise CheckpointError(f"{path}: malformed vocabulary")
    emb = payload["embedding"]
    table = LexicalEmbeddingTable(np.asarray(emb["weights"], dtype=np.float64), tuple(emb["names"]))
    model = ReportModel(cfg, catalog, vocab, table)
    tensors = payload["tensors"]
    for k, shape in payload["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise CheckpointError(f"{path}: tensor {k} has shape {list(tensors[k].shape)}, expected {shape}")
    model.load_state_dict(tensors)
    model.eval()
    return model


# -- training -----------------------------------------------------------------

def _diagnostic(cases: Sequence[Case], comps: dict, epoch: int) -> str:
    parts = {k: float(v.detach()) for k, v in comps.items() if isinstance(v, torch.Tensor)}
    return f"non-finite loss at epoch {epoch}; cases {[c.case_id for c in cases]}; components {parts}"


def train(
    cfg: TrainConfig,
    train_cases: Sequence[Case],
    catalog: ClassCatalog,
    vocab: Vocabulary,
    table: LexicalEmbeddingTable,
    *,
    val_cases: Sequence[Case] = (),
    out_dir: str | None = None,
    bank: ImageBank | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[ReportModel, RunRecord]:
    """Train on seen-class cases with SGD; returns the model and its RunRecord.

    With ``val_interval > 0`` and validation cases, the weights with the best
    validation-novel CIDEr are restored at the end.
    """
    if not train_cases:
        raise ValueError("no training cases")
    novel = set(catalog.novel_ids)
    for case in train_cases:
        if case.case_classes & novel:
            raise ValueError(f"training case {case.case_id} carries a novel-class lesion")
    start = time.perf_counter()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = ReportModel(cfg, catalog, vocab, table)
    bank = bank or ImageBank(cfg.image_size)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    record = RunRecord(config=cfg.as_dict(), seed=cfg.seed)
    seen_ids: set[str] = set()
    best = (-math.inf, None, None)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        sums = dict(det=0.0, kl=0.0, gen=0.0, rpn=0.0, total=0.0, n_boxes=0)
        order = rng.permutation(len(train_cases))
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_cases[i] for i in order[lo:lo + cfg.batch_size]]
            comps = model.training_losses(batch, bank, gen)
            loss = total_loss(comps, comps["n_boxes"]) + comps["rpn"]
            if not torch.isfinite(loss):
                raise TrainingDiverged(_diagnostic(batch, comps, epoch))
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            model.detector.renormalize()
            seen_ids.update(c.case_id for c in batch)
            for key in ("det", "kl", "gen", "rpn"):
                sums[key] += float(comps[key].detach())
            sums["total"] += float(loss.detach())
            sums["n_boxes"] += comps["n_boxes"]
            n_batches += 1
        entry = EpochLog(epoch, lr, *(sums[k] / n_batches for k in ("det", "kl", "gen", "rpn", "total")),
                         sums["n_boxes"])
        record.epochs.append(entry)
        if on_epoch:
            on_epoch(entry)
        log.info("epoch %d lr %.2e gen %.4f det %.4f kl %.4f total %.4f", epoch, lr, entry.gen, entry.det,
                 entry.kl, entry.total)
        if cfg.val_interval and val_cases and (epoch + 1) % cfg.val_interval == 0:
            score = run_episode(model, EpisodeSpec(5, "test-novel", cfg.seed), val_cases,
                                novel_partition=VAL_NOVEL, bank=bank).metrics.cider
            if score > best[0]:
                best = (score, epoch, copy.deepcopy(model.state_dict()))
        if out_dir and cfg.save_interval and (epoch + 1) % cfg.save_interval == 0:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{epoch + 1:04d}.pt"), model, epoch + 1)

    if best[2] is not None:
        model.load_state_dict(best[2])
        record.best_epoch = best[1]
    model.eval()
    record.train_case_ids = sorted(seen_ids)
    record.wall_clock = time.perf_counter() - start
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.pt"), model, cfg.epochs)
        record.save(os.path.join(out_dir, "run_record.json"))
    return model, record


# -- evaluation ---------------------------------------------------------------

@dataclass
class EpisodeResult:
    setting: str
    metrics: MetricReport
    reports: list[GeneratedReport]
    references: dict[str, str]
    support: SupportSet | None
    active: tuple[int, ...]
    imprinted: bool


def score_reports(reports: Sequence[GeneratedReport], cases: Sequence[Case], vocab: Vocabulary) -> MetricReport:
    by_id = {c.case_id: c for c in cases}
    corpus = [
        EvalPair.of(surface_tokens(r.tokens, vocab), [surface_tokens(by_id[r.case_id].report, vocab)])
        for r in reports
    ]
    return evaluate_corpus(corpus)


def run_episode(
    model: ReportModel,
    spec: EpisodeSpec,
    test_cases: Sequence[Case],
    *,
    novel_partition: str = TEST_NOVEL,
    out_dir: str | None = None,
    bank: ImageBank | None = None,
    adapt: bool | None = None,
) -> EpisodeResult:
    """Imprint (novel settings only) -> fine-tune -> detect -> fuse -> decode -> score.

    ``adapt=None`` imprints when the configuration enables it and some active
    novel class has no classifier row yet. The given model is left untouched;
    adaptation happens on a copy.
    """
    bank = bank or ImageBank(model.cfg.image_size)
    catalog = model.catalog
    active = catalog.active_ids(spec.setting, novel_partition)
    support = None
    imprinted = False
    if spec.setting == TEST_SEEN:
        work = model
        query = filter_setting(test_cases, catalog, spec.setting, novel_partition)
    else:
        work = copy.deepcopy(model)
        support, qset = sample_episode(spec, test_cases, catalog, novel_partition)
        query = filter_setting(qset.cases, catalog, spec.setting, novel_partition)
        if adapt is None:
            adapt = (model.cfg.use_imprinting and model.cfg.use_lesion_features
                     and not bool(model.detector.cls_known[list(active)].all()))
        if adapt:
            work.adapt(support, bank, active, seed=spec.seed)
            imprinted = True
    if not query:
        raise ValueError(f"no query cases for setting {spec.setting!r}")
    reports = work.generate(query, bank, active)
    metrics = score_reports(reports, query, model.vocab)
    references = {c.case_id: c.report_text for c in query}
    result = EpisodeResult(spec.setting, metrics, reports, references, support, tuple(active), imprinted)
    if out_dir:
        write_episode(result, out_dir)
    return result


def write_episode(result: EpisodeResult, out_dir: str) -> None:
    rdir = os.path.join(out_dir, "reports")
    os.makedirs(rdir, exist_ok=True)
    for r in result.reports:
        with open(os.path.join(rdir, f"{r.case_id}.json"), "w") as fh:
            json.dump(r.to_json(), fh, indent=1)
            fh.write("\n")
    summary = {
        "setting": result.setting,
        "active": list(result.active),
        "imprinted": result.imprinted,
        "support": [
            {"case_id": it.case_id, "image_id": it.image.image_id, "class_id": it.class_id}
            for it in (result.support.items if result.support else ())
        ],
        "metrics": result.metrics.as_dict(),
    }
    with open(os.path.join(out_dir, "episode.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "hypotheses.txt"), "w") as fh:
        fh.writelines(r.text + "\n" for r in result.reports)
    with open(os.path.join(out_dir, "references.txt"), "w") as fh:
        fh.writelines(result.references[r.case_id] + "\n" for r in result.reports)


# -- ablation -----------------------------------------------------------------

@dataclass(frozen=True)
class AblationFlags:
    use_lesion_features: bool = True
    use_imprinting: bool = True
    use_multiview: bool = True
    use_soft_label: bool = True

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return cfg.replace(**asdict(self))

    @property
    def training_key(self) -> tuple:
        """Flags that change training; imprinting only acts at inference."""
        if not self.use_lesion_features:
            return (False,)
        return (True, self.use_multiview, self.use_soft_label)


ABLATION_LADDER: dict[str, AblationFlags] = {
    "ablation-1": AblationFlags(False, False, False, False),
    "ablation-2": AblationFlags(True, False, False, False),
    "ablation-3": AblationFlags(True, True, False, False),
    "ablation-4": AblationFlags(True, True, True, False),
    "ours": AblationFlags(True, True, True, True),
}

# Reduced-budget preset for running the whole ladder (4 variants x 3 seeds)
# on one CPU in well under half an hour.
DESK_LADDER_CONFIG = TrainConfig(epochs=40, lr_decay_epochs=(30, 36), view_dropout=0.5)


@dataclass
class AblationRow:
    name: str
    flags: AblationFlags
    per_seed: list[MetricReport]

    @property
    def mean(self) -> MetricReport:
        keys = MetricReport.__dataclass_fields__
        return MetricReport(**{k: float(np.mean([getattr(m, k) for m in self.per_seed])) for k in keys})


def ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = []
    for i, row in enumerate(rows):
        head, vals = row.mean.table().split("\n")
        if i == 0:
            lines.append(f"{'variant':<12}" + head)
        lines.append(f"{row.name:<12}" + vals)
    return "\n".join(lines)


def run_ablation(
    variants: dict[str, AblationFlags],
    cfg: TrainConfig,
    catalog: ClassCatalog,
    cases: Sequence[Case],
    vocab: Vocabulary,
    *,
    seeds: Sequence[int] = (0, 1, 2),
    setting: str = "test-novel",
    novel_partition: str = TEST_NOVEL,
    K: int = 5,
    split_seed: int = 0,
    out_dir: str | None = None,
) -> list[AblationRow]:
    """One row per variant, averaged over seeds; variants that differ only in
    inference-time flags share a trained model."""
    table = build_embedding_table(catalog, cfg.embedding_source)
    train_cases, val_cases, test_cases = make_splits(catalog, cases, seed=split_seed)
    eval_cases = val_cases if novel_partition == VAL_NOVEL else test_cases
    bank = ImageBank(cfg.image_size)
    results: dict[str, list[MetricReport]] = {name: [] for name in variants}
    for seed in seeds:
        trained: dict[tuple, ReportModel] = {}
        for name, flags in variants.items():
            run_cfg = flags.apply(cfg).replace(seed=seed)
            key = flags.training_key
            if key not in trained:
                trained[key], record = train(run_cfg, train_cases, catalog, vocab, table, bank=bank)
                log.info("trained %s seed %d in %.1fs", name, seed, record.wall_clock)
            model = trained[key]
            model.cfg = run_cfg
            model.detector.cfg = run_cfg
            ep_dir = os.path.join(out_dir, f"{name}_seed{seed}") if out_dir else None
            res = run_episode(model, EpisodeSpec(K, setting, seed), eval_cases, novel_partition=novel_partition,
                              out_dir=ep_dir, bank=bank)
            results[name].append(res.metrics)
            log.info("%s seed %d: B1 %.4f", name, seed, res.metrics.bleu1)
    rows = [AblationRow(name, flags, results[name]) for name, flags in variants.items()]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump([{"name": r.name, "flags": asdict(r.flags), "mean": r.mean.as_dict(),
                        "per_seed": [m.as_dict() for m in r.per_seed]} for r in rows], fh, indent=1)
            fh.write("\n")
        with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
            fh.write(ablation_table(rows) + "\n")
    return rows
