"""Command-line interface: synth, train, imprint, generate, evaluate, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import dump_config, load_config
from .datamodel import (
    SETTINGS, TEST_NOVEL, VAL_NOVEL, EpisodeSpec, load_manifest, make_splits, sample_episode, split_words,
)
from .embeddings import build_embedding_table, write_embedding_file
from .harness import ABLATION_LADDER, ablation_table, load_checkpoint, run_ablation, run_episode, save_checkpoint, train
from .metrics import EvalPair, evaluate_corpus
from .pipeline import ImageBank
from .synthgen import RenderParams, build_recipes, default_catalog, generate_corpus, load_class_file


def _write_json(path: str, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def _config(args):
    return load_config(getattr(args, "config", None), seed=getattr(args, "seed", None))


def _splits(args, catalog, cases):
    return make_splits(catalog, cases, seed=args.split_seed)


def _eval_cases(args, catalog, cases):
    _, val, test = _splits(args, catalog, cases)
    return val if args.partition == VAL_NOVEL else test


def cmd_synth(args) -> int:
    if args.classes:
        catalog, recipes = load_class_file(args.classes)
    else:
        catalog = default_catalog()
        recipes = build_recipes(catalog)
    params = RenderParams(image_size=args.image_size, seed=args.seed or 0)
    manifest = generate_corpus(catalog, params, args.cases, args.out, recipes)
    write_embedding_file(os.path.join(args.out, "embeddings.txt"), build_embedding_table(catalog))
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.embeddings:
        cfg = cfg.replace(embedding_source=args.embeddings)
    catalog, cases, vocab = load_manifest(args.manifest)
    train_cases, val_cases, test_cases = _splits(args, catalog, cases)
    table = build_embedding_table(catalog, cfg.embedding_source)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(dump_config(cfg))
    _write_json(os.path.join(args.out, "splits.json"), {
        "split_seed": args.split_seed,
        "train": [c.case_id for c in train_cases],
        "val": [c.case_id for c in val_cases],
        "test": [c.case_id for c in test_cases],
    })
    _, record = train(cfg, train_cases, catalog, vocab, table, val_cases=val_cases, out_dir=args.out)
    last = record.epochs[-1] if record.epochs else None
    print(f"trained {len(train_cases)} cases for {cfg.epochs} epochs in {record.wall_clock:.1f}s"
          + (f"; final L_gen {last.gen:.4f}" if last else ""))
    print(os.path.join(args.out, "checkpoint.pt"))
    return 0


def cmd_imprint(args) -> int:
    if args.setting == "test-seen":
        raise ValueError("imprinting needs a novel setting (test-novel or test-mix)")
    model = load_checkpoint(args.checkpoint)
    catalog, cases, _ = load_manifest(args.manifest)
    spec = EpisodeSpec(args.shots, args.setting, args.seed or 0)
    support, _ = sample_episode(spec, _eval_cases(args, catalog, cases), catalog, args.partition)
    bank = ImageBank(model.cfg.image_size)
    info = model.adapt(support, bank, catalog.active_ids(args.setting, args.partition), seed=spec.seed)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "checkpoint.pt"), model)
    _write_json(os.path.join(args.out, "support.json"), {
        "setting": args.setting,
        "K": args.shots,
        "seed": spec.seed,
        "items": [{"case_id": it.case_id, "image_id": it.image.image_id, "class_id": it.class_id}
                  for it in support.items],
        "imprinted": info["imprinted"],
        "finetune_loss": info["finetune_loss"],
    })
    print(os.path.join(args.out, "checkpoint.pt"))
    return 0


def cmd_generate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    catalog, cases, _ = load_manifest(args.manifest)
    spec = EpisodeSpec(args.shots, args.setting, args.seed or 0)
    result = run_episode(model, spec, _eval_cases(args, catalog, cases), novel_partition=args.partition,
                         out_dir=args.out)
    print(json.dumps(result.metrics.as_dict(), indent=1))
    print(result.metrics.table())
    return 0


def _read_lines(path: str) -> list[list[str]]:
    with open(path) as fh:
        return [split_words(line) for line in fh.read().splitlines()]


def cmd_evaluate(args) -> int:
    hyps, refs = _read_lines(args.hyp), _read_lines(args.ref)
    if len(hyps) != len(refs):
        raise ValueError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    if not hyps:
        raise ValueError("no sentences to evaluate")
    report = evaluate_corpus([EvalPair.of(h, [r]) for h, r in zip(hyps, refs)])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "metrics.json"), report.as_dict())
    print(json.dumps(report.as_dict(), indent=1))
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    catalog, cases, vocab = load_manifest(args.manifest)
    names = args.variants.split(",") if args.variants else list(ABLATION_LADDER)
    unknown = [n for n in names if n not in ABLATION_LADDER]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; choose from {list(ABLATION_LADDER)}")
    seeds = [args.seed] if args.seed is not None else [int(s) for s in args.seeds.split(",")]
    rows = run_ablation({n: ABLATION_LADDER[n] for n in names}, cfg, catalog, cases, vocab, seeds=seeds,
                        setting=args.setting, novel_partition=args.partition, K=args.shots,
                        split_seed=args.split_seed, out_dir=args.out)
    print(ablation_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lesionrg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help="output directory")

    def episode(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--setting", choices=SETTINGS, default="test-novel")
        sp.add_argument("--partition", choices=(TEST_NOVEL, VAL_NOVEL), default=TEST_NOVEL,
                        help="novel class partition to evaluate")
        sp.add_argument("--shots", "-K", type=int, default=5)
        sp.add_argument("--split-seed", type=int, default=0)

    sp = sub.add_parser("synth", help="render a synthetic corpus")
    sp.add_argument("--classes", help="class catalog JSON (default: built-in 8/2/3 catalog)")
    sp.add_argument("--cases", type=int, default=200)
    sp.add_argument("--image-size", type=int, default=128)
    common(sp, config=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train on the seen classes of a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--embeddings", help="lexical embedding text file (default: attribute-derived)")
    sp.add_argument("--split-seed", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("imprint", help="imprint novel classes from a sampled support set")
    sp.add_argument("--checkpoint", required=True)
    episode(sp)
    common(sp, config=False)
    sp.set_defaults(func=cmd_imprint)

    sp = sub.add_parser("generate", help="run an evaluation episode and write report artifacts")
    sp.add_argument("--checkpoint", required=True)
    episode(sp)
    common(sp, config=False)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="score hypothesis lines against reference lines")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", help="optional directory for metrics.json")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train and evaluate the ablation ladder")
    episode(sp)
    sp.add_argument("--variants", help=f"comma-separated subset of {','.join(ABLATION_LADDER)}")
    sp.add_argument("--seeds", default="0,1,2")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
