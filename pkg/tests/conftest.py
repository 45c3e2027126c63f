import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lesionrg.config import TrainConfig  # noqa: E402
from lesionrg.datamodel import load_manifest  # noqa: E402
from lesionrg.synthgen import RenderParams, default_catalog, generate_corpus  # noqa: E402


def tiny_config(**kw) -> TrainConfig:
    """A fast configuration for functional tests (64 px, narrow layers)."""
    base = dict(
        epochs=2, batch_size=4, lr_decay_epochs=(), image_size=64, channels=(8, 8, 16, 16),
        feature_dim=32, roi_hidden=64, width=32, heads=2, ff_width=64, layers=1, max_len=40,
        train_proposals=16, test_proposals=8, finetune_steps=5, crop_size=64,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(default_catalog(), RenderParams(image_size=64, seed=0), 80, str(out))
    return str(out)


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    """(catalog, cases, vocab) of an 80-case, 64 px synthetic corpus."""
    return load_manifest(os.path.join(corpus_dir, "manifest.json"))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion recorded by tests/test_acceptance.py."""
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) == "call":
                lines.extend(v for k, v in getattr(rep, "user_properties", ()) if k == "acceptance")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
