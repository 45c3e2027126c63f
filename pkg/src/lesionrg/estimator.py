"""scikit-learn style estimator wrapping training, adaptation and generation."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .datamodel import (
    SETTINGS, TEST_NOVEL, TEST_SEEN, Case, ClassCatalog, SupportSet, Vocabulary,
)
from .embeddings import LexicalEmbeddingTable, build_embedding_table
from .harness import score_reports, train
from .pipeline import GeneratedReport, ImageBank


def check_cases(cases, name: str = "cases") -> list[Case]:
    """A non-empty sequence of Case objects, returned as a list."""
    if isinstance(cases, Case):
        raise TypeError(f"{name} must be a sequence of Case, got a single Case")
    try:
        out = list(cases)
    except TypeError as e:
        raise TypeError(f"{name} must be a sequence of Case") from e
    if not out:
        raise ValueError(f"{name} is empty")
    for i, c in enumerate(out):
        if not isinstance(c, Case):
            raise TypeError(f"{name}[{i}] is {type(c).__name__}, expected Case")
    return out


def check_setting(setting: str) -> str:
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {sorted(SETTINGS)}")
    return setting


def check_config(config) -> TrainConfig:
    if config is None:
        return TrainConfig()
    if isinstance(config, TrainConfig):
        return config
    if isinstance(config, dict):
        return TrainConfig(**config)
    raise TypeError("config must be a TrainConfig, a dict or None")


class LesionReportGenerator(BaseEstimator):
    """Lesion-guided report generator with few-shot adaptation to novel classes.

    ``fit`` trains on seen-class cases, ``adapt`` imprints novel classes from a
    box-annotated support set, ``predict`` returns report texts, ``transform``
    the fused conditioning vectors and ``score`` corpus BLEU-1.
    """

    def __init__(self, config: TrainConfig | dict | None = None, seed: int | None = None,
                 novel_partition: str = TEST_NOVEL):
        self.config = config
        self.seed = seed
        self.novel_partition = novel_partition

    def _config(self) -> TrainConfig:
        cfg = check_config(self.config)
        return cfg if self.seed is None else cfg.replace(seed=self.seed)

    def fit(self, cases: Sequence[Case], catalog: ClassCatalog, vocabulary: Vocabulary,
            table: LexicalEmbeddingTable | None = None):
        cases = check_cases(cases)
        if not isinstance(catalog, ClassCatalog):
            raise TypeError("catalog must be a ClassCatalog")
        cfg = self._config()
        table = table or build_embedding_table(catalog, cfg.embedding_source)
        self.bank_ = ImageBank(cfg.image_size)
        self.model_, self.record_ = train(cfg, cases, catalog, vocabulary, table, bank=self.bank_)
        self.catalog_ = catalog
        self.vocabulary_ = vocabulary
        self.setting_ = TEST_SEEN
        return self

    def adapt(self, support: SupportSet, setting: str = "test-novel", seed: int = 0):
        """Imprint and fine-tune the classifier rows of the support classes."""
        check_is_fitted(self, "model_")
        check_setting(setting)
        if not support.items:
            raise ValueError("support set is empty")
        active = self.catalog_.active_ids(setting, self.novel_partition)
        self.model_.adapt(support, self.bank_, active, seed=seed)
        self.setting_ = setting
        return self

    def _active(self, setting: str | None):
        return self.catalog_.active_ids(check_setting(setting or self.setting_), self.novel_partition)

    def predict_reports(self, cases: Sequence[Case], setting: str | None = None) -> list[GeneratedReport]:
        check_is_fitted(self, "model_")
        return self.model_.generate(check_cases(cases), self.bank_, self._active(setting))

    def predict(self, cases: Sequence[Case], setting: str | None = None) -> list[str]:
        return [r.text for r in self.predict_reports(cases, setting)]

    def transform(self, cases: Sequence[Case], setting: str | None = None) -> np.ndarray:
        check_is_fitted(self, "model_")
        active = self._active(setting)
        self.model_.eval()
        with torch.no_grad():
            rows = [self.model_.conditioning(c, self.bank_, active)[0] for c in check_cases(cases)]
        return torch.stack(rows).numpy()

    def score(self, cases: Sequence[Case], setting: str | None = None) -> float:
        cases = check_cases(cases)
        return score_reports(self.predict_reports(cases, setting), cases, self.vocabulary_).bleu1
