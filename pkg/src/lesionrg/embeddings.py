"""Class lexical embeddings, soft labels and the semantic alignment loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import ClassCatalog

NORM_EPS = 1e-8
ATTRIBUTE_DERIVED = "attribute-derived"


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class LexicalEmbeddingTable:
    """Row-normalized |C| x d matrix; row i belongs to catalog class i."""

    weights: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[1] < 2:
            raise EmbeddingError("embedding dimension must be >= 2")
        if self.weights.shape[0] != len(self.names):
            raise EmbeddingError("one embedding row per class required")
        norms = np.linalg.norm(self.weights, axis=1)
        if (norms < NORM_EPS).any():
            raise EmbeddingError(f"zero-norm embedding for class {self.names[int(np.argmin(norms))]!r}")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def __len__(self):
        return self.weights.shape[0]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.weights, dtype=dtype)


def _normalize_rows(m: np.ndarray, names: Sequence[str]) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    for i, n in enumerate(norms[:, 0]):
        if n < NORM_EPS:
            raise EmbeddingError(f"zero-norm embedding for class {names[i]!r}")
    return m / norms


def attribute_inventory(catalog: ClassCatalog) -> list[str]:
    return sorted({a for c in catalog.classes for a in c.attributes})


def build_embedding_table(catalog: ClassCatalog, source: str = ATTRIBUTE_DERIVED) -> LexicalEmbeddingTable:
    """Attribute-derived multi-hot rows, or rows read from an embedding text file."""
    names = tuple(catalog.names)
    if source == ATTRIBUTE_DERIVED:
        inventory = attribute_inventory(catalog)
        col = {a: i for i, a in enumerate(inventory)}
        m = np.zeros((len(catalog), max(len(inventory), 2)))
        for c in catalog.classes:
            for a in c.attributes:
                m[c.class_id, col[a]] = 1.0
    else:
        vectors = read_embedding_file(source)
        missing = [n for n in names if n not in vectors]
        if missing:
            raise EmbeddingError(f"class {missing[0]!r} missing from embedding file {source}")
        m = np.stack([vectors[n] for n in names])
    return LexicalEmbeddingTable(_normalize_rows(m.astype(np.float64), names), names)


def read_embedding_file(path: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError as e:
                raise EmbeddingError(f"{path}:{lineno}: {e}") from e
            if dim is None:
                dim = len(vec)
            if len(vec) != dim or dim < 2:
                raise EmbeddingError(f"{path}:{lineno}: expected {dim} floats")
            out[parts[0]] = vec
    return out


def write_embedding_file(path: str, table: LexicalEmbeddingTable) -> None:
    with open(path, "w") as fh:
        for name, row in zip(table.names, table.weights):
            fh.write(name + " " + " ".join(repr(float(x)) for x in row) + "\n")


def cosine_sim(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_EPS or nv < NORM_EPS:
        raise EmbeddingError("cosine similarity undefined for near-zero vectors")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def build_soft_labels(table: LexicalEmbeddingTable) -> np.ndarray:
    """L[y, c] = cos(W_y, W_c) over all classes."""
    w = table.weights
    n = len(w)
    out = np.empty((n, n))
    for y in range(n):
        for c in range(y, n):
            out[y, c] = out[c, y] = cosine_sim(w[y], w[c])
    return out


def similarity_logits(f_sem: torch.Tensor, emb: torch.Tensor, tau: float) -> torch.Tensor:
    """tau * cos(f_sem, emb rows); emb rows are assumed unit norm."""
    return tau * F.normalize(f_sem, dim=-1, eps=NORM_EPS) @ emb.T


def semantic_prediction(f_sem: torch.Tensor, table: LexicalEmbeddingTable, tau: float = 10.0,
                        active: Sequence[int] | None = None) -> torch.Tensor:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    active = list(range(len(table))) if active is None else list(active)
    if not active:
        raise ValueError("empty active class set")
    emb = table.tensor(f_sem.dtype)[active]
    return torch.softmax(similarity_logits(f_sem, emb, tau), dim=-1)


def soft_targets(soft_labels: torch.Tensor, labels: torch.Tensor, tau: float, one_hot: bool = False) -> torch.Tensor:
    if one_hot:
        return F.one_hot(labels, soft_labels.shape[0]).to(soft_labels.dtype)
    return torch.softmax(tau * soft_labels[labels], dim=-1)


def kl_semantic_loss(f_sem: torch.Tensor, labels: torch.Tensor, emb: torch.Tensor, soft_labels: torch.Tensor,
                     tau: float = 10.0, one_hot: bool = False, reduction: str = "mean") -> torch.Tensor:
    """KL(target || softmax(tau * cos(f_sem, W))) over all classes.

    The target is softmax(tau * L[y]), or one-hot y when ``one_hot``.
    """
    log_pred = torch.log_softmax(similarity_logits(f_sem, emb, tau), dim=-1)
    target = soft_targets(soft_labels, labels, tau, one_hot)
    per_row = torch.sum(torch.xlogy(target, target) - target * log_pred, dim=-1)
    if reduction == "sum":
        return per_row.sum()
    return per_row.mean() if per_row.numel() else per_row.sum()
