"""Multi-view fusion of detections and the transformer report decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import BOS, EOS, PAD, TokenSequence


def multiview_feature(f_vis: torch.Tensor, emb_row: torch.Tensor | None, embed_dim: int) -> torch.Tensor:
    """[F_vis, W_emb[y_hat]]; zero-padded lexical part when emb_row is None."""
    if emb_row is None:
        emb_row = f_vis.new_zeros(embed_dim)
    return torch.cat([f_vis, emb_row.to(f_vis.dtype)])


def fuse_multiview(detections, emb: torch.Tensor, use_multiview: bool = True) -> torch.Tensor:
    """Mean over detections of max(Y_hat) * [F_vis, W_emb[y_hat]].

    Callers substitute the whole-image pseudo-detection for an empty list.
    """
    if not detections:
        raise ValueError("no detections to fuse; use the whole-image fallback")
    d = emb.shape[1]
    terms = [
        det.score * multiview_feature(det.f_vis, emb[det.class_id] if use_multiview else None, d)
        for det in detections
    ]
    return torch.stack(terms).mean(dim=0)


def fuse_batch(f_vis: torch.Tensor, weights: torch.Tensor, emb_rows: torch.Tensor | None,
               case_index: torch.Tensor, n_cases: int) -> torch.Tensor:
    """Differentiable per-case fusion used in training. ``emb_rows`` None zero-pads."""
    if emb_rows is None:
        emb_rows = f_vis.new_zeros((f_vis.shape[0], 0))
    mult = weights[:, None] * torch.cat([f_vis, emb_rows], dim=1)
    out = mult.new_zeros((n_cases, mult.shape[1]))
    out = out.index_add(0, case_index, mult)
    counts = torch.bincount(case_index, minlength=n_cases).clamp(min=1).to(mult.dtype)
    return out / counts[:, None]


class ReportDecoder(nn.Module):
    """Autoregressive transformer decoder conditioned on one memory token."""

    def __init__(self, vocab_size: int, cond_dim: int, width=128, heads=4, layers=2, ff_width=256,
                 max_len=60, dropout=0.1):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.cond = nn.Linear(cond_dim, width)
        self.tok = nn.Embedding(vocab_size, width)
        self.pos = nn.Embedding(max_len, width)
        layer = nn.TransformerDecoderLayer(width, heads, ff_width, dropout, batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, layers)
        self.out = nn.Linear(width, vocab_size)

    def forward(self, cond: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """cond (B, cond_dim), tokens (B, T) -> next-token logits (B, T, V)."""
        t = tokens.shape[1]
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.max_len}")
        pos = torch.arange(t)
        x = self.tok(tokens) + self.pos(pos)[None]
        memory = self.cond(cond)[:, None, :]
        causal = torch.triu(torch.ones((t, t), dtype=torch.bool), diagonal=1)
        pad = tokens == PAD
        h = self.decoder(x, memory, tgt_mask=causal, tgt_key_padding_mask=pad if pad.any() else None)
        return self.out(h)

    def step_logprobs(self, cond: torch.Tensor, prefixes: torch.Tensor) -> torch.Tensor:
        """Log-probabilities of the next token after each prefix: (B, V)."""
        return torch.log_softmax(self(cond, prefixes)[:, -1], dim=-1)


def pad_sequences(seqs: Sequence[TokenSequence | Sequence[int]]) -> torch.Tensor:
    rows = [list(s.tokens if isinstance(s, TokenSequence) else s) for s in seqs]
    t = max(len(r) for r in rows)
    return torch.tensor([r + [PAD] * (t - len(r)) for r in rows], dtype=torch.long)


def generation_loss(cond: torch.Tensor, reports, decoder, reduction: str = "mean") -> torch.Tensor:
    """Teacher-forced token cross-entropy, averaged over all target tokens.

    ``reports`` is a list of TokenSequence (or a padded (B, T) tensor);
    ``reduction='none'`` returns the (B, T-1) per-position losses (0 at padding).
    """
    tokens = reports if isinstance(reports, torch.Tensor) else pad_sequences(reports)
    if tokens.shape[1] < 2:
        raise ValueError("report must contain at least BOS and EOS")
    if cond.dim() == 1:
        cond = cond[None]
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    logits = decoder(cond, inputs)
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                          ignore_index=PAD, reduction="none").reshape(targets.shape)
    if reduction == "none":
        return nll
    mask = targets != PAD
    return nll.sum() / mask.sum()


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"
    beam_width: int = 3
    max_len: int = 60

    def __post_init__(self):
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.mode not in ("greedy", "beam"):
            raise ValueError("mode must be greedy or beam")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@torch.no_grad()
def greedy_decode(cond: torch.Tensor, decoder, max_len: int) -> list[TokenSequence]:
    """Batched greedy decoding; ties go to the lowest token index. PAD and BOS are never emitted."""
    n = cond.shape[0]
    seqs = torch.full((n, 1), BOS, dtype=torch.long)
    done = torch.zeros(n, dtype=torch.bool)
    while seqs.shape[1] < max_len - 1 and not done.all():
        logp = decoder.step_logprobs(cond, seqs)
        logp[:, PAD] = logp[:, BOS] = float("-inf")
        nxt = logp.argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        seqs = torch.cat([seqs, nxt[:, None]], dim=1)
        done |= nxt == EOS
    out = []
    for row in seqs.tolist():
        body = []
        for tok in row[1:]:
            if tok in (EOS, PAD):
                break
            body.append(tok)
        out.append(TokenSequence((BOS, *body, EOS)))
    return out


@torch.no_grad()
def beam_decode(cond: torch.Tensor, decoder, beam_width: int, max_len: int) -> TokenSequence:
    """Beam search for one conditioning vector; final pick by mean log-prob per generated token."""
    cond = cond.reshape(1, -1)
    live = [((BOS,), 0.0)]
    finished = []
    while live:
        if len(live[0][0]) >= max_len - 1:
            finished.extend(((*s, EOS), sc) for s, sc in live)
            break
        prefixes = torch.tensor([s for s, _ in live], dtype=torch.long)
        logp = decoder.step_logprobs(cond.expand(len(live), -1), prefixes)
        cands = []
        for b, (s, sc) in enumerate(live):
            for tok, lp in enumerate(logp[b].tolist()):
                if tok in (PAD, BOS):
                    continue
                cands.append((sc + lp, b, tok))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for sc, b, tok in cands[:beam_width]:
            seq = (*prefixes[b].tolist(), tok)
            if tok == EOS:
                finished.append((seq, sc))
            else:
                live.append((seq, sc))
        if len(finished) >= beam_width:
            break
    best = max(range(len(finished)), key=lambda k: (finished[k][1] / (len(finished[k][0]) - 1), -k))
    return TokenSequence(tuple(finished[best][0]))


def decode_report(cond: torch.Tensor, decoder, config: DecodeConfig = DecodeConfig()) -> TokenSequence:
    if config.mode == "greedy":
        return greedy_decode(cond.reshape(1, -1), decoder, config.max_len)[0]
    return beam_decode(cond, decoder, config.beam_width, config.max_len)


def decode_reports(cond: torch.Tensor, decoder, config: DecodeConfig = DecodeConfig()) -> list[TokenSequence]:
    if config.mode == "greedy":
        return greedy_decode(cond, decoder, config.max_len)
    return [beam_decode(c, decoder, config.beam_width, config.max_len) for c in cond]
