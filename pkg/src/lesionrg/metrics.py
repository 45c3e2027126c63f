"""Corpus-level caption metrics: BLEU-1..4, ROUGE-L, METEOR-lite and CIDEr-D.

All functions take a corpus of ``EvalPair`` (token lists) and are pure.
"""
from __future__ import annotations

import math
import warnings
from collections import Counter
from itertools import combinations, permutations
from dataclasses import asdict, dataclass
from typing import Sequence

BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9  # F = PR / (alpha P + (1 - alpha) R), i.e. recall weighted 9:1
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0
METEOR_SEARCH_BUDGET = 20000
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
CIDER_N = 4


@dataclass(frozen=True)
class EvalPair:
    hypothesis: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError("EvalPair needs at least one reference")

    @classmethod
    def of(cls, hypothesis, references) -> "EvalPair":
        if references and isinstance(references[0], str):
            references = [references]
        return cls(tuple(hypothesis), tuple(tuple(r) for r in references))


@dataclass(frozen=True)
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def table(self) -> str:
        names = ("B1", "B2", "B3", "B4", "METEOR", "ROUGE-L", "CIDEr")
        vals = (self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l, self.cider)
        head = "".join(f"{n:>9}" for n in names)
        row = "".join(f"{v:>9.4f}" for v in vals)
        return head + "\n" + row


def _check(corpus):
    if not corpus:
        raise ValueError("empty corpus")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ---------------------------------------------------------------------

def bleu_stats(corpus: Sequence[EvalPair], max_n: int = 4) -> dict:
    """Sufficient statistics; shards merge by summing every field."""
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for pair in corpus:
        hyp = pair.hypothesis
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in pair.references)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(hyp, n)
            max_ref = Counter()
            for r in pair.references:
                max_ref |= ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return {"matches": matches, "totals": totals, "hyp_len": hyp_len, "ref_len": ref_len}


def bleu_from_stats(stats: dict, n: int) -> float:
    log_p = 0.0
    for k in range(n):
        m, t = stats["matches"][k], stats["totals"][k]
        p = m / t if m > 0 else BLEU_EPSILON
        log_p += math.log(p)
    c, r = stats["hyp_len"], stats["ref_len"]
    if c == 0:
        return 0.0
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / n)


def bleu_n(corpus: Sequence[EvalPair], n: int) -> float:
    _check(corpus)
    if n not in (1, 2, 3, 4):
        raise ValueError("n must be in 1..4")
    return bleu_from_stats(bleu_stats(corpus, n), n)


# -- ROUGE-L ------------------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp: Sequence[str], ref: Sequence[str], beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(corpus: Sequence[EvalPair]) -> float:
    _check(corpus)
    return sum(max(rouge_l_pair(p.hypothesis, r) for r in p.references) for p in corpus) / len(corpus)


# -- METEOR-lite ----------------------------------------------------------------

_SUFFIXES = ("ing", "ed", "es", "ly", "s")


def stem(word: str) -> str:
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


def count_chunks(alignment: Sequence[tuple[int, int]]) -> int:
    pairs = sorted(alignment)
    chunks = 0
    for k, (i, j) in enumerate(pairs):
        if k == 0 or i != pairs[k - 1][0] + 1 or j != pairs[k - 1][1] + 1:
            chunks += 1
    return chunks


def _groups(hyp, ref, key, free_h, free_r):
    """Per key: (hyp positions, ref positions) among the still unaligned tokens."""
    hg: dict[str, list[int]] = {}
    rg: dict[str, list[int]] = {}
    for i in free_h:
        hg.setdefault(key(hyp[i]), []).append(i)
    for j in free_r:
        rg.setdefault(key(ref[j]), []).append(j)
    return [(hg[k], rg[k]) for k in sorted(hg) if k in rg]


def _injections(hs: list[int], rs: list[int]):
    """All maximum matchings between two position lists of one token group."""
    if len(hs) <= len(rs):
        for chosen in permutations(rs, len(hs)):
            yield list(zip(hs, chosen))
    else:
        for chosen in combinations(hs, len(rs)):
            for perm in permutations(rs):
                yield list(zip(chosen, perm))


def meteor_alignment(hyp: Sequence[str], ref: Sequence[str], budget: int = METEOR_SEARCH_BUDGET):
    """Exact-match stage then stem stage; each maximizes matches, then the
    combined alignment minimizes chunks by depth-first search over group
    matchings (bounded by ``budget`` leaves; the best alignment found is used).
    One chunk is the optimum, so the search stops as soon as it is reached.
    """
    exact_groups = _groups(hyp, ref, lambda w: w, range(len(hyp)), range(len(ref)))
    best = {"chunks": math.inf, "align": []}
    leaves = [0]

    def stem_stage(align):
        used_h = {i for i, _ in align}
        used_r = {j for _, j in align}
        free_h = [i for i in range(len(hyp)) if i not in used_h]
        free_r = [j for j in range(len(ref)) if j not in used_r]
        return _groups(hyp, ref, stem, free_h, free_r)

    def done():
        return leaves[0] >= budget or best["chunks"] <= 1

    def search(groups, k, align, stage):
        if done():
            return
        if k == len(groups):
            if stage == 0:
                search(stem_stage(align), 0, align, 1)
                return
            leaves[0] += 1
            c = count_chunks(align)
            if c < best["chunks"]:
                best["chunks"], best["align"] = c, list(align)
            return
        hs, rs = groups[k]
        for m in _injections(hs, rs):
            search(groups, k + 1, align + m, stage)
            if done():
                return

    search(exact_groups, 0, [], 0)
    return best["align"]


def meteor_pair(hyp: Sequence[str], ref: Sequence[str]) -> float:
    if not hyp or not ref:
        return 0.0
    align = meteor_alignment(hyp, ref)
    m = len(align)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (count_chunks(align) / m) ** METEOR_BETA
    return fmean * (1 - penalty)


def meteor_lite(corpus: Sequence[EvalPair]) -> float:
    _check(corpus)
    return sum(max(meteor_pair(p.hypothesis, r) for r in p.references) for p in corpus) / len(corpus)


# -- CIDEr-D ------------------------------------------------------------------

def _tfidf(counts: Counter, df: Counter, log_n: float):
    vec = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider(corpus: Sequence[EvalPair], n: int = CIDER_N, sigma: float = CIDER_SIGMA) -> float:
    _check(corpus)
    df: Counter = Counter()
    for p in corpus:
        grams = set()
        for r in p.references:
            for k in range(1, n + 1):
                grams.update(ngrams(r, k))
        df.update(grams)
    if len({r for p in corpus for r in p.references}) < 2:
        warnings.warn("CIDEr with fewer than 2 distinct references: IDF is degenerate", stacklevel=2)
    log_n = math.log(float(len(corpus)))
    total = 0.0
    for p in corpus:
        score = 0.0
        for r in p.references:
            delta = len(p.hypothesis) - len(r)
            per_n = 0.0
            for k in range(1, n + 1):
                hv, hn = _tfidf(ngrams(p.hypothesis, k), df, log_n)
                rv, rn = _tfidf(ngrams(r, k), df, log_n)
                val = sum(min(hv[g], rv[g]) * rv[g] for g in hv if g in rv)
                if hn != 0 and rn != 0:
                    val /= hn * rn
                per_n += val * math.exp(-(delta**2) / (2 * sigma**2))
            score += per_n / n
        total += CIDER_SCALE * score / len(p.references)
    return total / len(corpus)


def evaluate_corpus(corpus: Sequence[EvalPair]) -> MetricReport:
    _check(corpus)
    stats = bleu_stats(corpus, 4)
    return MetricReport(
        bleu1=bleu_from_stats(stats, 1),
        bleu2=bleu_from_stats(stats, 2),
        bleu3=bleu_from_stats(stats, 3),
        bleu4=bleu_from_stats(stats, 4),
        meteor=meteor_lite(corpus),
        rouge_l=rouge_l(corpus),
        cider=cider(corpus),
    )
