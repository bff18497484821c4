"""Corpus caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D.

Conventions (fixed for reproducibility):

* BLEU is corpus-level with clipped counts, the closest-reference brevity
  penalty (shorter reference wins a length tie) and no smoothing, so any
  zero n-gram precision gives BLEU-n = 0.
* ROUGE-L is the LCS F-measure with beta = 1.2, best reference per image,
  averaged over images.
* CIDEr-D uses document frequencies over per-image reference sets, raw term
  counts times IDF, clipped hypothesis weights, a Gaussian length penalty
  on token counts with sigma = 6, the mean over n = 1..4 and references,
  scaled by 10.  No stemming.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

TOKENIZER_VERSION = "glied-tok-1"

_PUNCT = re.compile(r"[^\w\s'-]|_")
_LOOSE_JOINERS = re.compile(r"(?<!\w)['-]+|['-]+(?!\w)")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation except intra-word hyphens/apostrophes, split."""
    s = _PUNCT.sub(" ", text.lower())
    s = _LOOSE_JOINERS.sub(" ", s)
    return s.split()


@dataclass
class CorpusEntry:
    image_id: str
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"image {self.image_id!r} has no references")


def corpus_from_strings(rows: Iterable[tuple[str, str, Sequence[str]]]) -> list[CorpusEntry]:
    return [CorpusEntry(str(i), tokenize(c), [tokenize(r) for r in refs]) for i, c, refs in rows]


def load_corpus_jsonl(path) -> list[CorpusEntry]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rows.append((rec["image_id"], rec["candidate"], rec["references"]))
    return corpus_from_strings(rows)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu(corpus: Sequence[CorpusEntry], max_n: int = 4) -> list[float]:
    if not corpus:
        raise ValueError("BLEU needs a non-empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for e in corpus:
        c = e.candidate
        cand_len += len(c)
        ref_len += min((len(r) for r in e.references), key=lambda L: (abs(L - len(c)), L))
        for n in range(1, max_n + 1):
            cc = ngrams(c, n)
            best: Counter = Counter()
            for r in e.references:
                best |= ngrams(r, n)
            matched[n - 1] += sum(min(cnt, best[g]) for g, cnt in cc.items())
            total[n - 1] += max(len(c) - n + 1, 0)
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(candidate: Sequence[str], references: Sequence[Sequence[str]], beta: float = 1.2) -> float:
    best = 0.0
    for r in references:
        lcs = lcs_length(candidate, r)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        rec = lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(corpus: Sequence[CorpusEntry], beta: float = 1.2) -> float:
    if not corpus:
        raise ValueError("ROUGE-L needs a non-empty corpus")
    return sum(rouge_l_single(e.candidate, e.references, beta) for e in corpus) / len(corpus)


# ---------------------------------------------------------------------------
# CIDEr-D


class CiderStats:
    """Reference-corpus document frequencies for n = 1..max_n."""

    def __init__(self, references: Sequence[Sequence[Sequence[str]]], max_n: int = 4):
        if not references:
            raise ValueError("CIDEr stats need at least one image")
        self.max_n = max_n
        self.n_images = len(references)
        self.log_n_images = math.log(float(self.n_images))
        df: Counter = Counter()
        for refs in references:
            grams = set()
            for r in refs:
                for n in range(1, max_n + 1):
                    grams.update(ngrams(r, n))
            df.update(grams)
        self.df = df

    @classmethod
    def from_corpus(cls, corpus: Sequence[CorpusEntry], max_n: int = 4) -> "CiderStats":
        return cls([e.references for e in corpus], max_n)

    def vectorize(self, tokens: Sequence[str]):
        vecs, norms = [], []
        for n in range(1, self.max_n + 1):
            v = {g: tf * (self.log_n_images - math.log(max(1.0, self.df[g])))
                 for g, tf in ngrams(tokens, n).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(w * w for w in v.values())))
        return vecs, norms, len(tokens)


class CiderD:
    def __init__(self, stats: CiderStats, sigma: float = 6.0):
        self.stats = stats
        self.sigma = sigma

    def _sim(self, hyp, ref) -> float:
        (hv, hn, hl), (rv, rn, rl) = hyp, ref
        penalty = math.exp(-((hl - rl) ** 2) / (2 * self.sigma ** 2))
        total = 0.0
        for n in range(self.stats.max_n):
            val = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, w in hv[n].items())
            if hn[n] != 0 and rn[n] != 0:
                val /= hn[n] * rn[n]
            total += val * penalty
        return total / self.stats.max_n

    def score(self, candidate: Sequence[str], references: Sequence[Sequence[str]]) -> float:
        hyp = self.stats.vectorize(candidate)
        sims = [self._sim(hyp, self.stats.vectorize(r)) for r in references]
        return 10.0 * sum(sims) / len(sims)


def cider_d(corpus: Sequence[CorpusEntry], stats: CiderStats | None = None,
            sigma: float = 6.0) -> tuple[float, list[float]]:
    """Corpus mean and per-image CIDEr-D.  ``stats`` default to the corpus' own references."""
    if not corpus:
        raise ValueError("CIDEr-D needs a non-empty corpus")
    if stats is None:
        stats = CiderStats.from_corpus(corpus)
    elif stats.n_images != len(corpus):
        raise ValueError(f"CIDEr stats cover {stats.n_images} images but the corpus has {len(corpus)}")
    scorer = CiderD(stats, sigma)
    per_image = [scorer.score(e.candidate, e.references) for e in corpus]
    return sum(per_image) / len(per_image), per_image


def evaluate_corpus(corpus: Sequence[CorpusEntry]) -> dict[str, float]:
    b = bleu(corpus)
    out = {f"BLEU-{i + 1}": b[i] for i in range(4)}
    out["ROUGE-L"] = rouge_l(corpus)
    out["CIDEr-D"] = cider_d(corpus)[0]
    return out
