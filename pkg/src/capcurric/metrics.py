"""Corpus BLEU-4 and CIDEr over integer token sequences.

Tokens are treated as opaque symbols; callers strip BOS/EOS first.

CIDEr here is the original consensus formulation: per order n, TF-IDF
vectors (raw counts times ``log(M / df)``), cosine between the candidate and
the mean reference vector, averaged over n = 1..4 and scaled by 10. There
is no CIDEr-D length penalty or clipping, so numbers differ from the COCO
evaluation server.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse

from . import HarnessError

MAX_N = 4
CIDER_SCALE = 10.0

Tokens = Sequence[int]


def ngrams(tokens: Tokens, n: int) -> Counter:
    toks = tuple(int(t) for t in tokens)
    return Counter(toks[i : i + n] for i in range(len(toks) - n + 1))


def _closest_ref_len(cand_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu_stats(candidate: Tokens, references: Sequence[Tokens]) -> np.ndarray:
    """``[match_1..match_4, total_1..total_4, cand_len, ref_len]`` for one candidate."""
    if not references:
        raise HarnessError("BLEU needs at least one reference")
    stats = np.zeros(2 * MAX_N + 2)
    for n in range(1, MAX_N + 1):
        cand = ngrams(candidate, n)
        max_ref: Counter = Counter()
        for r in references:
            for g, c in ngrams(r, n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        stats[n - 1] = sum(min(c, max_ref[g]) for g, c in cand.items())
        stats[MAX_N + n - 1] = max(len(candidate) - n + 1, 0)
    stats[2 * MAX_N] = len(candidate)
    stats[2 * MAX_N + 1] = _closest_ref_len(len(candidate), references)
    return stats


def bleu_from_stats(stats: np.ndarray) -> float:
    matches, totals = stats[:MAX_N], stats[MAX_N : 2 * MAX_N]
    c, r = stats[2 * MAX_N], stats[2 * MAX_N + 1]
    if c == 0 or np.any(matches == 0):
        return 0.0
    log_p = float(np.sum(np.log(matches) - np.log(totals))) / MAX_N
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return min(1.0, bp * math.exp(log_p))


def _aligned(candidates: Mapping[int, Tokens], references: Mapping[int, Sequence[Tokens]]):
    ids = sorted(candidates)
    missing = [i for i in ids if not references.get(i)]
    if missing:
        raise HarnessError(f"missing references for image ids {missing[:5]}")
    return ids


def bleu4(candidates: Mapping[int, Tokens], references: Mapping[int, Sequence[Tokens]]) -> float:
    """Corpus BLEU-4: clipped n-gram precisions pooled over the corpus, no smoothing."""
    ids = _aligned(candidates, references)
    total = np.zeros(2 * MAX_N + 2)
    for i in ids:
        total += bleu_stats(candidates[i], references[i])
    return bleu_from_stats(total)


def bleu4_sentence(candidate: Tokens, references: Sequence[Tokens]) -> float:
    """Sentence BLEU-4 with add-one smoothing on orders 2-4.

    A candidate shorter than two tokens scores 0.
    """
    if len(candidate) < 2:
        return 0.0
    stats = bleu_stats(candidate, references)
    matches, totals = stats[:MAX_N].copy(), stats[MAX_N : 2 * MAX_N].copy()
    if matches[0] == 0:
        return 0.0
    matches[1:] += 1.0
    totals[1:] += 1.0
    log_p = float(np.sum(np.log(matches) - np.log(totals))) / MAX_N
    c, r = stats[2 * MAX_N], stats[2 * MAX_N + 1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return min(1.0, bp * math.exp(log_p))


# ---------------------------------------------------------------------------
# CIDEr, reference route (plain dictionaries)


def cider_scores(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> list[float]:
    """Per-document CIDEr for parallel lists; each list position is one document.

    Duplicated documents (as in a bootstrap resample) count separately
    towards document frequencies.
    """
    M = len(candidates)
    if M != len(references):
        raise HarnessError("candidates and references differ in length")
    if M < 2:
        raise HarnessError("CIDEr needs at least 2 images: IDF is undefined for a single image")
    scores = np.zeros(M)
    for n in range(1, MAX_N + 1):
        ref_counts = [[ngrams(r, n) for r in refs] for refs in references]
        df: Counter = Counter()
        for rc in ref_counts:
            df.update(set().union(*rc) if rc else set())
        logM = math.log(M)

        def idf(g):
            return logM - math.log(max(df[g], 1))

        for i in range(M):
            cand = {g: c * idf(g) for g, c in ngrams(candidates[i], n).items()}
            mean_ref: dict = {}
            k = len(ref_counts[i])
            for rc in ref_counts[i]:
                for g, c in rc.items():
                    mean_ref[g] = mean_ref.get(g, 0.0) + c / k
            ref = {g: v * idf(g) for g, v in mean_ref.items()}
            num = sum(v * ref.get(g, 0.0) for g, v in cand.items())
            nc = math.sqrt(sum(v * v for v in cand.values()))
            nr = math.sqrt(sum(v * v for v in ref.values()))
            if nc > 0 and nr > 0:
                scores[i] += num / (nc * nr)
    return (scores * CIDER_SCALE / MAX_N).tolist()


def cider_per_image(
    candidates: Mapping[int, Tokens], references: Mapping[int, Sequence[Tokens]]
) -> dict[int, float]:
    ids = _aligned(candidates, references)
    vals = cider_scores([candidates[i] for i in ids], [references[i] for i in ids])
    return dict(zip(ids, vals))


def cider(candidates: Mapping[int, Tokens], references: Mapping[int, Sequence[Tokens]]) -> float:
    per = cider_per_image(candidates, references)
    return float(np.mean(list(per.values())))


# ---------------------------------------------------------------------------
# precomputed corpus statistics for repeated evaluation


@dataclass
class _CiderOrder:
    incidence: sparse.csr_matrix  # images x ngrams, 1 if ngram in image's refs
    cand_sq: sparse.csr_matrix
    ref_sq: sparse.csr_matrix
    cross: sparse.csr_matrix


@dataclass
class CorpusStats:
    """Sufficient statistics of a fixed (candidates, references) corpus.

    Any reweighting of images (bootstrap multiplicities, subsets) is then
    scored with a handful of sparse products instead of re-counting n-grams.
    """

    image_ids: list[int]
    bleu: np.ndarray  # images x 10
    orders: list[_CiderOrder] = field(repr=False)

    @classmethod
    def build(
        cls, candidates: Mapping[int, Tokens], references: Mapping[int, Sequence[Tokens]]
    ) -> "CorpusStats":
        ids = _aligned(candidates, references)
        bleu = np.stack([bleu_stats(candidates[i], references[i]) for i in ids])
        orders = []
        for n in range(1, MAX_N + 1):
            col: dict = {}
            inc_rows, inc_cols = [], []
            c_data, c_rows, c_cols = [], [], []
            r_data, r_rows, r_cols = [], [], []
            for row, i in enumerate(ids):
                refs = references[i]
                mean_ref: dict = {}
                for r in refs:
                    for g, c in ngrams(r, n).items():
                        mean_ref[g] = mean_ref.get(g, 0.0) + c / len(refs)
                for g, v in mean_ref.items():
                    j = col.setdefault(g, len(col))
                    inc_rows.append(row)
                    inc_cols.append(j)
                    r_rows.append(row)
                    r_cols.append(j)
                    r_data.append(v)
                for g, c in ngrams(candidates[i], n).items():
                    j = col.setdefault(g, len(col))
                    c_rows.append(row)
                    c_cols.append(j)
                    c_data.append(float(c))
            shape = (len(ids), max(len(col), 1))
            inc = sparse.csr_matrix((np.ones(len(inc_rows)), (inc_rows, inc_cols)), shape=shape)
            C = sparse.csr_matrix((c_data, (c_rows, c_cols)), shape=shape)
            R = sparse.csr_matrix((r_data, (r_rows, r_cols)), shape=shape)
            orders.append(_CiderOrder(inc, C.multiply(C).tocsr(), R.multiply(R).tocsr(), C.multiply(R).tocsr()))
        return cls(list(ids), bleu, orders)

    def _weights(self, weights) -> np.ndarray:
        if weights is None:
            return np.ones(len(self.image_ids))
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(self.image_ids),):
            raise HarnessError("weights must have one entry per image")
        return w

    def bleu4(self, weights=None) -> float:
        w = self._weights(weights)
        return bleu_from_stats(w @ self.bleu)

    def cider_per_image(self, weights=None) -> np.ndarray:
        """Per-image CIDEr with document frequencies taken from the weighted corpus."""
        w = self._weights(weights)
        M = float(w.sum())
        if M < 2:
            raise HarnessError("CIDEr needs at least 2 images: IDF is undefined for a single image")
        total = np.zeros(len(self.image_ids))
        for o in self.orders:
            df = o.incidence.T @ w
            idf2 = (math.log(M) - np.log(np.maximum(df, 1.0))) ** 2
            num = o.cross @ idf2
            nc = o.cand_sq @ idf2
            nr = o.ref_sq @ idf2
            ok = (nc > 0) & (nr > 0)
            cos = np.zeros_like(num)
            cos[ok] = num[ok] / np.sqrt(nc[ok] * nr[ok])
            total += cos
        return total * CIDER_SCALE / MAX_N

    def cider(self, weights=None) -> float:
        w = self._weights(weights)
        return float(w @ self.cider_per_image(w) / w.sum())


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    corpus: dict[str, float]
    per_example: list[dict]

    def to_json(self) -> dict:
        return {"corpus": self.corpus, "per_example": self.per_example}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(corpus=dict(obj["corpus"]), per_example=list(obj.get("per_example", [])))


def evaluate(
    candidates: Mapping[int, Tokens], references: Mapping[int, Sequence[Tokens]]
) -> MetricReport:
    """Corpus BLEU-4 and CIDEr plus per-image sentence BLEU and CIDEr."""
    ids = _aligned(candidates, references)
    per_cider = cider_per_image(candidates, references)
    per = [
        {
            "image_id": i,
            "bleu4": bleu4_sentence(candidates[i], references[i]),
            "cider": per_cider[i],
        }
        for i in ids
    ]
    corpus = {
        "bleu4": bleu4(candidates, references),
        "cider": float(np.mean([p["cider"] for p in per])),
    }
    return MetricReport(corpus=corpus, per_example=per)


METRICS = {"cider": cider, "bleu4": bleu4}
