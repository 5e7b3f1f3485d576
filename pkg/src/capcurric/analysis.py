"""Evaluation procedures built on top of trained models and metric reports.

Covers difficulty-level test-set division, cross-dataset evaluation,
dispersion comparison of score distributions, and the paired bootstrap
significance test.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import UNK, HarnessError
from .data import Dataset, strip_special
from .difficulty import dispersion, normalize_scores
from .learner import ToyModel, greedy_decode_batch
from .metrics import CorpusStats, MetricReport, evaluate
from .scheduler import bucket_bounds

HIST_BINS = 20


def divide_by_difficulty(per_image_bleu: Mapping[int, float], levels: int) -> list[list[int]]:
    """Split images into ``levels`` near-equal groups, Level-1 holding the highest BLEU."""
    if levels < 2:
        raise HarnessError("levels must be >= 2")
    ranked = sorted(per_image_bleu, key=lambda i: (-per_image_bleu[i], i))
    return [ranked[lo:hi] for lo, hi in bucket_bounds(len(ranked), levels)]


# ---------------------------------------------------------------------------
# decoding and cross-dataset evaluation


def decode_split(model: ToyModel, dataset: Dataset, split: str, max_len: int | None = None) -> dict[int, list[int]]:
    ids, feats = dataset.image_features(split)
    if not ids:
        raise HarnessError(f"split {split!r} of {dataset.name} has no images")
    if feats.shape[1] != model.F:
        raise HarnessError(f"feature dimension {feats.shape[1]} does not match model F={model.F}")
    if max_len is None:
        longest = max(len(strip_special(r)) for i in ids for r in dataset.references[i])
        max_len = longest + 2
    return dict(zip(ids, greedy_decode_batch(model, feats, max_len)))


def split_references(dataset: Dataset, image_ids) -> dict[int, list[list[int]]]:
    return {i: [strip_special(r) for r in dataset.references[i]] for i in image_ids}


def reencode(tokens: Sequence[int], src_vocab: Sequence[str], dst_index: Mapping[str, int]) -> list[int]:
    """Map ids of one vocabulary into another by token string; unknown strings become UNK."""
    return [dst_index.get(src_vocab[t], UNK) for t in tokens]


def cross_dataset_eval(
    model: ToyModel,
    model_vocab: Sequence[str],
    foreign: Dataset,
    split: str = "test",
) -> MetricReport:
    """Score a model on another corpus, references re-encoded into the model vocabulary."""
    if foreign.feature_dim != model.F:
        raise HarnessError(f"foreign feature dimension {foreign.feature_dim} != model F={model.F}")
    if len(model_vocab) != model.V:
        raise HarnessError("model vocabulary length does not match model V")
    index = {w: i for i, w in enumerate(model_vocab)}
    cands = decode_split(model, foreign, split)
    refs = {
        i: [reencode(r, foreign.vocab, index) for r in rs]
        for i, rs in split_references(foreign, cands).items()
    }
    return evaluate(cands, refs)


# ---------------------------------------------------------------------------
# dispersion


@dataclass
class DispersionEntry:
    method: str
    stddev: float
    iqr: float
    histogram: list[int]
    n: int


def compare_dispersion(score_tables: Sequence[tuple[str, Sequence[float]]]) -> list[DispersionEntry]:
    """Rank methods by standard deviation of their min-max normalized scores (widest first)."""
    if len(score_tables) < 2:
        raise HarnessError("compare_dispersion needs at least 2 methods")
    out = []
    for method, scores in score_tables:
        norm = normalize_scores(scores)
        d = dispersion(norm)
        hist, _ = np.histogram(norm, bins=HIST_BINS, range=(0.0, 1.0))
        out.append(DispersionEntry(str(method), d["stddev"], d["iqr"], hist.tolist(), int(norm.size)))
    out.sort(key=lambda e: (-e.stddev, e.method))
    return out


def histogram_csv(entry: DispersionEntry) -> str:
    buf = io.StringIO()
    buf.write("bin_left,count\n")
    for k, c in enumerate(entry.histogram):
        buf.write(f"{k / HIST_BINS:.2f},{c}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# paired bootstrap


@dataclass
class SignificanceResult:
    p_value: dict[str, float]
    n_resamples: int
    resample_size: int
    seed: int
    wins: dict[str, int] = field(default_factory=dict)
    losses: dict[str, int] = field(default_factory=dict)
    ties: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def resample_ids(image_ids: Sequence[int], size: int, seed: int, replicate: int) -> np.ndarray:
    """Image ids drawn with replacement for one replicate; each replicate owns its RNG stream."""
    rng = np.random.default_rng([seed, replicate])
    return np.asarray(image_ids)[rng.integers(0, len(image_ids), size=size)]


def paired_bootstrap_test(
    cands_a: Mapping[int, Sequence[int]],
    cands_b: Mapping[int, Sequence[int]],
    references: Mapping[int, Sequence[Sequence[int]]],
    n_resamples: int = 1000,
    resample_size: int | None = None,
    seed: int = 0,
    threads: int = 1,
) -> SignificanceResult:
    """One-sided paired bootstrap: how often does system A fail to beat system B?

    Every replicate draws ``resample_size`` images with replacement and
    computes corpus BLEU-4 and CIDEr for both systems on it. The p-value per
    metric is ``(losses + ties / 2) / n_resamples``, so comparing a system
    with itself gives exactly 0.5.
    """
    if set(cands_a) != set(cands_b):
        raise HarnessError("systems A and B must cover the same image ids")
    if n_resamples < 1:
        raise HarnessError("n_resamples must be >= 1")
    ids = sorted(cands_a)
    size = len(ids) if resample_size is None else int(resample_size)
    if size < 1:
        raise HarnessError("resample_size must be >= 1")
    stats_a = CorpusStats.build(cands_a, references)
    stats_b = CorpusStats.build(cands_b, references)
    position = np.arange(len(ids))

    def replicate(r: int) -> tuple[float, float, float, float]:
        draw = resample_ids(position, size, seed, r)
        w = np.bincount(draw, minlength=len(ids)).astype(np.float64)
        return stats_a.bleu4(w), stats_b.bleu4(w), stats_a.cider(w), stats_b.cider(w)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(replicate, range(n_resamples)))
    else:
        rows = [replicate(r) for r in range(n_resamples)]
    scores = np.asarray(rows)

    result = SignificanceResult(p_value={}, n_resamples=n_resamples, resample_size=size, seed=seed)
    for name, (ca, cb) in {"bleu4": (0, 1), "cider": (2, 3)}.items():
        a, b = scores[:, ca], scores[:, cb]
        wins, losses = int(np.sum(a > b)), int(np.sum(a < b))
        ties = n_resamples - wins - losses
        result.wins[name], result.losses[name], result.ties[name] = wins, losses, ties
        result.p_value[name] = (losses + 0.5 * ties) / n_resamples
    return result


def evaluate_levels(
    candidates: Mapping[int, Sequence[int]],
    references: Mapping[int, Sequence[Sequence[int]]],
    levels: Sequence[Sequence[int]],
) -> list[dict[str, float]]:
    """Corpus BLEU-4 and CIDEr of one system on each difficulty level."""
    out = []
    for lv in levels:
        rep = evaluate({i: candidates[i] for i in lv}, {i: references[i] for i in lv})
        out.append(rep.corpus)
    return out
