"""Difficulty measurements for (image, caption) pairs.

All scores carry a canonical ``difficulty`` where larger means harder.
Similarity scores are negated to get there; entropy and NLL scores are
already oriented that way.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import HarnessError
from .data import AffineHead, CaptionPair, iter_jsonl
from .learner import ToyModel, caption_nll

PROB_FLOOR = 1e-12


class Method(str, enum.Enum):
    SIMI_COSINE = "SimiCosine"
    SIMI_SIGMOID = "SimiSigmoid"
    ADDUP = "Addup"
    BOOTSTRAP = "Bootstrap"


SIMILARITY_METHODS = (Method.SIMI_COSINE, Method.SIMI_SIGMOID)


@dataclass(frozen=True)
class DifficultyScore:
    pair_id: int
    raw: float
    difficulty: float
    method: Method

    def to_json(self) -> dict:
        return {"pair_id": self.pair_id, "method": self.method.value, "raw": self.raw, "difficulty": self.difficulty}


@dataclass(frozen=True)
class AddupConfig:
    lam: float = 0.6
    K: int = 10
    N: int = 1600

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise HarnessError("lambda must lie in [0, 1]")
        if self.K < 1 or self.N < 2:
            raise HarnessError("AddupConfig needs K >= 1 and N >= 2")


def make_score(pair_id: int, raw: float, method: Method) -> DifficultyScore:
    method = Method(method)
    difficulty = -raw if method in SIMILARITY_METHODS else raw
    return DifficultyScore(int(pair_id), float(raw), float(difficulty), method)


# ---------------------------------------------------------------------------
# primitive measurements


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape or x.shape[0] == 0:
        raise HarnessError(f"cosine_similarity: dimension mismatch {x.shape} vs {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise HarnessError("cosine_similarity: zero-norm input")
    return float(np.clip((x @ y) / (nx * ny), -1.0, 1.0))


def sigmoid(t: float) -> float:
    # branch on sign so exp never overflows
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def sigmoid_head_score(z, head: AffineHead) -> float:
    """Probability-like match score ``sigmoid(W @ z + b)`` of a joint representation."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    W = np.asarray(head.W, dtype=np.float64).reshape(-1)
    if z.shape != W.shape:
        raise HarnessError(f"sigmoid_head_score: joint_repr dim {z.shape[0]} != head dim {W.shape[0]}")
    return sigmoid(float(W @ z) + float(head.b))


def detection_entropy(det_probs) -> float:
    """Summed Shannon entropy (nats) of the per-box class distributions."""
    p = np.asarray(det_probs, dtype=np.float64)
    if p.ndim != 2:
        raise HarnessError("detection_entropy expects a K x N matrix")
    if np.any(p < 0):
        raise HarnessError("detection_entropy: negative probability")
    rows = p.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-6):
        raise HarnessError("detection_entropy: rows must sum to 1 (row-stochastic)")
    safe = np.maximum(p, PROB_FLOOR)
    return float(-np.sum(np.where(p > 0, p * np.log(safe), 0.0)))


def token_negloglik(lm_logprobs) -> float:
    lp = np.asarray(lm_logprobs, dtype=np.float64)
    if np.any(lp > 0):
        raise HarnessError("token_negloglik: log-probabilities must be <= 0")
    return float(-lp.sum())


def addup_difficulty(dv: float, dt: float, cfg: AddupConfig) -> float:
    return cfg.lam * dv + (1.0 - cfg.lam) * dt


def bootstrap_difficulty(model: ToyModel, pair: CaptionPair) -> float:
    """Cross-entropy of the caption under a model trained without a curriculum."""
    if pair.features.shape[0] != model.F:
        raise HarnessError(f"pair {pair.pair_id}: feature dim {pair.features.shape[0]} != model F={model.F}")
    if int(pair.tokens.max()) >= model.V:
        raise HarnessError(f"pair {pair.pair_id}: token id outside model vocabulary (V={model.V})")
    return caption_nll(model, pair)


def normalize_scores(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise HarnessError("normalize_scores needs at least 2 scores")
    lo, hi = s.min(), s.max()
    if hi == lo:
        raise HarnessError("normalize_scores: all scores are equal (degenerate range)")
    return (s - lo) / (hi - lo)


def dispersion(scores: Sequence[float]) -> dict[str, float]:
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise HarnessError("dispersion needs at least 2 scores")
    q1, q3 = np.percentile(s, [25, 75])
    return {"stddev": float(np.std(s)), "iqr": float(q3 - q1)}


def rank_by_difficulty(scores: Sequence[DifficultyScore]) -> list[int]:
    """Positions into ``scores`` from easiest to hardest; ties go to the lower pair_id."""
    methods = {s.method for s in scores}
    if len(methods) > 1:
        raise HarnessError(f"rank_by_difficulty: mixed methods {sorted(m.value for m in methods)}")
    return sorted(range(len(scores)), key=lambda i: (scores[i].difficulty, scores[i].pair_id))


# ---------------------------------------------------------------------------
# whole-dataset scoring


class MissingFieldError(HarnessError):
    def __init__(self, pair_id: int, field_name: str):
        super().__init__(f"pair {pair_id} is missing required field {field_name!r}")
        self.pair_id = pair_id
        self.field_name = field_name


def _require(pair: CaptionPair, *names: str) -> None:
    for name in names:
        if getattr(pair, name) is None:
            raise MissingFieldError(pair.pair_id, name)


def score_pairs(
    pairs: Sequence[CaptionPair],
    method: Method | str,
    *,
    head: AffineHead | None = None,
    addup: AddupConfig | None = None,
    model: ToyModel | None = None,
) -> list[DifficultyScore]:
    """Score every pair with one measurement.

    Addup min-max normalizes the visual and textual terms over ``pairs``
    before the weighted sum; the two raw scales are not comparable otherwise.
    """
    method = Method(method)
    if method is Method.SIMI_COSINE:
        out = []
        for p in pairs:
            _require(p, "vis_embed", "txt_embed")
            out.append(make_score(p.pair_id, cosine_similarity(p.vis_embed, p.txt_embed), method))
        return out
    if method is Method.SIMI_SIGMOID:
        if head is None:
            raise HarnessError("simi-sigmoid scoring needs an affine head")
        out = []
        for p in pairs:
            _require(p, "joint_repr")
            out.append(make_score(p.pair_id, sigmoid_head_score(p.joint_repr, head), method))
        return out
    if method is Method.ADDUP:
        cfg = addup or AddupConfig()
        dv, dt = [], []
        for p in pairs:
            _require(p, "det_probs", "lm_logprobs")
            if p.det_probs.shape != (cfg.K, cfg.N):
                raise HarnessError(
                    f"pair {p.pair_id}: det_probs shape {p.det_probs.shape} != (K={cfg.K}, N={cfg.N})"
                )
            dv.append(detection_entropy(p.det_probs))
            dt.append(token_negloglik(p.lm_logprobs))
        dvn, dtn = normalize_scores(dv), normalize_scores(dt)
        return [
            make_score(p.pair_id, addup_difficulty(a, b, cfg), method)
            for p, a, b in zip(pairs, dvn, dtn)
        ]
    if method is Method.BOOTSTRAP:
        if model is None:
            raise HarnessError("bootstrap scoring needs a trained model checkpoint")
        return [make_score(p.pair_id, bootstrap_difficulty(model, p), method) for p in pairs]
    raise HarnessError(f"unknown method {method}")


def save_scores(scores: Sequence[DifficultyScore], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(json.dumps(s.to_json()) + "\n")


def load_scores(path: str | Path) -> list[DifficultyScore]:
    out = []
    for line_no, obj in iter_jsonl(path):
        try:
            out.append(
                DifficultyScore(
                    int(obj["pair_id"]), float(obj["raw"]), float(obj["difficulty"]), Method(obj["method"])
                )
            )
        except (KeyError, ValueError) as exc:
            raise HarnessError(f"{path}: line {line_no}: malformed score ({exc})") from None
    return out
