"""Baby Step curriculum: sorted buckets merged one at a time on validation plateaus."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import HarnessError
from .data import Dataset, strip_special
from .difficulty import DifficultyScore, rank_by_difficulty
from .learner import LearnerConfig, ToyModel, encode, greedy_decode_batch, init_model, train_epoch
from .metrics import bleu4, cider


def bucket_bounds(n: int, L: int) -> list[tuple[int, int]]:
    """Half-open ranges of L near-equal contiguous slices; the first n % L get one extra."""
    if L < 1 or L > n:
        raise HarnessError(f"bucket count L={L} must lie in [1, {n}]")
    base, extra = divmod(n, L)
    bounds, start = [], 0
    for i in range(L):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


@dataclass
class Curriculum:
    order: list[int]
    L: int
    buckets: list[tuple[int, int]]
    stage: int = 1

    @classmethod
    def from_order(cls, order: Sequence[int], L: int) -> "Curriculum":
        order = [int(i) for i in order]
        if sorted(order) != list(range(len(order))):
            raise HarnessError("curriculum order must be a permutation of 0..n-1")
        return cls(order=order, L=L, buckets=bucket_bounds(len(order), L))

    def reversed(self) -> "Curriculum":
        return Curriculum.from_order(self.order[::-1], self.L)

    def bucket(self, i: int) -> list[int]:
        lo, hi = self.buckets[i]
        return self.order[lo:hi]


def build_curriculum(scores: Sequence[DifficultyScore], L: int) -> Curriculum:
    return Curriculum.from_order(rank_by_difficulty(scores), L)


BASELINES = ("none", "vanilla", "anti", "random")


def baseline_curriculum(
    kind: str, scores: Sequence[DifficultyScore] | None, n: int, L: int, seed: int = 0
) -> Curriculum:
    """The curriculum for a training strategy.

    ``none`` sorts by difficulty, ``anti`` reverses that order exactly,
    ``random`` buckets a seeded shuffle and ``vanilla`` is one bucket in
    file order.
    """
    if kind == "vanilla":
        return Curriculum.from_order(range(n), 1)
    if kind == "random":
        return Curriculum.from_order(np.random.default_rng(seed).permutation(n), L)
    if kind not in ("none", "anti"):
        raise HarnessError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    if scores is None or len(scores) != n:
        raise HarnessError(f"difficulty scores for all {n} training pairs are required")
    curr = build_curriculum(scores, L)
    return curr.reversed() if kind == "anti" else curr


def active_set(curr: Curriculum) -> list[int]:
    if not 1 <= curr.stage <= curr.L:
        raise HarnessError(f"stage {curr.stage} outside [1, {curr.L}]")
    return curr.order[: curr.buckets[curr.stage - 1][1]]


@dataclass
class PlateauDetector:
    """Signals an advance after ``patience`` observations without improvement.

    Higher metric values are better. The best value survives an advance so
    the next stage has to beat everything seen so far.
    """

    patience: float = 3
    min_delta: float = 0.0
    best: float = -math.inf
    epochs_since_best: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise HarnessError("patience must be >= 1")
        if self.min_delta < 0:
            raise HarnessError("min_delta must be >= 0")


def observe(det: PlateauDetector, metric: float) -> dict[str, bool]:
    if not math.isfinite(metric):
        raise HarnessError(f"plateau detector received a non-finite metric {metric}")
    if metric > det.best + det.min_delta:
        det.best = metric
        det.epochs_since_best = 0
        return {"advance": False}
    det.epochs_since_best += 1
    if det.epochs_since_best >= det.patience:
        det.epochs_since_best = 0
        return {"advance": True}
    return {"advance": False}


@dataclass
class ScheduleConfig:
    max_epochs: int = 120
    patience: float = 3
    min_delta: float = 0.0
    seed: int = 0
    metric: str = "cider"
    strict_termination: bool = False
    max_len: int | None = None

    def __post_init__(self):
        if self.max_epochs < 1:
            raise HarnessError("max_epochs must be >= 1")
        if self.metric not in ("cider", "bleu4"):
            raise HarnessError(f"unknown validation metric {self.metric!r}")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    stage_advances: list[int] = field(default_factory=list)
    termination: str = ""
    best_epoch: int = 0
    best_metric: float = -math.inf
    L: int = 1
    metric: str = "cider"

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


class Validator:
    """Greedy-decodes a split and scores it against the dataset references."""

    def __init__(self, dataset: Dataset, split: str = "valid", metric: str = "cider", max_len: int | None = None):
        self.image_ids, self.features = dataset.image_features(split)
        if not self.image_ids:
            raise HarnessError(f"split {split!r} has no images to validate on")
        self.references = {i: [strip_special(r) for r in dataset.references[i]] for i in self.image_ids}
        longest = max(len(r) for refs in self.references.values() for r in refs)
        self.max_len = max_len or longest + 2
        self.metric = {"cider": cider, "bleu4": bleu4}[metric]

    def candidates(self, model: ToyModel) -> dict[int, list[int]]:
        decoded = greedy_decode_batch(model, self.features, self.max_len)
        return dict(zip(self.image_ids, decoded))

    def __call__(self, model: ToyModel) -> float:
        return self.metric(self.candidates(model), self.references)


def run_babystep(
    dataset: Dataset,
    curriculum: Curriculum,
    learner_config: LearnerConfig,
    schedule_config: ScheduleConfig,
    model: ToyModel | None = None,
) -> tuple[ToyModel, TrainReport]:
    """Train under the Baby Step schedule and return the best-validation snapshot.

    Each epoch reshuffles the active buckets with an epoch-seeded RNG, runs
    one SGD epoch, and scores the validation split. A plateau merges the next
    bucket; once every bucket is active, a further plateau ends training
    unless ``strict_termination`` asks to run to ``max_epochs``.
    """
    sc = schedule_config
    train = dataset.split_pairs("train")
    if len(curriculum.order) != len(train):
        raise HarnessError(f"curriculum covers {len(curriculum.order)} pairs but the train split has {len(train)}")
    validate = Validator(dataset, "valid", sc.metric, sc.max_len)
    enc = encode(train)
    if model is None:
        model = init_model(dataset.V, dataset.feature_dim, learner_config)
    curriculum.stage = 1
    det = PlateauDetector(patience=sc.patience, min_delta=sc.min_delta)
    report = TrainReport(L=curriculum.L, metric=sc.metric)
    best_model = model.copy()
    order = np.asarray(curriculum.order)

    for epoch in range(1, sc.max_epochs + 1):
        active = order[: curriculum.buckets[curriculum.stage - 1][1]]
        rng = np.random.default_rng([sc.seed, epoch])
        batch_order = active[rng.permutation(len(active))]
        try:
            loss = train_epoch(model, enc.take(batch_order), learner_config)["mean_loss"]
        except HarnessError as exc:
            raise HarnessError(f"epoch {epoch}: {exc}") from None
        metric = float(validate(model))
        report.epochs.append(
            {
                "epoch": epoch,
                "stage": curriculum.stage,
                "active_count": int(len(active)),
                "train_loss": loss,
                "valid_metric": metric,
            }
        )
        if metric > report.best_metric:
            report.best_metric = metric
            report.best_epoch = epoch
            best_model = model.copy()
        if observe(det, metric)["advance"]:
            if curriculum.stage < curriculum.L:
                curriculum.stage += 1
                report.stage_advances.append(epoch)
            elif not sc.strict_termination:
                report.termination = "final_plateau"
                break
    else:
        report.termination = "max_epochs"
    return best_model, report
