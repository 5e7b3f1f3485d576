import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capcurric import HarnessError
from capcurric.difficulty import Method, make_score
from capcurric.learner import LearnerConfig
from capcurric.scheduler import (
    Curriculum,
    PlateauDetector,
    ScheduleConfig,
    active_set,
    baseline_curriculum,
    bucket_bounds,
    build_curriculum,
    observe,
    run_babystep,
)

score_tables = st.lists(
    st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False), min_size=1, max_size=60
).flatmap(lambda vals: st.tuples(st.just(vals), st.integers(1, len(vals))))


def table(vals):
    return [make_score(i, v, Method.ADDUP) for i, v in enumerate(vals)]


class TestBuckets:
    @pytest.mark.parametrize(
        "n, L, sizes", [(10, 3, [4, 3, 3]), (10, 5, [2] * 5), (7, 7, [1] * 7), (5, 1, [5]), (11, 4, [3, 3, 3, 2])]
    )
    def test_sizes(self, n, L, sizes):
        assert [hi - lo for lo, hi in bucket_bounds(n, L)] == sizes

    @pytest.mark.parametrize("n, L", [(5, 0), (5, 6)])
    def test_bad_L(self, n, L):
        with pytest.raises(HarnessError):
            bucket_bounds(n, L)

    def test_order_must_be_permutation(self):
        with pytest.raises(HarnessError):
            Curriculum.from_order([0, 0, 1], 1)


class TestCurriculumProperties:
    @given(score_tables)
    @settings(max_examples=150, deadline=None)
    def test_partition_sorted_and_balanced(self, case):
        vals, L = case
        curr = build_curriculum(table(vals), L)
        buckets = [curr.bucket(i) for i in range(L)]
        flat = [i for b in buckets for i in b]
        assert sorted(flat) == list(range(len(vals)))
        sizes = [len(b) for b in buckets]
        assert max(sizes) - min(sizes) <= 1 and min(sizes) >= 1
        assert sizes == sorted(sizes, reverse=True)
        # every pair in an earlier bucket is no harder than any later one
        for a, b in zip(buckets, buckets[1:]):
            assert max(vals[i] for i in a) <= min(vals[i] for i in b)

    @given(score_tables)
    @settings(max_examples=150, deadline=None)
    def test_active_sets_are_growing_prefixes(self, case):
        vals, L = case
        curr = build_curriculum(table(vals), L)
        prev = []
        for stage in range(1, L + 1):
            curr.stage = stage
            act = active_set(curr)
            assert act[: len(prev)] == prev and len(act) > len(prev)
            prev = act
        assert sorted(prev) == list(range(len(vals)))

    @given(score_tables)
    @settings(max_examples=100, deadline=None)
    def test_anti_is_exact_reverse(self, case):
        vals, L = case
        scores = table(vals)
        none = baseline_curriculum("none", scores, len(vals), L)
        anti = baseline_curriculum("anti", scores, len(vals), L)
        assert anti.order == none.order[::-1]
        assert anti.buckets == none.buckets

    def test_ties_broken_by_pair_id(self):
        curr = build_curriculum(table([1.0, 0.0, 1.0, 0.0]), 2)
        assert curr.order == [1, 3, 0, 2]

    def test_random_baseline_seeded(self):
        a = baseline_curriculum("random", None, 30, 5, seed=4)
        b = baseline_curriculum("random", None, 30, 5, seed=4)
        c = baseline_curriculum("random", None, 30, 5, seed=5)
        assert a.order == b.order != c.order

    def test_vanilla_is_single_bucket(self):
        v = baseline_curriculum("vanilla", None, 9, 3)
        assert v.L == 1 and active_set(v) == list(range(9))

    def test_missing_scores(self):
        with pytest.raises(HarnessError):
            baseline_curriculum("none", None, 4, 2)
        with pytest.raises(HarnessError):
            baseline_curriculum("bogus", None, 4, 2)


class TestPlateau:
    def _advances(self, seq, **kw):
        det = PlateauDetector(**kw)
        return [observe(det, m)["advance"] for m in seq]

    def test_improving_never_advances(self):
        assert self._advances([1, 2, 3]) == [False] * 3

    def test_flat_advances_on_fourth(self):
        assert self._advances([5, 5, 5, 5]) == [False, False, False, True]

    def test_patience_one(self):
        assert self._advances([5, 4], patience=1) == [False, True]

    def test_counter_resets_but_best_survives(self):
        det = PlateauDetector(patience=2)
        out = [observe(det, m)["advance"] for m in [5, 4, 4, 4.5, 4.9]]
        assert out == [False, False, True, False, True]
        assert det.best == 5

    def test_min_delta(self):
        assert self._advances([1.0, 1.05, 1.08], patience=2, min_delta=0.1) == [False, False, True]

    @given(
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=40),
        st.integers(1, 5),
    )
    @settings(max_examples=150, deadline=None)
    def test_advance_after_exactly_patience_misses(self, metrics, patience):
        det = PlateauDetector(patience=patience)
        best, misses = -math.inf, 0
        for m in metrics:
            got = observe(det, m)["advance"]
            if m > best:
                best, misses, want = m, 0, False
            else:
                misses += 1
                want = misses == patience
                if want:
                    misses = 0
            assert got == want

    def test_rejects_nan_and_bad_patience(self):
        with pytest.raises(HarnessError):
            observe(PlateauDetector(), float("nan"))
        with pytest.raises(HarnessError):
            PlateauDetector(patience=0)


def _scores_for(ds):
    return table(np.random.default_rng(0).normal(size=len(ds.split_pairs("train"))))


class TestRunBabystep:
    LC = LearnerConfig(lr=0.1, seed=1, batch_size=5)

    def test_single_bucket_matches_vanilla(self, small_dataset):
        n = len(small_dataset.split_pairs("train"))
        sc = ScheduleConfig(max_epochs=8, seed=2)
        # constant scores sort into file order, so L=1 must replay vanilla exactly
        one = build_curriculum(table([0.0] * n), 1)
        m1, r1 = run_babystep(small_dataset, one, self.LC, sc)
        mv, rv = run_babystep(small_dataset, baseline_curriculum("vanilla", None, n, 1), self.LC, sc)
        assert r1.dumps() == rv.dumps()
        assert np.array_equal(m1.Wo, mv.Wo)
        assert [e["active_count"] for e in r1.epochs] == [n] * len(r1.epochs)

    def test_stage_monotone_and_reaches_L(self, small_dataset):
        curr = build_curriculum(_scores_for(small_dataset), 4)
        _, rep = run_babystep(small_dataset, curr, self.LC, ScheduleConfig(max_epochs=200, patience=1))
        stages = [e["stage"] for e in rep.epochs]
        assert stages == sorted(stages)
        assert stages[-1] == 4
        assert rep.termination == "final_plateau"
        counts = [e["active_count"] for e in rep.epochs]
        assert counts == sorted(counts)
        assert all(0 < b - a for a, b in zip(rep.stage_advances, rep.stage_advances[1:]))

    def test_replay_is_bit_identical(self, small_dataset):
        sc = ScheduleConfig(max_epochs=10, patience=2, seed=7)
        runs = []
        for _ in range(2):
            curr = build_curriculum(_scores_for(small_dataset), 3)
            model, rep = run_babystep(small_dataset, curr, self.LC, sc)
            runs.append((model, rep.dumps()))
        assert runs[0][1] == runs[1][1]
        assert np.array_equal(runs[0][0].Wy, runs[1][0].Wy)

    def test_infinite_patience_stays_on_first_bucket(self, small_dataset):
        curr = build_curriculum(_scores_for(small_dataset), 3)
        _, rep = run_babystep(small_dataset, curr, self.LC, ScheduleConfig(max_epochs=6, patience=math.inf))
        first = curr.buckets[0][1]
        assert all(e["active_count"] == first and e["stage"] == 1 for e in rep.epochs)
        assert rep.termination == "max_epochs" and len(rep.epochs) == 6

    def test_best_snapshot_matches_report(self, small_dataset):
        from capcurric.scheduler import Validator

        curr = build_curriculum(_scores_for(small_dataset), 2)
        model, rep = run_babystep(small_dataset, curr, self.LC, ScheduleConfig(max_epochs=12, patience=2))
        assert Validator(small_dataset)(model) == pytest.approx(rep.best_metric, abs=1e-12)
        assert rep.best_metric == max(e["valid_metric"] for e in rep.epochs)

    def test_strict_termination_runs_to_cap(self, small_dataset):
        curr = build_curriculum(_scores_for(small_dataset), 1)
        sc = ScheduleConfig(max_epochs=15, patience=1, strict_termination=True)
        _, rep = run_babystep(small_dataset, curr, self.LC, sc)
        assert len(rep.epochs) == 15 and rep.termination == "max_epochs"

    def test_empty_validation_split(self, small_dataset):
        from dataclasses import replace

        ds = replace(small_dataset, pairs=[p for p in small_dataset.pairs if p.split != "valid"])
        curr = build_curriculum(_scores_for(ds), 2)
        with pytest.raises(HarnessError, match="valid"):
            run_babystep(ds, curr, self.LC, ScheduleConfig(max_epochs=2))

    def test_curriculum_size_mismatch(self, small_dataset):
        with pytest.raises(HarnessError):
            run_babystep(small_dataset, Curriculum.from_order(range(5), 1), self.LC, ScheduleConfig())
