from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import ideal_mrr_oracle

from sdmkit.data import Dataset
from sdmkit.evaluation import (EvaluationError, RankedPrediction, holdout_protocol, ideal_mrr, monte_carlo_protocol,
                               monte_carlo_split, mrr, mrr_from_scores, random_ranking_mrr, rank_scores)


def ranked(occ_id, species):
    return RankedPrediction(occ_id, species, np.linspace(1, 0, len(species)))


class TestMRR:
    def test_single_hit(self):
        assert mrr([ranked(0, [4, 2])], [4]).mrr == 1.0

    def test_ranks_one_two_four(self):
        preds = [ranked(0, [7, 1, 2, 3]), ranked(1, [1, 7, 2, 3]), ranked(2, [1, 2, 3, 7])]
        report = mrr(preds, [7, 7, 7])
        assert abs(report.mrr - 0.5833333333333334) < 1e-12
        np.testing.assert_allclose(report.reciprocal_ranks, [1.0, 0.5, 0.25])

    def test_truth_absent_scores_zero(self):
        pred = ranked(0, list(range(100)))
        report = mrr([pred, ranked(1, [150])], [150, 150])
        np.testing.assert_array_equal(report.reciprocal_ranks, [0.0, 1.0])

    def test_truncation_past_limit(self):
        pred = ranked(0, list(range(150)))
        assert mrr([pred], [120]).mrr == 0.0
        assert mrr([pred], [120], limit=200).mrr == pytest.approx(1 / 121)

    def test_mapping_truth_missing_prediction(self):
        with pytest.raises(EvaluationError, match="no prediction for query 8"):
            mrr([ranked(3, [0])], {3: 0, 8: 1})

    def test_mapping_truth_reorders(self):
        report = mrr([ranked(3, [0, 1]), ranked(8, [0, 1])], {8: 1, 3: 0})
        np.testing.assert_allclose(report.reciprocal_ranks, [0.5, 1.0])

    def test_empty(self):
        with pytest.raises(EvaluationError):
            mrr([], [])

    def test_hit_rates(self):
        preds = [ranked(i, [i] + [s for s in range(30) if s != i]) for i in range(4)]
        report = mrr(preds, [0, 5, 6, 29])
        assert report.hit_rates == {1: 0.25, 10: 0.75, 100: 1.0}

    def test_duplicate_species_rejected(self):
        with pytest.raises(EvaluationError, match="duplicate"):
            RankedPrediction(0, [1, 1], [0.5, 0.4])

    def test_increasing_scores_rejected(self):
        with pytest.raises(EvaluationError):
            RankedPrediction(0, [1, 2], [0.4, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 9), min_size=1, max_size=20), st.randoms(use_true_random=False))
    def test_permutation_invariant_and_bounded(self, truths, rnd):
        rng = np.random.default_rng(rnd.randint(0, 2**31))
        scores = rng.random((len(truths), 10))
        a = mrr_from_scores(scores, truths, limit=5).mrr
        perm = rng.permutation(len(truths))
        b = mrr_from_scores(scores[perm], np.asarray(truths)[perm], limit=5).mrr
        assert a == pytest.approx(b, abs=1e-12)
        assert 0 <= a <= mrr_from_scores(scores, truths, limit=10).mrr <= 1

    def test_scores_path_matches_rankings(self):
        rng = np.random.default_rng(1)
        scores = rng.integers(0, 4, (40, 12)).astype(float)
        truths = rng.integers(0, 12, 40)
        preds = [rank_scores(s, 5, i) for i, s in enumerate(scores)]
        np.testing.assert_array_equal(mrr_from_scores(scores, truths, limit=5).reciprocal_ranks,
                                      mrr(preds, truths, limit=5).reciprocal_ranks)

    def test_report_json(self, tmp_path):
        report = mrr([ranked(0, [1, 0])], [0], groups=[(0.0, 0.0)])
        report.write_json(tmp_path / "r.json")
        d = json.loads((tmp_path / "r.json").read_text())
        assert d["MRR"] == 0.5 and d["ideal_MRR"] == 1.0 and d["Q"] == 1


class TestIdealMRR:
    def test_distinct_inputs(self):
        assert ideal_mrr([1, 2, 3], [0, 0, 1]) == 1.0

    def test_two_truths_one_location(self):
        assert ideal_mrr([(0, 0), (0, 0)], [4, 9]) == pytest.approx(0.75, abs=1e-15)
        assert ideal_mrr_oracle([(0, 0), (0, 0)], [4, 9]) == pytest.approx(0.75, abs=1e-15)

    def test_three_to_one(self):
        assert ideal_mrr(["a"] * 4, [0, 0, 0, 1]) == pytest.approx(0.875, abs=1e-15)
        # the swapped order reaches only 0.625
        swapped = (3 * 0.5 + 1 * 1.0) / 4
        assert swapped == 0.625 and ideal_mrr_oracle(["a"] * 4, [0, 0, 0, 1]) == pytest.approx(0.875)

    def test_matches_exhaustive_permutations(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(1, 25))
            groups = rng.integers(0, 4, n).tolist()
            truths = rng.integers(0, 5, n).tolist()
            assert ideal_mrr(groups, truths) == pytest.approx(ideal_mrr_oracle(groups, truths), abs=1e-12)

    def test_count_descending_is_optimal(self):
        truths = [0, 0, 1, 2, 2, 2, 3]
        best = ideal_mrr([0] * 7, truths) * 7
        for perm in itertools.permutations(range(4)):
            rank = {s: i + 1 for i, s in enumerate(perm)}
            assert sum(1 / rank[t] for t in truths) <= best + 1e-12

    def test_empty(self):
        with pytest.raises(EvaluationError):
            ideal_mrr([], [])

    def test_array_group_keys(self):
        assert ideal_mrr([np.array([1.0, 2.0]), np.array([1.0, 2.0])], [0, 1]) == 0.75


class TestRandomBaseline:
    def test_analytic_matches_enumeration(self):
        n = 5
        total = 0.0
        perms = list(itertools.permutations(range(n)))
        for perm in perms:
            total += 1 / (perm.index(0) + 1)
        assert random_ranking_mrr(n) == pytest.approx(total / len(perms), abs=1e-15)


def dataset(n, n_species=5, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(np.arange(n), rng.uniform(0, 1000, (n, 2)), rng.integers(0, n_species, n), np.arange(n_species))


class TestHoldout:
    def test_counts(self):
        ds = holdout_protocol(dataset(1000), seed=0)
        assert [int(ds.mask(t).sum()) for t in ("validation", "prevalidation", "train")] == [100, 90, 810]

    def test_deterministic(self):
        a = holdout_protocol(dataset(200), seed=5)
        b = holdout_protocol(dataset(200), seed=5)
        np.testing.assert_array_equal(a.split, b.split)
        assert not np.array_equal(a.split, holdout_protocol(dataset(200), seed=6).split)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(10, 3000))
    def test_proportions(self, n):
        ds = holdout_protocol(dataset(n), seed=1)
        n_val = int(ds.mask("validation").sum())
        n_pre = int(ds.mask("prevalidation").sum())
        assert abs(n_val - 0.1 * n) <= 0.5
        assert abs(n_pre - 0.1 * (n - n_val)) <= 0.5
        assert n_val + n_pre + int(ds.mask("train").sum()) == n

    def test_keeps_test_rows(self):
        ds = dataset(50)
        tags = np.array(["test"] * 10 + ["none"] * 40)
        out = holdout_protocol(ds.with_split(tags), seed=0)
        np.testing.assert_array_equal(out.split[:10], "test")
        assert int(out.mask("validation").sum()) == 4

    def test_too_small(self):
        with pytest.raises(EvaluationError):
            holdout_protocol(dataset(9), seed=0)


class TestMonteCarlo:
    def test_twenty_splits_and_mean(self):
        res = monte_carlo_protocol(dataset(300), "spa-cc", splits=20, seed=3)
        assert len(res.per_split) == 20
        assert res.mean == pytest.approx(sum(res.per_split) / 20, abs=1e-15)

    def test_degenerate_seed_zero_variance(self):
        res = monte_carlo_protocol(dataset(200), "spa-rf", splits=4, seed=7, seed_stride=0, rf_trees=3)
        assert np.var(res.per_split) == 0.0

    def test_every_validation_species_in_train(self):
        for seed in range(10):
            ds = monte_carlo_split(dataset(60, n_species=25, seed=seed), seed)
            train = set(ds.species[ds.mask("train")].tolist())
            assert set(ds.species[ds.mask("validation")].tolist()) <= train

    def test_singletons_dropped(self):
        ds = Dataset(np.arange(5), np.arange(10.0).reshape(5, 2), np.array([0, 0, 1, 0, 2]), np.arange(3))
        out = monte_carlo_split(ds, 0, drop_singletons=True)
        np.testing.assert_array_equal(out.split[[2, 4]], "none")

    def test_rejects_neural_kind(self):
        with pytest.raises(EvaluationError):
            monte_carlo_protocol(dataset(50), "env-cnn")
