"""Metric implementations against brute-force oracles and hand enumerations.

The oracles re-derive every quantity by scanning ranking prefixes with plain
Python, then reduce with the same fsum convention the implementations use,
so agreement is exact rather than approximate.
"""

import math

import numpy as np
import pytest

from weakpair.metrics import (DEFAULT_RECALL_GRID, average_precision,
                              margin_stats, margin_tuples,
                              mean_average_precision, pr_curve,
                              query_uncertainty, rank_queries, recall_at_k,
                              reliability_stats, risk_coverage)


# -- oracles -------------------------------------------------------------


def oracle_ap(flags):
    """AP by direct prefix enumeration."""
    precisions = []
    for position in range(1, len(flags) + 1):
        if flags[position - 1]:
            hits = sum(1 for f in flags[:position] if f)
            precisions.append(hits / position)
    return math.fsum(precisions) / len(precisions)


def oracle_first_hit(flags):
    for position, flag in enumerate(flags, start=1):
        if flag:
            return position
    return None


def oracle_precision_at_recall(flags, level):
    total = sum(1 for f in flags if f)
    for k in range(1, len(flags) + 1):
        hits = sum(1 for f in flags[:k] if f)
        if hits / total >= level:
            return hits / k
    return None


def oracle_risk_points(u_values, correct, n_points):
    ordered = sorted(range(len(u_values)), key=lambda i: (u_values[i], i))
    out = []
    for i in range(1, n_points + 1):
        retained = math.ceil(i * len(u_values) / n_points)
        kept = ordered[:retained]
        errors = sum(1 for j in kept if not correct[j])
        out.append(errors / retained)
    return out


def ranking_for(flags_list, u=None):
    """Build a RankingResult whose ranked flags are exactly flags_list."""
    n_gallery = len(flags_list[0])
    scores = np.tile(np.arange(n_gallery, 0, -1, dtype=float), (len(flags_list), 1))
    relevance = np.array(flags_list, dtype=bool)
    u = np.zeros(len(flags_list)) if u is None else np.asarray(u, dtype=float)
    return rank_queries(scores, relevance, u)


# -- unit values -----------------------------------------------------------


class TestAveragePrecision:
    def test_relevant_first(self):
        assert average_precision([True, False, False]) == 1.0

    def test_relevant_second(self):
        assert average_precision([False, True]) == 0.5

    def test_mixed(self):
        assert average_precision([True, False, True]) == oracle_ap([1, 0, 1])
        assert abs(average_precision([True, False, True]) - 5.0 / 6.0) <= 1e-15

    def test_no_relevant_rejected(self):
        with pytest.raises(ValueError):
            average_precision([False, False])


class TestRecallAtK:
    def test_first_hit_at_one(self):
        assert recall_at_k(ranking_for([[1, 0, 0]]), 1) == 1.0

    def test_first_hit_beyond_k(self):
        assert recall_at_k(ranking_for([[0, 0, 0, 1]]), 3) == 0.0

    def test_mean_over_queries(self):
        flags = [[1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 0, 0, 0, 1]]
        assert recall_at_k(ranking_for(flags), 2) == 2.0 / 3.0

    def test_zero_relevant_queries_excluded(self):
        result = ranking_for([[1, 0], [0, 0]])
        assert result.excluded == 1
        assert len(result.queries) == 1


class TestPrCurve:
    def test_single_relevant_item_curve_is_one(self):
        curve = pr_curve(ranking_for([[1]]))
        np.testing.assert_array_equal(curve.precisions, np.ones(100))
        assert curve.auc == 1.0

    def test_perfect_ranker_auc_one(self):
        curve = pr_curve(ranking_for([[1, 1, 0, 0], [1, 1, 1, 0]]))
        assert curve.auc == 1.0

    def test_two_query_macro_matches_hand_enumeration(self):
        flags = [[0, 1, 1, 0], [1, 0, 0, 1]]
        curve = pr_curve(ranking_for(flags))
        for level, got in zip(curve.recalls, curve.precisions):
            expect = math.fsum(oracle_precision_at_recall(f, level) for f in flags) / 2
            assert got == expect

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            pr_curve(ranking_for([[1, 0]]), grid=[0.0, 0.5])


class TestRiskCoverage:
    def test_perfect_ordering_zero_risk_at_correct_fraction(self):
        # 3 correct with low u, 1 incorrect with high u: risk 0 up to 75%.
        flags = [[1, 0], [1, 0], [1, 0], [0, 1]]
        rc = risk_coverage(ranking_for(flags, u=[0.1, 0.2, 0.3, 0.9]), n_points=4)
        np.testing.assert_array_equal(rc.risks, [0.0, 0.0, 0.0, 0.25])

    def test_full_coverage_equals_overall_error(self):
        rng = np.random.default_rng(0)
        flags = [[1, 0] if rng.random() < 0.6 else [0, 1] for _ in range(37)]
        u = rng.random(37)
        rc = risk_coverage(ranking_for(flags, u=u))
        overall = sum(1 for f in flags if f[0] == 0) / len(flags)
        assert rc.risks[-1] == overall
        assert rc.coverages[-1] == 1.0

    def test_crafted_four_query_case(self):
        flags = [[0, 1], [1, 0], [0, 1], [1, 0]]
        u = [0.4, 0.1, 0.2, 0.3]
        rc = risk_coverage(ranking_for(flags, u=u), n_points=4)
        expect = oracle_risk_points(u, [f[0] == 1 for f in flags], 4)
        np.testing.assert_array_equal(rc.risks, expect)

    def test_ties_break_by_index(self):
        flags = [[0, 1], [1, 0]]
        rc = risk_coverage(ranking_for(flags, u=[0.5, 0.5]), n_points=2)
        np.testing.assert_array_equal(rc.risks, [1.0, 0.5])


class TestReliability:
    def test_equal_uncertainties_equal_means(self):
        flags = [[1, 0], [0, 1]]
        stats = reliability_stats(ranking_for(flags, u=[0.3, 0.3]))
        assert stats.mean_u_correct == stats.mean_u_incorrect == 0.3

    def test_group_means(self):
        flags = [[1, 0], [1, 0], [0, 1]]
        stats = reliability_stats(ranking_for(flags, u=[0.1, 0.2, 0.8]))
        assert abs(stats.mean_u_correct - 0.15) <= 1e-15
        assert stats.mean_u_incorrect == 0.8

    def test_empty_group_flagged(self):
        stats = reliability_stats(ranking_for([[1, 0]], u=[0.5]))
        assert stats.mean_u_incorrect is None
        assert not stats.complete


class TestMarginStats:
    def test_degenerate_tuple_is_zero(self):
        emb = np.array([[1.0, 0.0], [0.0, 1.0]])
        stats = margin_stats(emb, emb, [(0, 0, 0, 0)])
        assert stats.mean_weak == 0.0 and stats.mean_pos == 0.0

    def test_hand_margin(self):
        txt = np.array([[1.0, 0.0]])
        img = np.array([[0.9, math.sqrt(1 - 0.81)], [0.1, math.sqrt(1 - 0.01)]])
        stats = margin_stats(txt, img, [(0, 0, 0, 1)])
        assert abs(stats.mean_pos - 0.8) <= 1e-12

    def test_histogram_covers_margin_range(self):
        rng = np.random.default_rng(1)
        txt = rng.normal(size=(6, 3))
        txt /= np.linalg.norm(txt, axis=1, keepdims=True)
        img = rng.normal(size=(6, 3))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        tuples = margin_tuples(np.array([0, 0, 1, 1, 2, 2]), rng)
        stats = margin_stats(txt, img, tuples)
        assert stats.weak_hist.sum() == len(tuples)
        assert stats.pos_hist.sum() == len(tuples)
        assert stats.weak_margins.min() >= -2.0 and stats.weak_margins.max() <= 2.0


class TestQueryUncertainty:
    def test_singleton_identity_hits_floor(self):
        emb = np.array([[1.0, 0.0], [0.0, 1.0]])
        u = query_uncertainty(emb, emb, np.array([0, 1]), "exponential")
        np.testing.assert_allclose(u, math.exp(-1.0), rtol=0, atol=1e-12)

    def test_consistent_views_lower_uncertainty(self):
        img = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        ids = np.array([0, 0, 1, 1])
        u = query_uncertainty(img, img, ids, "exponential")
        assert u[0] < u[2]


class TestOracleEquivalence:
    """Exhaustive prefix-enumeration oracles on random small galleries."""

    def test_ap_recall_pr_risk_match_oracles(self):
        rng = np.random.default_rng(42)
        for _ in range(1500):
            gallery = int(rng.integers(1, 13))
            flags = rng.random(gallery) < rng.uniform(0.1, 0.9)
            if not flags.any():
                flags[int(rng.integers(gallery))] = True
            scores = rng.normal(size=gallery)
            order = np.lexsort((np.arange(gallery), -scores))
            ranked_flags = [bool(flags[j]) for j in order]

            result = rank_queries(scores[None, :], flags[None, :], np.zeros(1))
            assert result.queries[0].ap == oracle_ap(ranked_flags)
            assert result.queries[0].first_hit == oracle_first_hit(ranked_flags)
            for k in (1, 2, 5, 12):
                got = recall_at_k(result, k)
                assert got == (1.0 if oracle_first_hit(ranked_flags) <= k else 0.0)
            curve = pr_curve(result)
            for level, got in zip(curve.recalls, curve.precisions):
                assert got == oracle_precision_at_recall(ranked_flags, level)

    def test_map_of_multi_query_set_matches(self):
        rng = np.random.default_rng(43)
        for _ in range(100):
            n_q, gallery = int(rng.integers(2, 6)), int(rng.integers(2, 13))
            scores = rng.normal(size=(n_q, gallery))
            relevance = rng.random((n_q, gallery)) < 0.4
            relevance[:, 0] = True
            result = rank_queries(scores, relevance, rng.random(n_q))
            expected = []
            for q in range(n_q):
                order = np.lexsort((np.arange(gallery), -scores[q]))
                expected.append(oracle_ap([bool(relevance[q][j]) for j in order]))
            assert mean_average_precision(result) == math.fsum(expected) / n_q

    def test_risk_coverage_matches_oracle(self):
        rng = np.random.default_rng(44)
        for _ in range(300):
            n_q = int(rng.integers(1, 30))
            flags = [[1, 0] if rng.random() < 0.5 else [0, 1] for _ in range(n_q)]
            u = rng.random(n_q)
            rc = risk_coverage(ranking_for(flags, u=u))
            expect = oracle_risk_points(list(u), [f[0] == 1 for f in flags], 20)
            np.testing.assert_array_equal(rc.risks, expect)


class TestInvariances:
    def test_metrics_invariant_to_gallery_permutation(self):
        rng = np.random.default_rng(45)
        gallery = 9
        scores = rng.normal(size=(4, gallery))
        relevance = rng.random((4, gallery)) < 0.4
        relevance[:, 2] = True
        u = rng.random(4)
        base = rank_queries(scores, relevance, u)
        perm = rng.permutation(gallery)
        shuffled = rank_queries(scores[:, perm], relevance[:, perm], u)
        assert mean_average_precision(base) == mean_average_precision(shuffled)
        for k in (1, 3, 5):
            assert recall_at_k(base, k) == recall_at_k(shuffled, k)
        assert pr_curve(base).auc == pr_curve(shuffled).auc
        np.testing.assert_array_equal(risk_coverage(base).risks,
                                      risk_coverage(shuffled).risks)

    def test_perfect_ranker_map_is_one(self):
        flags = [[1, 1, 0, 0], [1, 0, 0, 0]]
        assert mean_average_precision(ranking_for(flags)) == 1.0

    def test_all_relevant_last_matches_analytic(self):
        gallery, relevant = 10, 3
        flags = [[0] * (gallery - relevant) + [1] * relevant]
        expected = math.fsum((j + 1) / (gallery - relevant + j + 1)
                             for j in range(relevant)) / relevant
        assert mean_average_precision(ranking_for(flags)) == expected

    def test_default_grid_shape(self):
        assert len(DEFAULT_RECALL_GRID) == 100
        assert DEFAULT_RECALL_GRID[-1] == 1.0


def test_ranking_score_ties_prefer_lower_gallery_index():
    scores = np.array([[0.5, 0.5, 0.5]])
    relevance = np.array([[False, True, False]])
    result = rank_queries(scores, relevance, np.zeros(1))
    np.testing.assert_array_equal(result.queries[0].order, [0, 1, 2])
    assert result.queries[0].first_hit == 2
