import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats as sps

from oracles import auprc_sweep, auroc_pairs, cliffs_loop, fisher_enum, mwu_exact_enum
from pfsfusion import stats as S
from pfsfusion.errors import UndefinedMetricError, ValidationError


class TestAuroc:
    def test_perfect(self):
        assert S.auroc([0, 1, 0, 1], [0, 1, 0, 1]) == 1.0

    def test_all_ties(self):
        assert S.auroc([0.3] * 6, [0, 1, 1, 0, 1, 0]) == 0.5

    def test_matches_pair_count(self):
        rng = np.random.default_rng(0)
        s = np.round(rng.random(12), 1)
        y = np.r_[np.ones(5, int), np.zeros(7, int)]
        assert S.auroc(s, y) == pytest.approx(auroc_pairs(s, y), abs=1e-12)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            S.auroc([0.1, 0.2], [1, 1])

    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=30, unique=True), st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_complement_without_ties(self, scores, seed):
        y = np.random.default_rng(seed).integers(0, 2, size=len(scores))
        y[0], y[1] = 0, 1
        assert S.auroc(scores, y) + S.auroc(-np.array(scores), y) == pytest.approx(1.0, abs=1e-12)


class TestAuprc:
    def test_perfect(self):
        assert S.auprc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_equal_is_prevalence(self):
        assert S.auprc([0.5] * 8, [1, 0, 0, 1, 1, 0, 0, 0]) == pytest.approx(3 / 8)

    def test_matches_sweep(self):
        rng = np.random.default_rng(1)
        s = np.round(rng.random(10), 1)
        y = rng.integers(0, 2, 10)
        y[0] = 1
        assert S.auprc(s, y) == pytest.approx(auprc_sweep(s, y), abs=1e-12)

    def test_no_positive(self):
        with pytest.raises(UndefinedMetricError):
            S.auprc([0.1, 0.2], [0, 0])


class TestAccuracy:
    def test_perfect_and_inverted(self):
        assert S.accuracy([0.9, 0.1, 0.7], [1, 0, 1]) == 1.0
        assert S.accuracy([0.1, 0.9, 0.3], [1, 0, 1]) == 0.0

    def test_direct_count(self):
        rng = np.random.default_rng(2)
        s, y = rng.random(40), rng.integers(0, 2, 40)
        assert S.accuracy(s, y) == sum((si >= 0.5) == yi for si, yi in zip(s, y)) / 40


class TestMannWhitney:
    def test_identical(self):
        assert S.mann_whitney_u([1, 2, 3], [1, 2, 3]).p_raw == 1.0
        assert S.mann_whitney_u([1, 2, 3], [1, 2, 3], mode="exact").p_raw == 1.0

    def test_separated(self):
        r = S.mann_whitney_u([1, 2, 3], [4, 5, 6])
        assert r.statistic == 0 and r.p_raw == pytest.approx(0.1, abs=1e-15)
        assert r.note == "exact"

    def test_exact_matches_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            n1, n2 = rng.integers(1, 7, size=2)
            vals = rng.permutation(40)[: n1 + n2].astype(float)
            a, b = vals[:n1], vals[n1:]
            u, p = mwu_exact_enum(a, b)
            r = S.mann_whitney_u(a, b)
            assert r.statistic == u and r.p_raw == pytest.approx(p, abs=1e-12)

    def test_approximation_vs_permutation(self):
        rng = np.random.default_rng(4)
        a = rng.normal(0.0, 1, 30)
        b = rng.normal(0.6, 1, 30)
        r = S.mann_whitney_u(a, b)
        assert r.note == "normal approximation"
        pooled = np.r_[a, b]
        u_obs = abs(r.statistic - 450)
        perm_rng = np.random.default_rng(5)
        ranks = S.midranks(pooled)
        hits = 0
        n_perm = 100_000
        for chunk in range(10):
            idx = np.argsort(perm_rng.random((n_perm // 10, 60)), axis=1)[:, :30]
            u = ranks[idx].sum(axis=1) - 30 * 31 / 2
            hits += int(np.sum(np.abs(u - 450) >= u_obs - 1e-9))
        p_mc = hits / n_perm
        assert r.p_raw == pytest.approx(p_mc, rel=0.10)

    def test_empty(self):
        with pytest.raises(ValidationError):
            S.mann_whitney_u([], [1.0])


class TestBonferroni:
    def test_examples(self):
        assert S.bonferroni([0.2, 0.04], 1).tolist() == [0.2, 0.04]
        assert S.bonferroni([0.03], 2)[0] == pytest.approx(0.06)
        assert S.bonferroni([0.7], 3)[0] == 1.0

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.integers(1, 20))
    def test_never_lowers(self, ps, m):
        adj = S.bonferroni(ps, m)
        assert np.all(adj >= np.array(ps)) and np.all(adj <= 1)


class TestCliff:
    def test_disjoint(self):
        r = S.cliffs_delta([5, 6, 7], [1, 2])
        assert r.effect_size == 1.0 and r.effect_band == "large"

    def test_equal(self):
        r = S.cliffs_delta([1, 2, 3], [1, 2, 3])
        assert r.effect_size == 0.0 and r.effect_band == "negligible"

    def test_double_loop(self):
        rng = np.random.default_rng(6)
        a, b = rng.integers(0, 5, 8), rng.integers(0, 5, 7)
        assert S.cliffs_delta(a, b).effect_size == cliffs_loop(a, b)

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=12), st.lists(st.integers(-5, 5), min_size=1, max_size=12))
    def test_antisymmetric(self, a, b):
        assert S.cliffs_delta(a, b).effect_size == -S.cliffs_delta(b, a).effect_size

    @pytest.mark.parametrize("d,band", [(0.1, "negligible"), (0.147, "small"), (-0.2, "small"), (0.33, "medium"),
                                        (0.47, "medium"), (0.474, "large"), (-0.9, "large")])
    def test_bands(self, d, band):
        assert S.effect_band(d) == band


class TestFisher:
    def test_diagonal(self):
        assert S.fisher_exact_2x2([[5, 0], [0, 5]]).p_raw == pytest.approx(2 / 252, rel=1e-12)

    def test_balanced(self):
        assert S.fisher_exact_2x2([[2, 2], [2, 2]]).p_raw == pytest.approx(1.0)

    def test_table_one_sex_row(self):
        assert S.fisher_exact_2x2([[19, 23], [29, 45]]).p_raw == pytest.approx(0.560, abs=5e-4)

    def test_zero_margin(self):
        r = S.fisher_exact_2x2([[0, 4], [0, 6]])
        assert r.p_raw == 1.0 and "degenerate" in r.note

    def test_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            t = rng.integers(0, 12, size=(2, 2))
            t[0, 0] += 1
            t[1, 1] += 1
            assert S.fisher_exact_2x2(t).p_raw == pytest.approx(fisher_enum(t.tolist()), abs=1e-9)


class TestKaplanMeier:
    def test_single(self):
        km = S.kaplan_meier([10])
        assert km.at(9.99) == 1.0 and km.at(10) == 0.0 and km.median == 10

    def test_four(self):
        km = S.kaplan_meier([1, 2, 3, 4])
        assert km.survival.tolist() == [0.75, 0.5, 0.25, 0.0]
        assert km.median == 2

    def test_ecdf_identity(self):
        t = np.round(np.random.default_rng(8).exponential(12, 25), 1) + 0.1
        km = S.kaplan_meier(t)
        for u, s in zip(km.event_times, km.survival):
            assert s == pytest.approx(1 - np.mean(t <= u), abs=1e-12)
        assert np.all(np.diff(km.survival) <= 0)

    def test_empty(self):
        with pytest.raises(ValidationError):
            S.kaplan_meier([])


class TestLogrank:
    def test_identical(self):
        r = S.logrank_test([1, 2, 3, 7], [1, 2, 3, 7])
        assert r.statistic == 0 and r.p_raw == 1.0

    def test_hand_table(self):
        # pooled event times 1,2,3 (all group a): n_a=3,2,1; n=6,5,4; d=1 each
        ea = 3 / 6 + 2 / 5 + 1 / 4
        oe = 3 - ea
        var = (3 / 6) * (3 / 6) + (2 / 5) * (3 / 5) + (1 / 4) * (3 / 4)
        # times 10,20,30 only group b: O_a = E_a = 0, variance terms zero
        r = S.logrank_test([1, 2, 3], [10, 20, 30])
        assert r.statistic == pytest.approx(oe ** 2 / var, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(9)
        a, b = rng.exponential(10, 15), rng.exponential(14, 11)
        r1, r2 = S.logrank_test(a, b), S.logrank_test(b, a)
        assert r1.statistic == pytest.approx(r2.statistic, rel=1e-12) and r1.p_raw == pytest.approx(r2.p_raw)

    def test_paper_tail(self):
        assert S.chi2_sf(15.18, 1) == pytest.approx(9.8e-5, abs=5e-6)


class TestSpecialFunctions:
    @pytest.mark.parametrize("a", [0.5, 1.0, 2.5, 7.0])
    @pytest.mark.parametrize("x", [1e-3, 0.4, 2.0, 9.0, 15.18, 60.0])
    def test_gammaincc(self, a, x):
        assert S.gammaincc(a, x) == pytest.approx(special.gammaincc(a, x), rel=1e-10)

    @pytest.mark.parametrize("lam", [0.2, 0.5, 1.0, 1.17, 1.19, 1.6, 2.5])
    def test_kolmogorov(self, lam):
        assert S.kolmogorov_sf(lam) == pytest.approx(sps.kstwobign.sf(lam), rel=1e-9, abs=1e-15)

    def test_chi2_one_dof_closed_form(self):
        for x in [0.1, 1.0, 3.84, 20.0]:
            assert S.chi2_sf(x) == pytest.approx(math.erfc(math.sqrt(x / 2)), rel=1e-10)


class TestSummarizeCv:
    def test_constant(self):
        s = S.summarize_cv(np.full((5, 3), 0.7))
        assert s.mean == pytest.approx(0.7) and s.se == 0

    def test_hand_arithmetic(self):
        grid = np.array([[0.6] * 3] * 3 + [[0.7] * 3] * 2)
        s = S.summarize_cv(grid)
        assert s.mean == pytest.approx(0.64)
        assert s.se == pytest.approx(np.std([0.6, 0.6, 0.6, 0.7, 0.7], ddof=1) / math.sqrt(5))
        assert s.se == pytest.approx(0.0245, abs=1e-4)

    def test_fold_order_irrelevant(self):
        grid = np.random.default_rng(0).random((5, 3))
        assert S.summarize_cv(grid) == S.summarize_cv(grid[:, ::-1])

    def test_wrong_count(self):
        with pytest.raises(ValidationError):
            S.summarize_cv(np.zeros((4, 3)))

    def test_failed_fold_excluded(self):
        grid = np.full((5, 3), 0.5)
        grid[2, 1] = np.nan
        s = S.summarize_cv(grid)
        assert s.mean == 0.5 and s.n_folds_used == 14
