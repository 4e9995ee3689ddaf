from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from runlmc import synth
from runlmc.baselines import MeanPredictor, Predictor, make_predictor
from runlmc.datamodel import PerformanceTable
from runlmc.errors import DataError
from runlmc.evaluation import (
    OraclePredictor,
    ValidationSpec,
    bootstrap_se,
    compare_methods,
    holdout_hash,
    loo_validate,
    metrics,
    query_view,
    relative_metrics,
    sample_holdouts,
    wilcoxon_signed_rank,
)


def brute_force_wilcoxon(a, b):
    """W+ and two-sided p by enumerating every sign assignment (Pratt zeros, mid-ranks)."""
    d = np.asarray(a, float) - np.asarray(b, float)
    ranks = scipy.stats.rankdata(np.abs(d))
    nz = d != 0
    r = ranks[nz]
    w = r[d[nz] > 0].sum()
    sums = np.array([sum(x for x, s in zip(r, signs) if s) for signs in itertools.product([0, 1], repeat=len(r))])
    lower = np.mean(sums <= w + 1e-9)
    upper = np.mean(sums >= w - 1e-9)
    return w, min(1.0, 2 * min(lower, upper))


class TestMetrics:
    def test_examples(self):
        rmse, mae = metrics([3, -4])
        assert rmse == pytest.approx(math.sqrt(12.5)) and mae == 3.5
        assert metrics([0.0, 0.0]) == (0.0, 0.0)
        rel_rmse, rel_mae = relative_metrics([102.0, 204.0], [100.0, 200.0])
        assert rel_mae == pytest.approx(0.02) and rel_rmse == pytest.approx(0.02)
        with pytest.raises(DataError):
            metrics([])

    @given(st.lists(st.floats(-1e3, 1e3).map(lambda x: round(x, 6)), min_size=1, max_size=50))
    def test_rmse_at_least_mae(self, r):
        rmse, mae = metrics(r)
        assert rmse >= mae * (1 - 1e-12) >= 0


class TestBootstrap:
    def test_constant_sample(self):
        assert bootstrap_se(np.full(20, 3.0), np.mean) == 0.0

    def test_deterministic(self):
        x = np.random.default_rng(0).normal(size=50)
        assert bootstrap_se(x, np.mean, seed=4) == bootstrap_se(x, np.mean, seed=4)

    def test_shrinks_like_inverse_root_n(self):
        gen = np.random.default_rng(1)
        small = bootstrap_se(gen.normal(size=400), np.mean, n_boot=1000)
        large = bootstrap_se(gen.normal(size=1600), np.mean, n_boot=1000)
        assert small / large == pytest.approx(2.0, rel=0.3)


class TestWilcoxon:
    def test_identical_samples(self):
        assert wilcoxon_signed_rank([1.0, 2, 3, 4, 5], [1.0, 2, 3, 4, 5]) == (0.0, 1.0)

    def test_constant_shift_gives_the_smallest_p(self):
        for n in (5, 10, 20):
            a = np.arange(n, dtype=float)
            w, p = wilcoxon_signed_rank(a + 1, a)
            assert w == n * (n + 1) / 2 and p == pytest.approx(2 / 2**n)

    def test_ten_pair_instance_matches_enumeration(self):
        a = [125, 115, 130, 140, 140, 115, 140, 125, 140, 135]
        b = [110, 122, 125, 120, 140, 124, 123, 137, 135, 145]
        w, p = wilcoxon_signed_rank(a, b)
        w_ref, p_ref = brute_force_wilcoxon(a, b)
        assert w == w_ref and p == pytest.approx(p_ref, rel=1e-12)

    @given(st.lists(st.tuples(st.integers(-4, 4), st.integers(-4, 4)), min_size=5, max_size=14))
    def test_exact_branch_matches_enumeration(self, pairs):
        a, b = map(list, zip(*pairs))
        w, p = wilcoxon_signed_rank(a, b)
        w_ref, p_ref = brute_force_wilcoxon(a, b)
        assert w == pytest.approx(w_ref) and p == pytest.approx(p_ref, rel=1e-9, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_normal_branch_matches_scipy(self, seed):
        gen = np.random.default_rng(seed)
        a = np.round(gen.normal(size=80), 1)
        b = np.round(gen.normal(0.2, size=80), 1)
        _, p = wilcoxon_signed_rank(a, b)
        ref = scipy.stats.wilcoxon(a, b, zero_method="pratt", correction=False, method="approx")
        assert p == pytest.approx(ref.pvalue, rel=1e-9)

    def test_unpaired_input(self):
        with pytest.raises(DataError):
            wilcoxon_signed_rank([1.0, 2.0], [1.0])


@pytest.fixture(scope="module")
def small_table():
    t = synth.generate(synth.SynthSpec(n_athletes=120, noise_std=0.01, seed=2))
    return synth.apply_missingness(t, "uniform_k", 4, seed=2)


class TestLooValidate:
    def test_oracle_scores_zero(self, small_table):
        rep = loo_validate(small_table, OraclePredictor(small_table), ValidationSpec(n_holdouts=100))
        assert rep.summary["rmse"] == 0 and rep.summary["mae"] == 0 and not rep.skipped

    def test_mean_predictor_by_hand(self):
        v = np.full((3, 10), np.nan)
        v[:, 0] = [10.0, 11.0, 15.0]
        v[:, 1] = [20.0, 21.0, 22.0]
        t = PerformanceTable(v)
        holdouts = np.array([[r, c] for r in range(3) for c in range(2)])
        rep = loo_validate(t, MeanPredictor(), ValidationSpec(n_boot=0), holdouts)
        hand = [13 - 10, 21.5 - 20, 12.5 - 11, 21 - 21, 10.5 - 15, 20.5 - 22]
        np.testing.assert_allclose(rep.residuals, hand)
        assert rep.summary["rmse"] == pytest.approx(math.sqrt(np.mean(np.square(hand))))

    def test_holdouts_without_replacement_and_seeded(self, small_table):
        spec = ValidationSpec(n_holdouts=300, seed=3)
        h = sample_holdouts(small_table, spec)
        assert len({tuple(x) for x in h}) == 300
        assert small_table.present[h[:, 0], h[:, 1]].all()
        assert holdout_hash(h) == holdout_hash(sample_holdouts(small_table, spec))
        assert holdout_hash(h) != holdout_hash(sample_holdouts(small_table, ValidationSpec(n_holdouts=300, seed=4)))

    def test_predictor_never_reads_the_holdout(self, small_table):
        seen = []

        class Spy(Predictor):
            name = "spy"

            def prepare(self, table):
                seen.append(("prepare", table))

            def predict(self, table, row, col):
                seen.append(((row, col), table))
                return 0.0

        spec = ValidationSpec(n_holdouts=50, seed=1)
        loo_validate(small_table, Spy(), spec)
        h = sample_holdouts(small_table, spec)
        prepared = seen[0][1]
        assert np.isnan(prepared.values[h[:, 0], h[:, 1]]).all()
        for (row, col), table in seen[1:]:
            assert np.isnan(table.values[row, col])

    def test_causal_past_sees_only_earlier_entries(self):
        v = np.full((2, 10), np.nan)
        v[:, :3] = [[10.0, 21.0, 48.0], [11.0, 22.0, 50.0]]
        dates = np.full(v.shape, np.datetime64("NaT", "D"))
        dates[0, :3] = np.array(["2010-01-01", "2011-01-01", "2012-01-01"], dtype="datetime64[D]")
        t = PerformanceTable(v, dates=dates)
        view = query_view(t, 0, 1, "causal_past")
        np.testing.assert_array_equal(view.present[0, :3], [True, False, False])
        assert view.present[1, :3].all()  # other athletes unrestricted
        earliest = query_view(t, 0, 0, "causal_past")
        assert not earliest.present[0].any()
        rep = loo_validate(t, make_predictor("riegel"), ValidationSpec(mode="causal_past", n_boot=0), np.array([[0, 0]]))
        assert 0 in rep.skipped and "insufficient" in rep.skipped[0]
        assert t.dates[0, 0] == np.datetime64("2010-01-01")  # dates untouched

    def test_skipped_holdouts_carry_a_reason(self, small_table):
        rep = loo_validate(small_table, make_predictor("lmc4"), ValidationSpec(n_holdouts=200, seed=0))
        # rows keep 6 entries, so a holdout leaves 5 and rank 4 always runs
        assert not rep.skipped
        sparse = synth.apply_missingness(small_table, "uniform_k", 8, seed=0)
        rep = loo_validate(sparse, make_predictor("lmc2"), ValidationSpec(n_holdouts=50, seed=0))
        assert len(rep.skipped) == 50 and all("insufficient" in r for r in rep.skipped.values())

    def test_threads_do_not_change_residuals(self, small_table):
        a = loo_validate(small_table, make_predictor("lmc2"), ValidationSpec(n_holdouts=60, threads=1))
        b = loo_validate(small_table, make_predictor("lmc2"), ValidationSpec(n_holdouts=60, threads=4))
        assert a.residuals.tobytes() == b.residuals.tobytes()


class TestCompare:
    def test_oracle_is_strictly_best(self, small_table):
        methods = {"oracle": OraclePredictor(small_table), "mean": MeanPredictor(), "riegel": make_predictor("riegel")}
        comp = compare_methods(small_table, methods, ValidationSpec(n_holdouts=100))
        rmse = {r["method"]: r["rmse"] for r in comp.rows}
        assert rmse["oracle"] == 0 and all(v > 0 for k, v in rmse.items() if k != "oracle")

    def test_two_copies_of_a_method(self, small_table):
        comp = compare_methods(small_table, {"a": MeanPredictor(), "b": MeanPredictor()}, ValidationSpec(n_holdouts=80))
        a, b = comp.rows
        assert a["rmse"] == b["rmse"] and b["p_vs_reference"] == 1.0

    def test_lmc_beats_mean(self, small_table):
        comp = compare_methods(small_table, ["lmc3", "mean"], ValidationSpec(n_holdouts=200))
        lmc, mean = comp.rows
        assert lmc["rmse"] < mean["rmse"] and mean["p_vs_reference"] < 0.01

    def test_every_method_sees_the_same_holdouts(self, small_table):
        comp = compare_methods(small_table, ["mean", "knn", "lmc2"], ValidationSpec(n_holdouts=50))
        hs = [r.holdouts.tobytes() for r in comp.reports.values()]
        assert len(set(hs)) == 1
        assert "rmse" in comp.to_tsv().splitlines()[0]

    def test_unknown_reference(self, small_table):
        with pytest.raises(DataError):
            compare_methods(small_table, ["mean"], ValidationSpec(n_holdouts=5), reference="knn")
