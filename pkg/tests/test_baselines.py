from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import power_law_table
from runlmc import baselines
from runlmc.baselines import (
    METHODS,
    PurdyTable,
    em_impute,
    fit_power_law,
    knn_distances,
    make_predictor,
    predict_individual_power_law,
    predict_knn,
    predict_mean,
    predict_power_law,
    predict_purdy,
    purdy_points,
    riegel,
    soft_impute,
    soft_impute_path,
    source_event,
)
from runlmc.datamodel import PerformanceTable, reparameterize
from runlmc.errors import DataError, InsufficientData


def column_table(col, j=0):
    v = np.full((len(col), 10), np.nan)
    v[:, j] = col
    return PerformanceTable(v)


class TestMean:
    def test_examples(self):
        assert predict_mean(column_table([10.0, 12.0, np.nan]), 2, 0) == 11.0
        assert predict_mean(column_table([10.0, np.nan]), 1, 0) == 10.0
        assert predict_mean(column_table([10.0, 12.0, 100.0]), 2, 0) == 11.0  # own entry excluded

    def test_empty_column(self):
        with pytest.raises(InsufficientData):
            predict_mean(column_table([10.0, np.nan]), 0, 0)


class TestKnn:
    def _table(self):
        rng = np.random.default_rng(0)
        v = rng.uniform(10, 20, (12, 10))
        v[rng.random(v.shape) < 0.3] = np.nan
        v[0, 4] = np.nan
        return PerformanceTable(v)

    def test_distances_match_direct_computation(self):
        t = self._table()
        rows, dist = knn_distances(t, 0, 4)
        v = t.values
        z = (v - np.nanmean(v, axis=0)) / np.nanstd(v, axis=0)
        for r, d in zip(rows, dist):
            shared = [j for j in range(10) if j != 4 and not np.isnan(v[0, j]) and not np.isnan(v[r, j])]
            assert d == pytest.approx(math.sqrt(np.mean([(z[r, j] - z[0, j]) ** 2 for j in shared])))

    def test_twin_is_nearest(self):
        v = np.array(self._table().values)
        v[1] = v[0]
        v[1, 4] = 17.5
        assert predict_knn(PerformanceTable(v), 0, 4, k=1) == 17.5

    def test_large_k_gives_candidate_mean(self):
        t = self._table()
        rows, _ = knn_distances(t, 0, 4)
        assert predict_knn(t, 0, 4, k=100) == pytest.approx(t.values[rows, 4].mean())

    def test_picks_the_two_nearest(self, monkeypatch):
        v = np.full((4, 10), np.nan)
        v[1:, 2] = [100.0, 200.0, 900.0]
        monkeypatch.setattr(baselines, "knn_distances", lambda t, r, c: (np.array([1, 2, 3]), np.array([0.1, 0.2, 0.9])))
        assert predict_knn(PerformanceTable(v), 0, 2, k=2) == 150.0

    def test_no_candidate(self):
        v = np.full((2, 10), np.nan)
        v[0, 0] = 10.0
        v[1, 1] = 20.0
        with pytest.raises(InsufficientData):
            predict_knn(PerformanceTable(v), 0, 1)


class TestRiegel:
    def test_examples(self):
        assert riegel(5000, 900, 5000) == 900
        assert riegel(10000, 2400, 42195) == pytest.approx(11041, abs=1)
        assert riegel(100, 10, 400) == pytest.approx(10 * 4**1.06)
        with pytest.raises(DataError):
            riegel(0, 10, 400)

    @given(st.floats(100, 42195), st.floats(100, 42195), st.floats(100, 42195), st.floats(9, 10000))
    def test_transitive(self, d1, d2, d3, t):
        assert riegel(d2, riegel(d1, t, d2), d3) == pytest.approx(riegel(d1, t, d3), rel=1e-12)

    def test_predictor_uses_log_closest_source(self):
        v = np.full((1, 10), np.nan)
        v[0, 3] = 110.0  # 800 m
        v[0, 9] = 9000.0
        t = PerformanceTable(v)
        assert source_event(t, 0, 4) == 3
        got = make_predictor("riegel").predict(t, 0, 4)
        assert got == pytest.approx(riegel(800, 110.0, 1500))
        # the same prediction in speed units
        s = reparameterize(t, "speed")
        assert make_predictor("riegel").predict(s, 0, 4) == pytest.approx(1500 / got)


class TestPowerLaw:
    def test_exact_exponent(self, catalog):
        t = power_law_table([1.1, 1.1], [0.5, 0.6])
        assert abs(fit_power_law(t).exponent - 1.1) <= 1e-12
        assert abs(fit_power_law(t, per_athlete=True, row=1).exponent - 1.1) <= 1e-12

    def test_two_points_interpolate(self):
        v = np.full((1, 10), np.nan)
        v[0, [0, 7]] = [10.0, 1700.0]
        fit = fit_power_law(PerformanceTable(v), per_athlete=True, row=0)
        assert fit.rss == pytest.approx(0.0, abs=1e-20)

    def test_global_exponent_of_two_athletes(self):
        assert fit_power_law(power_law_table([1.05, 1.15], [0.5, 0.3])).exponent == pytest.approx(1.10, abs=1e-12)

    def test_single_distance_is_degenerate(self):
        with pytest.raises(InsufficientData):
            fit_power_law(column_table([10.0, 11.0]))

    def test_individual_rss_at_most_restricted_global(self):
        rng = np.random.default_rng(1)
        t = power_law_table(rng.uniform(1.0, 1.2, 20), rng.uniform(0.3, 0.6, 20))
        v = np.array(t.values) * np.exp(rng.normal(0, 0.02, t.shape))
        v[rng.random(v.shape) < 0.4] = np.nan
        t = PerformanceTable(v)
        alpha = fit_power_law(t).exponent
        for i in range(20):
            ok = t.present[i]
            if ok.sum() < 2:
                continue
            x, y = np.log(t.distances[ok]), np.log(v[i, ok])
            restricted = float(np.sum((y - y.mean() - alpha * (x - x.mean())) ** 2))
            assert fit_power_law(t, per_athlete=True, row=i).rss <= restricted + 1e-15

    def test_predictions_recover_power_laws(self):
        t = power_law_table([1.08, 1.12], [0.5, 0.4])
        v = np.array(t.values)
        v[0, 6] = np.nan
        masked = PerformanceTable(v)
        assert predict_individual_power_law(masked, 0, 6) == pytest.approx(t.values[0, 6], rel=1e-12)
        assert predict_power_law(masked, 0, 6, exponent=1.08) == pytest.approx(t.values[0, 6], rel=1e-12)


class TestPurdy:
    def test_standard_time_scores_standard_points(self):
        table = PurdyTable.bundled()
        for d in (100, 800, 1609.344, 10000, 42195):
            t0, _, _ = table.standard(d)
            assert purdy_points(d, t0) == pytest.approx(950.0, abs=1e-9)

    def test_identity(self):
        assert predict_purdy(5000, 900.0, 5000) == pytest.approx(900.0, abs=1e-6)

    @given(st.sampled_from([100, 400, 1500, 5000, 21097.5]), st.floats(0.9, 2.0))
    def test_points_fall_as_time_rises(self, d, f):
        t0, _, _ = PurdyTable.bundled().standard(d)
        assert purdy_points(d, t0 * f) > purdy_points(d, t0 * f * 1.001)

    @given(st.sampled_from([100, 200, 800, 1500, 10000]), st.sampled_from([400, 1609.344, 5000, 42195]),
           st.floats(0.95, 1.8))
    def test_round_trip(self, d1, d2, f):
        t0, _, _ = PurdyTable.bundled().standard(d1)
        t = t0 * f
        assert predict_purdy(d2, predict_purdy(d1, t, d2), d1) == pytest.approx(t, abs=1e-4)

    @given(st.floats(1.0, 1.5))
    def test_prediction_monotone(self, f):
        t0, _, _ = PurdyTable.bundled().standard(1500)
        assert predict_purdy(1500, t0 * f, 10000) < predict_purdy(1500, t0 * f * 1.01, 10000)

    def test_outside_table(self):
        with pytest.raises(DataError):
            purdy_points(60, 7.0)
        with pytest.raises(DataError):
            purdy_points(100000, 30000.0)

    def test_velocities_fall_beyond_sprints(self):
        table = PurdyTable.bundled()
        long = table.distances >= 400
        assert np.all(np.diff(table.velocities[long]) < 0)


class TestEm:
    def test_complete_table_unchanged(self):
        x = np.random.default_rng(0).normal(size=(20, 4))
        res = em_impute(x)
        np.testing.assert_array_equal(res.values, x)
        assert len(res.loglik) == 1

    def test_perfectly_correlated_columns(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=30)
        x = np.column_stack([a, 2 * a + 1, rng.normal(size=30)])
        x[0, 1] = np.nan
        res = em_impute(x, tol=1e-12)
        assert res.values[0, 1] == pytest.approx(2 * a[0] + 1, abs=1e-6)

    @pytest.mark.parametrize("seed", range(100))
    def test_loglik_never_decreases(self, seed):
        rng = np.random.default_rng(seed)
        n, d = rng.integers(5, 30), rng.integers(2, 6)
        x = rng.normal(size=(n, d)) @ rng.normal(size=(d, d))
        x[rng.random(x.shape) < rng.uniform(0.05, 0.5)] = np.nan
        x[0] = np.where(np.isnan(x[0]), 0.0, x[0])  # every column observed once
        res = em_impute(x, max_iter=50, tol=0.0)
        ll = np.array(res.loglik)
        assert np.all(np.diff(ll) >= -1e-9 * np.maximum(1.0, np.abs(ll[1:])))
        assert not np.isnan(res.values).any()

    def test_needs_two_rows(self):
        with pytest.raises(InsufficientData):
            em_impute(np.ones((1, 3)))


class TestSoftImpute:
    def test_tiny_lambda_on_complete_table(self):
        x = np.random.default_rng(0).normal(size=(8, 5))
        res = soft_impute(x, 1e-10)
        np.testing.assert_allclose(res.low_rank + res.column_means, x, atol=1e-8)

    def test_huge_lambda_gives_column_means(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 5))
        x[rng.random(x.shape) < 0.3] = np.nan
        res = soft_impute(x, 1e6)
        assert not res.low_rank.any()
        np.testing.assert_allclose(res.column_means, np.nanmean(x, axis=0))

    def test_rank_one_recovery(self):
        rng = np.random.default_rng(2)
        full = np.outer(rng.uniform(1, 2, 60), rng.uniform(1, 2, 10))
        x = full.copy()
        hide = rng.random(x.shape) < 0.3
        x[hide] = np.nan
        res = soft_impute_path(x, 1e-4, max_iter=20000)
        err = np.linalg.norm(res.values[hide] - full[hide]) / np.linalg.norm(full[hide])
        assert err <= 1e-3

    def test_objective_never_increases(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(30, 10))
        x[rng.random(x.shape) < 0.4] = np.nan
        obj = np.array(soft_impute(x, 0.5, max_iter=300).objective)
        assert np.all(np.diff(obj) <= 1e-9 * obj[:-1])

    def test_cap_flags_non_convergence(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(30, 10))
        x[rng.random(x.shape) < 0.4] = np.nan
        res = soft_impute(x, 0.01, max_iter=3)
        assert not res.converged and res.iterations == 3


def test_registry_builds_every_method():
    for name in METHODS:
        p = make_predictor(name)
        assert p.name == name
    with pytest.raises(DataError):
        make_predictor("oracle")
