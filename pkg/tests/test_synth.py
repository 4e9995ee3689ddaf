from __future__ import annotations

import numpy as np
import pytest

from runlmc import synth
from runlmc.errors import DataError


def test_reference_components_are_orthonormal_and_signed(catalog):
    f = synth.reference_components(catalog)
    np.testing.assert_allclose(f @ f.T, np.eye(3), atol=1e-12)
    x = np.log(catalog.distances / synth.REFERENCE_LENGTH)
    np.testing.assert_allclose(f[0], x / np.linalg.norm(x))
    assert f[1, -1] > 0 and f[2, -1] > 0
    # the speed/endurance component changes sign between 800 m and 1500 m
    assert f[1, 3] * f[1, 4] < 0 or f[1, 3] * f[1, 5] < 0


def test_default_moments_give_the_exponent_band():
    spec = synth.SynthSpec()
    scale = synth.exponent_scale()
    assert spec.coef_means[0] * scale == pytest.approx(synth.MEDIAN_EXPONENT)
    lo = (spec.coef_means[0] - 1.6448536269514722 * spec.coef_stds[0]) * scale
    hi = (spec.coef_means[0] + 1.6448536269514722 * spec.coef_stds[0]) * scale
    # a symmetric band of the same width as 1.10..1.15, centered on the median
    assert hi - lo == pytest.approx(0.05)
    assert 1.09 < lo < 1.10 and 1.14 < hi < 1.15


def test_zero_noise_table_has_rank_three():
    t = synth.generate(synth.SynthSpec(n_athletes=200, noise_std=0.0, seed=1))
    s = np.linalg.svd(t.values, compute_uv=False)
    assert s[3] <= 1e-10 * s[0]


def test_zero_noise_components_match_spec_up_to_sign():
    t = synth.generate(synth.SynthSpec(n_athletes=500, noise_std=0.0, seed=2))
    _, _, vt = np.linalg.svd(t.values, full_matrices=False)
    ref = synth.reference_components()
    # singular vectors span the same space as the reference components
    proj = vt[:3] @ ref.T
    np.testing.assert_allclose(np.abs(np.linalg.det(proj)), 1.0, atol=1e-10)


def test_zero_coefficient_spread_gives_identical_rows():
    t = synth.generate(synth.SynthSpec(n_athletes=5, noise_std=0.0, coef_stds=(0.0, 0.0, 0.0)))
    assert np.all(t.values == t.values[0])


def test_coefficient_moments_within_three_standard_errors():
    spec = synth.SynthSpec(n_athletes=10_000, seed=4)
    c = synth.draw_coefficients(spec)
    se = np.asarray(spec.coef_stds) / np.sqrt(spec.n_athletes)
    assert np.all(np.abs(c.mean(axis=0) - spec.coef_means) <= 3 * se)
    # sample std of a Gaussian has standard error sigma / sqrt(2n)
    assert np.all(np.abs(c.std(axis=0, ddof=1) - spec.coef_stds) <= 3 * np.asarray(spec.coef_stds) / np.sqrt(2 * spec.n_athletes))


def test_deterministic_and_seed_sensitive():
    a = synth.generate(synth.SynthSpec(n_athletes=50, seed=3))
    b = synth.generate(synth.SynthSpec(n_athletes=50, seed=3))
    c = synth.generate(synth.SynthSpec(n_athletes=50, seed=4))
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.tobytes() != c.values.tobytes()


def test_invalid_specs():
    with pytest.raises(ValueError):
        synth.SynthSpec(noise_std=-1)
    with pytest.raises(ValueError):
        synth.SynthSpec(coef_means=(1.0,))
    with pytest.raises(ValueError):
        synth.SynthSpec(components=np.ones((3, 10)))


class TestMissingness:
    shape = (300, 10)

    def test_uniform_hides_exactly_k_per_row(self):
        for k in (0, 3, 6, 10):
            m = synth.missingness_mask(self.shape, "uniform_k", k, seed=1)
            assert np.all(m.sum(axis=1) == k)

    def test_consecutive_keeps_an_adjacent_window(self):
        m = synth.missingness_mask(self.shape, "consecutive_k", 4, seed=1)
        for row in ~m:
            kept = np.flatnonzero(row)
            assert len(kept) == 4 and np.all(np.diff(kept) == 1)
        starts = np.argmax(~m, axis=1)
        assert set(starts) == set(range(7))  # every window position occurs

    def test_identity_cases(self, noisy_population):
        t = noisy_population.select_rows(range(20))
        assert not np.isnan(synth.apply_missingness(t, "uniform_k", 0, 0).values).any()
        assert not np.isnan(synth.apply_missingness(t, "consecutive_k", 10, 0).values).any()

    def test_bad_arguments(self):
        with pytest.raises(DataError):
            synth.missingness_mask(self.shape, "uniform_k", 11, 0)
        with pytest.raises(DataError):
            synth.missingness_mask(self.shape, "diagonal", 2, 0)

    def test_replicate_pattern(self, noisy_population):
        t = noisy_population.select_rows(range(30))
        assert not synth.replicate_pattern(t).any()
        masked = synth.apply_missingness(t, "uniform_k", 4, 2)
        mask = synth.replicate_pattern(masked, t)
        again = t.mask(mask)
        np.testing.assert_array_equal(synth.replicate_pattern(again), mask)
        np.testing.assert_array_equal((~mask).sum(axis=1), (~np.isnan(masked.values)).sum(axis=1))
        with pytest.raises(DataError):
            synth.replicate_pattern(masked, t.select_rows(range(5)))

    def test_variable_density(self):
        counts = np.arange(300) % 11
        m = synth.variable_density_mask(self.shape, counts, seed=0)
        np.testing.assert_array_equal((~m).sum(axis=1), counts)
