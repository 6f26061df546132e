import numpy as np
import pytest

from scno.fields import (COMPLEX, SOURCE_STENCIL, GridField, GrfSpec, neumann_laplacian, point_source,
                         sample_grf, sample_wavenumber_field, threshold_coefficient)


class TestGridField:
    def test_spacing_checked(self):
        with pytest.raises(ValueError):
            GridField(np.zeros((1, 8, 8)), 0.1)
        assert GridField(np.zeros((1, 8, 8)), 1 / 7).grid == 8

    def test_complex_needs_two_channels(self):
        with pytest.raises(ValueError):
            GridField(np.zeros((1, 8, 8)), 1 / 7, COMPLEX)

    def test_square_only(self):
        with pytest.raises(ValueError):
            GridField(np.zeros((1, 8, 9)), 1 / 7)

    def test_complex_round_trip(self, rng):
        z = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
        np.testing.assert_array_equal(GridField.from_complex(z).scalar(), z)


class TestGrf:
    def test_deterministic(self):
        a = sample_grf(GrfSpec(), 32, seed=5).values
        b = sample_grf(GrfSpec(), 32, seed=5).values
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, sample_grf(GrfSpec(), 32, seed=6).values)

    def test_standardized(self):
        g = sample_grf(GrfSpec(), 32, seed=1).values
        assert abs(g.mean()) < 1e-12
        assert abs(g.var() - 1.0) < 1e-12

    def test_smooth_lag1_autocorrelation(self):
        corr = []
        for seed in range(100):
            g = sample_grf(GrfSpec(alpha=2, tau2=9), 64, seed=seed).values[0]
            corr.append(np.mean(g[:, 1:] * g[:, :-1]) / np.mean(g * g))
        assert np.mean(corr) > 0.5

    def test_fractional_alpha_matches_integer_limit(self):
        # alpha = 1 + 1e-12 applies a near-identity DCT step after one CG solve
        a = sample_grf(GrfSpec(alpha=1.0), 16, seed=3).values
        b = sample_grf(GrfSpec(alpha=1.0 + 1e-12), 16, seed=3).values
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_fractional_dct_diagonalizes_laplacian(self, rng):
        import scipy.fft

        from scno.fields import _neumann_eigenvalues

        n, h = 12, 1 / 11
        v = rng.normal(size=(n, n))
        lap = neumann_laplacian(n, h).to_dense()
        direct = (lap @ v.reshape(-1)).reshape(n, n)
        spectral = scipy.fft.idctn(scipy.fft.dctn(v, norm="ortho") * _neumann_eigenvalues(n, h), norm="ortho")
        np.testing.assert_allclose(spectral, direct, rtol=1e-10, atol=1e-8)

    def test_small_grid_rejected(self):
        with pytest.raises(ValueError):
            sample_grf(GrfSpec(), 4)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            GrfSpec(alpha=0.5)
        with pytest.raises(ValueError):
            GrfSpec(a_low=12, a_high=3)


class TestThreshold:
    def test_all_positive(self):
        g = GridField(np.ones((1, 8, 8)), 1 / 7)
        np.testing.assert_array_equal(threshold_coefficient(g, 3, 12).values, 12.0)

    def test_two_levels_and_balance(self):
        fractions = []
        for seed in range(200):
            a = threshold_coefficient(sample_grf(GrfSpec(), 32, seed=seed), 3.0, 12.0).values
            assert set(np.unique(a)) <= {3.0, 12.0}
            fractions.append(np.mean(a == 12.0))
        assert abs(np.mean(fractions) - 0.5) < 0.05

    def test_non_positive_level(self):
        with pytest.raises(ValueError):
            threshold_coefficient(GridField(np.ones((1, 8, 8)), 1 / 7), 0.0, 1.0)


class TestWavenumber:
    def test_no_inclusions(self):
        np.testing.assert_array_equal(sample_wavenumber_field(16, 7.5, 0, seed=2).values, 7.5)

    def test_bounds_over_seeds(self):
        for seed in range(100):
            k = sample_wavenumber_field(32, 10.0, 3, (0.8, 1.2), seed=seed).values
            assert k.min() > 0
            assert k.max() / k.min() <= 1.5
            assert 8.0 - 1e-12 <= k.min() and k.max() <= 12.0 + 1e-12

    def test_extreme_contrast_stays_positive(self):
        for seed in range(20):
            assert sample_wavenumber_field(16, 1.0, 5, (1e-3, 5.0), seed=seed).values.min() > 0

    def test_invalid(self):
        with pytest.raises(ValueError):
            sample_wavenumber_field(16, -1.0)
        with pytest.raises(ValueError):
            sample_wavenumber_field(16, 1.0, contrast_range=(0.0, 1.0))


class TestPointSource:
    def test_discrete_integral(self):
        n = 33
        f = point_source(n, (0.3, 0.6), 2.0 - 0.5j)
        h = 1 / (n - 1)
        assert h * h * f.scalar().sum() == pytest.approx(2.0 - 0.5j, abs=1e-12)

    def test_stencil_at_node(self):
        n = 17
        h = 1 / 16
        f = point_source(n, (4 * h, 8 * h), 1.0).scalar()
        np.testing.assert_allclose(f[7:10, 3:6].real, SOURCE_STENCIL / h**2, rtol=1e-14)
        assert np.count_nonzero(f) == 9
        assert f[8, 4].real == pytest.approx(0.25 / h**2)

    def test_superposition(self):
        a = point_source(16, (0.2, 0.3), 1.0).values
        b = point_source(16, (0.7, 0.6), 1j).values
        both = GridField(a + b, 1 / 15, COMPLEX)
        np.testing.assert_allclose(both.values, a + b)
        assert np.count_nonzero(a * b) == 0

    def test_boundary_clamped(self):
        f = point_source(16, (0.0, 1.0)).scalar()
        assert np.count_nonzero(f) == 9
        assert f[14, 1] != 0

    def test_outside(self):
        with pytest.raises(ValueError):
            point_source(16, (1.2, 0.5))
