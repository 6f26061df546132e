import numpy as np
import pytest
import scipy.sparse

from scno.dataset_io import load_dataset, save_dataset
from scno.fields import GridField, node_coordinates, point_source, sample_wavenumber_field
from scno.oracle import (DIRICHLET, ROBIN, DatasetGenerationError, assemble_darcy, assemble_helmholtz,
                         audit_dataset, generate_dataset, solve_darcy, solve_helmholtz, solve_sparse_lu)
from scno.sparse import (NonConvergenceError, SingularSystemError, SparseMatrix, relative_residual,
                         solve_banded_lu, solve_cg)


def sin_mode(n):
    x, y = node_coordinates(n)
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def rel_l2(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def darcy_error(n):
    u_exact = sin_mode(n)
    u = solve_darcy(GridField.real(np.ones((n, n))), GridField.real(2 * np.pi**2 * u_exact))
    return rel_l2(u.values[0], u_exact)


def helmholtz_dirichlet_error(n, k=5.0):
    u_exact = sin_mode(n)
    f = GridField.from_complex((2 * np.pi**2 - k**2) * u_exact)
    u = solve_helmholtz(GridField.real(np.full((n, n), k)), f, DIRICHLET)
    return rel_l2(u.scalar(), u_exact)


def inverse_power_min_eig(A, iters=300):
    """Smallest eigenvalue of an SPD matrix by inverse power iteration with dense solves."""
    dense = A.to_dense()
    v = np.ones(A.n) / np.sqrt(A.n)
    for _ in range(iters):
        w = np.linalg.solve(dense, v)
        v = w / np.linalg.norm(w)
    return float(v @ dense @ v)


class TestSparseMatrix:
    def test_triplets_sum_duplicates_and_sort(self):
        A = SparseMatrix.from_triplets([0, 0, 1, 0], [1, 0, 1, 1], [1.0, 2.0, 3.0, 4.0], 2)
        np.testing.assert_array_equal(A.to_dense(), [[2.0, 5.0], [0.0, 3.0]])
        for r in range(A.n):
            cols = A.indices[A.indptr[r] : A.indptr[r + 1]]
            assert np.all(np.diff(cols) > 0)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            SparseMatrix.from_scipy(scipy.sparse.csr_matrix(np.ones((2, 3))))

    def test_bandwidths(self):
        A = SparseMatrix.from_scipy(scipy.sparse.diags([1, 2, 3], [-2, 0, 1], shape=(6, 6)))
        assert A.bandwidths() == (2, 1)


class TestSolvers:
    def test_cg_identity(self, rng):
        b = rng.normal(size=10)
        np.testing.assert_array_equal(solve_cg(SparseMatrix.identity(10), b, max_iter=1), b)

    def test_cg_zero_rhs(self):
        np.testing.assert_array_equal(solve_cg(SparseMatrix.identity(5), np.zeros(5)), 0.0)

    def test_cg_matches_dense_on_darcy(self, rng):
        a = GridField.real(rng.choice([3.0, 12.0], size=(32, 32)))
        system = assemble_darcy(a)
        x = solve_cg(system.matrix, system.rhs, tol=1e-10)
        dense = np.linalg.solve(system.matrix.to_dense(), system.rhs)
        assert relative_residual(system.matrix, x, system.rhs) <= 1e-10
        np.testing.assert_allclose(x, dense, rtol=0, atol=1e-8 * np.abs(dense).max())

    def test_cg_non_convergence(self, rng):
        system = assemble_darcy(GridField.real(np.ones((16, 16))))
        with pytest.raises(NonConvergenceError) as err:
            solve_cg(system.matrix, system.rhs, max_iter=2)
        assert err.value.residual > 1e-10 and err.value.iterations == 2

    def test_banded_identity(self, rng):
        b = rng.normal(size=7) + 1j * rng.normal(size=7)
        np.testing.assert_allclose(solve_banded_lu(SparseMatrix.identity(7), b), b)

    def test_banded_matches_cg_on_darcy(self, rng):
        a = GridField.real(rng.choice([3.0, 12.0], size=(24, 24)))
        system = assemble_darcy(a)
        x_lu = solve_sparse_lu(system).values
        x_cg = system.to_field(solve_cg(system.matrix, system.rhs, tol=1e-12)).values
        np.testing.assert_allclose(x_lu, x_cg, rtol=0, atol=1e-8 * np.abs(x_cg).max())

    def test_singular(self):
        A = SparseMatrix.from_triplets([0, 1], [0, 1], [1.0, 0.0], 2)
        with pytest.raises(SingularSystemError):
            solve_banded_lu(A, np.ones(2))


class TestDarcy:
    def test_unit_coefficient_stencil(self):
        n = 8
        h = 1 / (n - 1)
        A = assemble_darcy(GridField.real(np.ones((n, n)))).matrix.to_dense() * h**2
        m = n - 2
        centre = 2 * m + 2  # interior node with four interior neighbours
        row = A[centre]
        assert row[centre] == 4.0
        assert sorted(row[np.nonzero(row)].tolist()) == [-1.0, -1.0, -1.0, -1.0, 4.0]
        for nb in (centre - 1, centre + 1, centre - m, centre + m):
            assert row[nb] == -1.0

    def test_symmetric_positive_definite(self, rng):
        a = GridField.real(rng.uniform(1.0, 10.0, size=(16, 16)))
        A = assemble_darcy(a).matrix
        assert A.is_symmetric()
        dense = A.to_dense()
        np.testing.assert_array_equal(dense, dense.T)
        assert inverse_power_min_eig(A) > 0

    def test_manufactured_solution_order(self):
        errs = [darcy_error(n) for n in (32, 64, 128)]
        assert errs[1] < 1e-3
        for coarse, fine in zip(errs, errs[1:]):
            assert 3.4 <= coarse / fine <= 4.6

    def test_frozen_error_64(self):
        assert darcy_error(64) == pytest.approx(2.07e-4, rel=0.02)

    def test_rejects_non_positive(self):
        a = np.ones((8, 8))
        a[3, 3] = 0.0
        with pytest.raises(ValueError):
            assemble_darcy(GridField.real(a))


class TestHelmholtz:
    def test_dirichlet_manufactured(self):
        e64, e128 = helmholtz_dirichlet_error(64), helmholtz_dirichlet_error(128)
        assert e64 < 1e-2
        assert 3.4 <= e64 / e128 <= 4.6

    def test_dirichlet_zero_source(self):
        n = 16
        u = solve_helmholtz(GridField.real(np.full((n, n), 3.3)), GridField.from_complex(np.zeros((n, n))), DIRICHLET)
        np.testing.assert_array_equal(u.values, 0.0)

    def test_robin_has_imaginary_boundary_terms(self):
        n = 8
        sys_ = assemble_helmholtz(GridField.real(np.full((n, n), 4.0)), point_source(n, (0.5, 0.5)), ROBIN)
        d = sys_.matrix.to_dense().diagonal().reshape(n, n)
        h = 1 / (n - 1)
        assert d[0, 3].imag == pytest.approx(-4.0 / h)
        assert d[0, 0].imag == pytest.approx(-8.0 / h)
        assert d[3, 3].imag == 0.0

    def test_robin_self_convergence(self):
        k = 10.0
        grids = (33, 65, 129)

        def gaussian_source(n):
            x, y = node_coordinates(n)
            return GridField.from_complex(100.0 * np.exp(-((x - 0.4) ** 2 + (y - 0.55) ** 2) / 0.01))

        sols = [solve_helmholtz(GridField.real(np.full((n, n), k)), gaussian_source(n), ROBIN).scalar()
                for n in grids]
        fine = sols[-1]
        diffs = []
        for coarse, nxt in zip(sols, sols[1:]):
            diffs.append(np.linalg.norm(coarse - nxt[::2, ::2]) / np.linalg.norm(coarse))
        ratio = diffs[0] / diffs[1]
        assert ratio > 1.8  # first order or better
        assert np.all(np.isfinite(fine))

    def test_point_source_residual(self):
        n = 64
        k = sample_wavenumber_field(n, 10.0, 2, seed=3)
        system = assemble_helmholtz(k, point_source(n, (0.4, 0.6)), ROBIN)
        assert system.residual(solve_sparse_lu(system)) <= 1e-10

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            assemble_helmholtz(GridField.real(np.ones((8, 8))), point_source(16, (0.5, 0.5)))

    def test_singular_pivot_named(self):
        from scno.oracle import HelmholtzSystem

        n = 8
        A = SparseMatrix.from_triplets(np.arange(n * n - 1), np.arange(n * n - 1), np.ones(n * n - 1) + 0j, n * n)
        system = HelmholtzSystem(A, np.ones(n * n, dtype=complex), n, 1 / (n - 1), ROBIN, {"k_min": 5.0, "k_max": 5.0})
        with pytest.raises(SingularSystemError, match="resonance"):
            solve_sparse_lu(system)


class TestGenerateDataset:
    def test_empty(self):
        ds = generate_dataset("darcy", 0, 16, seed=1)
        assert len(ds) == 0 and ds.metadata["grid"] == 16 and ds.u.shape == (0, 1, 16, 16)

    @pytest.mark.parametrize("problem", ["darcy", "helmholtz"])
    def test_audit_and_metadata(self, problem):
        ds = generate_dataset(problem, 4, 32, seed=7)
        assert len(ds) == 4
        assert audit_dataset(ds).max() <= 1e-8
        assert ds.metadata["problem"] == problem and len(ds.metadata["sample_seeds"]) == 4
        if problem == "helmholtz":
            assert ds.u.shape == (4, 2, 32, 32) and ds.f.shape[1] == 2

    def test_same_seed_same_file(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(tmp_path / f"{name}.nods", generate_dataset("darcy", 3, 16, seed=2))
        assert (tmp_path / "a.nods").read_bytes() == (tmp_path / "b.nods").read_bytes()
        assert audit_dataset(load_dataset(tmp_path / "a.nods")).max() <= 1e-8

    def test_failure_budget(self, monkeypatch):
        import scno.oracle as oracle

        def boom(n, seed, cfg):
            raise SingularSystemError("forced")

        monkeypatch.setattr(oracle, "darcy_sample", boom)
        with pytest.raises(DatasetGenerationError):
            oracle.generate_dataset("darcy", 5, 16)

    def test_small_grid(self):
        with pytest.raises(ValueError):
            generate_dataset("darcy", 1, 4)
