"""Compressed-row sparse matrices and the two solvers the oracles rely on."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SingularSystemError(RuntimeError):
    """A zero pivot was hit during LU factorization."""


@dataclass(frozen=True)
class SparseMatrix:
    """Square CSR matrix with sorted, duplicate-free column indices per row."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    n: int

    @classmethod
    def from_triplets(cls, rows, cols, vals, n: int) -> "SparseMatrix":
        """Assemble from COO triplets; duplicate entries are summed."""
        vals = np.asarray(vals)
        dtype = np.complex128 if np.iscomplexobj(vals) else np.float64
        coo = scipy.sparse.coo_matrix((vals.astype(dtype), (rows, cols)), shape=(n, n))
        return cls.from_scipy(coo)

    @classmethod
    def from_scipy(cls, mat) -> "SparseMatrix":
        csr = scipy.sparse.csr_matrix(mat)
        if csr.shape[0] != csr.shape[1]:
            raise ValueError(f"matrix must be square, got {csr.shape}")
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.indptr.copy(), csr.indices.copy(), csr.data.copy(), csr.shape[0])

    @classmethod
    def identity(cls, n: int, dtype=np.float64) -> "SparseMatrix":
        return cls.from_scipy(scipy.sparse.identity(n, dtype=dtype, format="csr"))

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_scipy() @ x

    def __matmul__(self, x):
        return self.matvec(x)

    def is_symmetric(self) -> bool:
        a = self.to_scipy()
        diff = a - a.T
        return diff.nnz == 0 or not np.any(diff.data)

    def bandwidths(self) -> tuple[int, int]:
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        offs = self.indices - rows
        if offs.size == 0:
            return 0, 0
        return int(max(0, -offs.min())), int(max(0, offs.max()))


def solve_cg(A: SparseMatrix, b: np.ndarray, tol: float = 1e-10, max_iter: int | None = None, x0=None) -> np.ndarray:
    """Conjugate gradients for SPD ``A`` until ``|Ax - b| / |b| <= tol``."""
    b = np.asarray(b, dtype=np.float64)
    n = A.n
    if b.shape != (n,):
        raise ValueError(f"rhs must have shape ({n},), got {b.shape}")
    max_iter = 10 * n if max_iter is None else max_iter
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    op = A.to_scipy()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - op @ x
    p = r.copy()
    rr = r @ r
    for it in range(max_iter + 1):
        if np.sqrt(rr) <= tol * bnorm:
            return x
        if it == max_iter:
            break
        ap = op @ p
        alpha = rr / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = float(np.linalg.norm(b - op @ x) / bnorm)
    raise NonConvergenceError(f"CG did not reach tol {tol:g} in {max_iter} iterations (residual {res:.3e})", res, max_iter)


def solve_banded_lu(A: SparseMatrix, b: np.ndarray) -> np.ndarray:
    """Direct solve via banded LU with partial pivoting (LAPACK ``gbsv``)."""
    n = A.n
    lo, up = A.bandwidths()
    dtype = np.complex128 if (A.is_complex or np.iscomplexobj(b)) else np.float64
    ab = np.zeros((lo + up + 1, n), dtype=dtype)
    rows = np.repeat(np.arange(n), np.diff(A.indptr))
    ab[up + rows - A.indices, A.indices] = A.data
    try:
        return scipy.linalg.solve_banded((lo, up), ab, np.asarray(b, dtype=dtype), check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc


def relative_residual(A: SparseMatrix, x: np.ndarray, b: np.ndarray) -> float:
    bnorm = np.linalg.norm(b)
    r = np.linalg.norm(A.matvec(x) - b)
    return float(r / bnorm) if bnorm > 0 else float(r)
