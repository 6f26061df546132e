"""Finite-difference ground truth for the Darcy and Helmholtz tasks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import Dataset
from .fields import (
    COMPLEX,
    REAL,
    GridField,
    GrfSpec,
    point_source,
    sample_grf,
    sample_wavenumber_field,
    threshold_coefficient,
)
from .sparse import (
    NonConvergenceError,
    SingularSystemError,
    SparseMatrix,
    relative_residual,
    solve_banded_lu,
    solve_cg,
)

log = logging.getLogger(__name__)

ROBIN = "robin"
DIRICHLET = "dirichlet"

CG_TOL = 1e-10
AUDIT_TOL = 1e-8


class DatasetGenerationError(RuntimeError):
    pass


@dataclass
class DarcySystem:
    """``-div(a grad u) = f`` on interior nodes, zero Dirichlet data eliminated."""

    matrix: SparseMatrix
    rhs: np.ndarray
    grid: int
    spacing: float

    @property
    def interior(self) -> tuple[slice, slice]:
        return slice(1, self.grid - 1), slice(1, self.grid - 1)

    def to_field(self, x: np.ndarray) -> GridField:
        u = np.zeros((self.grid, self.grid))
        u[self.interior] = np.real(x).reshape(self.grid - 2, self.grid - 2)
        return GridField.real(u)

    def to_vector(self, u: GridField) -> np.ndarray:
        return u.values[0][self.interior].reshape(-1)

    def residual(self, u: GridField) -> float:
        return relative_residual(self.matrix, self.to_vector(u), self.rhs)


@dataclass
class HelmholtzSystem:
    """``-Lap u - k^2 u = f`` on all nodes with Robin or pinned boundary rows."""

    matrix: SparseMatrix
    rhs: np.ndarray
    grid: int
    spacing: float
    bc: str = ROBIN
    info: dict = field(default_factory=dict)

    def to_field(self, x: np.ndarray) -> GridField:
        return GridField.from_complex(np.asarray(x, dtype=np.complex128).reshape(self.grid, self.grid))

    def to_vector(self, u: GridField) -> np.ndarray:
        return u.scalar().reshape(-1)

    def residual(self, u: GridField) -> float:
        return relative_residual(self.matrix, self.to_vector(u), self.rhs)


def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


def assemble_darcy(a: GridField, f: GridField | None = None) -> DarcySystem:
    """5-point flux discretization with harmonic face averages of ``a``.

    With ``a == 1`` interior rows reduce to ``(4, -1, -1, -1, -1) / h**2``.
    A missing ``f`` means the unit source.
    """
    if a.kind != REAL:
        raise ValueError("Darcy coefficient must be a real scalar field")
    coef = a.values[0]
    if np.any(coef <= 0):
        raise ValueError("Darcy coefficient must be strictly positive")
    n = a.grid
    h = a.spacing
    m = n - 2
    idx = np.arange(m * m).reshape(m, m)
    inner = coef[1:-1, 1:-1]
    east = _harmonic(inner, coef[1:-1, 2:])
    west = _harmonic(inner, coef[1:-1, :-2])
    north = _harmonic(inner, coef[2:, 1:-1])
    south = _harmonic(inner, coef[:-2, 1:-1])

    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [(east + west + north + south).ravel()]
    # couplings to interior neighbours only; boundary values are zero
    for face, di, dj in ((east, 0, 1), (west, 0, -1), (north, 1, 0), (south, -1, 0)):
        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        ni, nj = ii + di, jj + dj
        ok = (ni >= 0) & (ni < m) & (nj >= 0) & (nj < m)
        rows.append(idx[ii[ok], jj[ok]])
        cols.append(idx[ni[ok], nj[ok]])
        vals.append(-face[ok])
    matrix = SparseMatrix.from_triplets(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(vals) / h**2, m * m
    )
    if f is None:
        rhs = np.ones(m * m)
    else:
        rhs = f.values[0][1:-1, 1:-1].reshape(-1).copy()
    return DarcySystem(matrix, rhs, n, h)


def solve_darcy(a: GridField, f: GridField | None = None, tol: float = CG_TOL) -> GridField:
    system = assemble_darcy(a, f)
    return system.to_field(solve_cg(system.matrix, system.rhs, tol=tol))


def assemble_helmholtz(k: GridField, f: GridField, bc: str = ROBIN) -> HelmholtzSystem:
    """5-point ``-Lap_h - k^2`` with the boundary treated per ``bc``.

    ``robin``: each missing neighbour is a ghost value eliminated through
    the first-order condition ``(u_ghost - u_node) / h = i k u_node``.
    ``dirichlet``: boundary rows become the identity with zero data.
    """
    if k.kind != REAL:
        raise ValueError("wavenumber field must be real")
    if f.grid != k.grid:
        raise ValueError(f"grid mismatch: k on {k.grid}, f on {f.grid}")
    kv = k.values[0]
    if np.any(kv <= 0):
        raise ValueError("wavenumber must be strictly positive")
    if bc not in (ROBIN, DIRICHLET):
        raise ValueError(f"unknown boundary condition {bc!r}")
    n = k.grid
    h = k.spacing
    idx = np.arange(n * n).reshape(n, n)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    on_boundary = (ii == 0) | (ii == n - 1) | (jj == 0) | (jj == n - 1)
    rhs = f.scalar().astype(np.complex128).reshape(-1).copy()

    diag = (4.0 / h**2 - kv**2).astype(np.complex128)
    rows, cols, vals = [], [], []
    missing = np.zeros((n, n))
    for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ni, nj = ii + di, jj + dj
        ok = (ni >= 0) & (ni < n) & (nj >= 0) & (nj < n)
        missing += ~ok
        src = ok if bc == ROBIN else ok & ~on_boundary
        rows.append(idx[src])
        cols.append(idx[ni[src], nj[src]])
        vals.append(np.full(int(src.sum()), -1.0 / h**2, dtype=np.complex128))
    if bc == ROBIN:
        diag = diag - missing * (1.0 + 1j * kv * h) / h**2
    else:
        diag = np.where(on_boundary, 1.0 + 0j, diag)
        rhs[on_boundary.reshape(-1)] = 0.0
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    matrix = SparseMatrix.from_triplets(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), n * n)
    return HelmholtzSystem(matrix, rhs, n, h, bc, {"k_min": float(kv.min()), "k_max": float(kv.max())})


def solve_sparse_lu(system) -> GridField:
    """Solve a Darcy or Helmholtz system by banded LU with partial pivoting."""
    try:
        x = solve_banded_lu(system.matrix, system.rhs)
    except SingularSystemError as exc:
        info = getattr(system, "info", {})
        raise SingularSystemError(
            f"singular pivot on the {system.grid}x{system.grid} grid "
            f"(bc={getattr(system, 'bc', 'dirichlet')}, k in "
            f"[{info.get('k_min', float('nan')):.4g}, {info.get('k_max', float('nan')):.4g}]): "
            f"k^2 hits a discrete resonance"
        ) from exc
    u = system.to_field(x)
    res = relative_residual(system.matrix, system.to_vector(u), system.rhs)
    log.debug("banded LU relative residual %.3e", res)
    return u


def solve_helmholtz(k: GridField, f: GridField, bc: str = ROBIN) -> GridField:
    return solve_sparse_lu(assemble_helmholtz(k, f, bc))


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

DEFAULT_SAMPLER = {
    "darcy": {"alpha": 2.0, "tau2": 9.0, "a_low": 3.0, "a_high": 12.0, "source": 1.0},
    "helmholtz": {
        "background_k": 10.0,
        "max_inclusions": 3,
        "contrast_lo": 0.8,
        "contrast_hi": 1.2,
        "source_margin": 0.2,
        "bc": ROBIN,
    },
}


def sample_seed(seed: int, index: int) -> int:
    """Independent per-sample seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def darcy_sample(n: int, seed: int, cfg: dict):
    spec = GrfSpec(cfg["alpha"], cfg["tau2"], cfg["a_low"], cfg["a_high"], seed)
    a = threshold_coefficient(sample_grf(spec, n), spec.a_low, spec.a_high)
    f = GridField.real(np.full((n, n), float(cfg["source"])))
    system = assemble_darcy(a, f)
    u = system.to_field(solve_cg(system.matrix, system.rhs, tol=CG_TOL))
    return a, f, u, system.residual(u)


def helmholtz_sample(n: int, seed: int, cfg: dict):
    rng = np.random.default_rng(seed)
    n_inc = int(rng.integers(0, cfg["max_inclusions"] + 1))
    k = sample_wavenumber_field(
        n, cfg["background_k"], n_inc, (cfg["contrast_lo"], cfg["contrast_hi"]), seed=int(rng.integers(2**31))
    )
    m = cfg["source_margin"]
    loc = tuple(rng.uniform(m, 1.0 - m, size=2))
    f = point_source(n, loc, 1.0)
    system = assemble_helmholtz(k, f, cfg["bc"])
    u = solve_sparse_lu(system)
    return k, f, u, system.residual(u)


def generate_dataset(
    problem: str, n_samples: int, grid: int, seed: int = 0, sampler: dict | None = None, max_failure_rate: float = 0.01
) -> Dataset:
    """Draw inputs, solve, and stack ``(k, f, u)`` for ``n_samples`` samples.

    Sample ``i`` uses the seed ``sample_seed(seed, i)``. A failing sample is
    logged and skipped; more than ``max_failure_rate`` failures abort.
    """
    if problem not in DEFAULT_SAMPLER:
        raise ValueError(f"unknown problem {problem!r}")
    if grid < 8:
        raise ValueError(f"grid must be at least 8, got {grid}")
    cfg = {**DEFAULT_SAMPLER[problem], **(sampler or {})}
    draw = darcy_sample if problem == "darcy" else helmholtz_sample
    cf, cu = (1, 1) if problem == "darcy" else (2, 2)
    ks, fs, us, seeds, worst = [], [], [], [], 0.0
    failed = []
    for i in range(n_samples):
        s = sample_seed(seed, i)
        try:
            k, f, u, res = draw(grid, s, cfg)
        except (NonConvergenceError, SingularSystemError) as exc:
            log.warning("sample %d (seed %d) failed: %s", i, s, exc)
            failed.append(s)
            continue
        ks.append(k.values)
        fs.append(f.values)
        us.append(u.values)
        seeds.append(s)
        worst = max(worst, res)
    if len(failed) > max_failure_rate * n_samples:
        raise DatasetGenerationError(f"{len(failed)} of {n_samples} samples failed (seeds {failed})")

    def stack(items, c):
        return np.stack(items) if items else np.zeros((0, c, grid, grid))

    meta = {
        "problem": problem,
        "grid": grid,
        "spacing": 1.0 / (grid - 1),
        "seed": seed,
        "sample_seeds": seeds,
        "failed_seeds": failed,
        "solver": "cg" if problem == "darcy" else "banded_lu",
        "solver_tol": CG_TOL if problem == "darcy" else None,
        "max_residual": worst,
        "sampler": cfg,
    }
    return Dataset(stack(ks, 1), stack(fs, cf), stack(us, cu), meta)


def audit_dataset(ds: Dataset) -> np.ndarray:
    """Relative residual of every stored sample under its re-assembled system."""
    out = []
    h = ds.spacing
    bc = ds.metadata.get("sampler", {}).get("bc", ROBIN)
    for i in range(len(ds)):
        k = GridField(ds.k[i], h, REAL)
        if ds.problem == "darcy":
            system = assemble_darcy(k, GridField(ds.f[i], h, REAL))
            out.append(system.residual(GridField(ds.u[i], h, REAL)))
        elif ds.problem == "helmholtz":
            system = assemble_helmholtz(k, GridField(ds.f[i], h, COMPLEX), bc)
            out.append(system.residual(GridField(ds.u[i], h, COMPLEX)))
        else:
            raise ValueError(f"cannot audit problem {ds.problem!r}")
    return np.asarray(out)
