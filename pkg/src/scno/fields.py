"""Random and deterministic input fields on the uniform unit-square grid.

Node ``(i, j)`` sits at ``(x, y) = (j * h, i * h)`` with ``h = 1 / (H - 1)``;
arrays are indexed ``[channel, i, j]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.sparse

from .sparse import SparseMatrix, solve_cg

REAL = "real"
COMPLEX = "complex"

# 3x3 mollifier used to spread point sources; sums to one
SOURCE_STENCIL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


@dataclass
class GridField:
    """A field sampled on the ``H x H`` node grid of the unit square.

    ``kind`` is ``"real"`` (one channel) or ``"complex"`` (two channels,
    real part then imaginary part).
    """

    values: np.ndarray
    spacing: float
    kind: str = REAL

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"field values must be [C,H,W], got shape {self.values.shape}")
        c, h, w = self.values.shape
        if h != w:
            raise ValueError(f"grid must be square, got {h}x{w}")
        if not np.isclose(self.spacing, 1.0 / (h - 1), rtol=0, atol=1e-15):
            raise ValueError(f"spacing {self.spacing} inconsistent with {h} nodes")
        if self.kind == COMPLEX and c != 2:
            raise ValueError("complex fields carry exactly two channels")
        if self.kind == REAL and c != 1:
            raise ValueError("real scalar fields carry exactly one channel")
        if self.kind not in (REAL, COMPLEX):
            raise ValueError(f"unknown field kind {self.kind!r}")

    @property
    def grid(self) -> int:
        return self.values.shape[1]

    @classmethod
    def real(cls, array: np.ndarray) -> "GridField":
        array = np.asarray(array, dtype=np.float64)
        return cls(array[None], 1.0 / (array.shape[0] - 1), REAL)

    @classmethod
    def from_complex(cls, array: np.ndarray) -> "GridField":
        array = np.asarray(array, dtype=np.complex128)
        return cls(np.stack([array.real, array.imag]), 1.0 / (array.shape[0] - 1), COMPLEX)

    def scalar(self) -> np.ndarray:
        """The field as a 2-D real or complex array."""
        if self.kind == COMPLEX:
            return self.values[0] + 1j * self.values[1]
        return self.values[0]


def grid_size(grid) -> int:
    if isinstance(grid, (tuple, list)):
        h, w = grid
        if h != w:
            raise ValueError(f"only square grids are supported, got {grid}")
        grid = h
    return int(grid)


def node_coordinates(n: int) -> tuple[np.ndarray, np.ndarray]:
    """``(X, Y)`` coordinate arrays of an ``n x n`` node grid."""
    t = np.linspace(0.0, 1.0, n)
    y, x = np.meshgrid(t, t, indexing="ij")
    return x, y


@dataclass(frozen=True)
class GrfSpec:
    """Parameters of the thresholded Gaussian random field."""

    alpha: float = 2.0
    tau2: float = 9.0
    a_low: float = 3.0
    a_high: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not self.a_low < self.a_high:
            raise ValueError("a_low must be below a_high")


def neumann_laplacian(n: int, h: float) -> SparseMatrix:
    """Negative 5-point Laplacian with reflecting (zero-flux) boundaries."""
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    t = scipy.sparse.diags([-np.ones(n - 1), main, -np.ones(n - 1)], [-1, 0, 1]) / h**2
    eye = scipy.sparse.identity(n)
    return SparseMatrix.from_scipy(scipy.sparse.kron(eye, t) + scipy.sparse.kron(t, eye))


def _neumann_eigenvalues(n: int, h: float) -> np.ndarray:
    s = 4.0 / h**2 * np.sin(np.pi * np.arange(n) / (2 * n)) ** 2
    return s[:, None] + s[None, :]


def sample_grf(spec: GrfSpec, grid, seed: int | None = None, cg_tol: float = 1e-12) -> GridField:
    """Draw ``(-Lap + tau2)^(-alpha) w`` for white noise ``w``, then standardize.

    The integer part of ``alpha`` is applied by repeated CG solves with the
    Neumann Laplacian; any fractional remainder is applied in its cosine
    eigenbasis, where that operator is diagonal.
    """
    n = grid_size(grid)
    if n < 8:
        raise ValueError(f"grid must be at least 8, got {n}")
    seed = spec.seed if seed is None else seed
    h = 1.0 / (n - 1)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, n))

    lap = neumann_laplacian(n, h).to_scipy()
    shifted = SparseMatrix.from_scipy(lap + spec.tau2 * scipy.sparse.identity(n * n))
    whole = int(np.floor(spec.alpha))
    frac = spec.alpha - whole
    vec = g.reshape(-1)
    for _ in range(whole):
        vec = solve_cg(shifted, vec, tol=cg_tol)
    g = vec.reshape(n, n)
    if frac > 0:
        lam = _neumann_eigenvalues(n, h) + spec.tau2
        g = scipy.fft.idctn(scipy.fft.dctn(g, norm="ortho") * lam**-frac, norm="ortho")

    g = g - g.mean()
    g = g / g.std()
    return GridField.real(g)


def threshold_coefficient(g: GridField, a_low: float, a_high: float) -> GridField:
    """Piecewise-constant coefficient: ``a_high`` where ``g >= 0``, else ``a_low``."""
    if g.kind != REAL:
        raise ValueError("thresholding needs a real scalar field")
    if a_low <= 0:
        raise ValueError("coefficient levels must be positive")
    if not a_low < a_high:
        raise ValueError("a_low must be below a_high")
    return GridField(np.where(g.values >= 0.0, a_high, a_low), g.spacing, REAL)


def sample_wavenumber_field(
    grid,
    background_k: float = 10.0,
    n_inclusions: int = 2,
    contrast_range: tuple[float, float] = (0.8, 1.2),
    seed: int = 0,
) -> GridField:
    """Background wavenumber with smooth Gaussian-bump inclusions.

    Inclusion ``i`` has contrast ``c_i`` drawn from ``contrast_range``. The
    local contrast is a convex blend of 1 and the ``c_i`` weighted by the
    bumps, so ``k`` stays within ``background_k * [min(1, lo), max(1, hi)]``.
    """
    n = grid_size(grid)
    lo, hi = contrast_range
    if background_k <= 0:
        raise ValueError("background_k must be positive")
    if lo <= 0 or hi < lo:
        raise ValueError(f"invalid contrast range {contrast_range}")
    x, y = node_coordinates(n)
    rng = np.random.default_rng(seed)
    bumps = []
    contrasts = []
    for _ in range(n_inclusions):
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        radius = rng.uniform(0.05, 0.2)
        contrasts.append(rng.uniform(lo, hi))
        bumps.append(np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * radius**2)))
    blend = np.ones((n, n))
    if bumps:
        bumps = np.stack(bumps)
        weights = bumps / np.maximum(1.0, bumps.sum(axis=0))
        blend = blend + np.tensordot(np.asarray(contrasts) - 1.0, weights, axes=1)
    k = np.maximum(background_k * blend, 1e-6 * background_k)
    return GridField.real(k)


def point_source(grid, location: tuple[float, float], amplitude: complex = 1.0) -> GridField:
    """Mollified delta at the node nearest ``location``.

    The amplitude is spread with :data:`SOURCE_STENCIL` and divided by
    ``h**2`` so that ``h**2 * sum(f) == amplitude``. The stencil centre is
    kept one node away from the boundary so all nine weights land on the grid.
    """
    n = grid_size(grid)
    lx, ly = location
    if not (0.0 <= lx <= 1.0 and 0.0 <= ly <= 1.0):
        raise ValueError(f"source location {location} outside the unit square")
    h = 1.0 / (n - 1)
    i = min(max(int(round(ly / h)), 1), n - 2)
    j = min(max(int(round(lx / h)), 1), n - 2)
    f = np.zeros((n, n), dtype=np.complex128)
    f[i - 1 : i + 2, j - 1 : j + 2] = complex(amplitude) * SOURCE_STENCIL / h**2
    return GridField.from_complex(f)
