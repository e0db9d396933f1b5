"""Periodic grids, modified spectral symbols, and discrete differentiation.

The computational cell is the cube (-L, L)^dim sampled on n points per axis,
x_j = -L + j*h with h = 2L/n. All differentiation is central differences,
applied in Fourier space: shifting a field by one grid point multiplies its
m-th coefficient by exp(i*xi_m*h) with xi_m = pi*m/L, so the centered first
difference has the exact symbol

    g_j(xi) = i sin(h xi_j) / h

and the centered second difference

    -ell_j(xi),   ell_j(xi) = 4 sin^2(h xi_j / 2) / h^2.

Transforms follow the plain DFT convention: forward unnormalized, inverse
carries the 1/n^dim factor. Fields are numpy arrays with the grid axes
first (row-major) and component axes innermost: a vector field has shape
(*grid.shape, dim), a two-tensor field (*grid.shape, dim, dim) with
T[..., i, j] the (i, j) component.

|g_j|^2 <= ell_j everywhere (sin^2 x = 4 sin^2(x/2) cos^2(x/2)), so the
first-difference symbol vanishes on pure Nyquist combinations where ell does
not: checkerboard modes are invisible to central differences. Code that
divides by |g|^2 must mask those modes; see :func:`helmholtz` callers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as _fft

from .errors import ConfigurationError
from .threads import get_workers

__all__ = [
    "Grid",
    "FrequencySet",
    "modified_symbols",
    "forward_transform",
    "inverse_transform",
    "discrete_grad",
    "discrete_div",
    "compat_residual",
    "rms",
    "mean_field",
]


# =========================================================================
# grid
# =========================================================================

@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on (-length, length)^dim.

    Parameters
    ----------
    dim : int
        Spatial dimension, 2 or 3.
    n : int
        Points per axis (>= 4). Powers of two transform fastest but any
        size works.
    length : float
        Half-length L of the cell; the edge length is 2L.
    """

    dim: int
    n: int
    length: float = 0.5

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ConfigurationError(f"grid dim must be 2 or 3, got {self.dim}")
        if not isinstance(self.n, (int, np.integer)) or self.n < 4:
            raise ConfigurationError(f"grid n must be an integer >= 4, got {self.n}")
        if not (self.length > 0.0):
            raise ConfigurationError(f"grid length must be positive, got {self.length}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def h(self) -> float:
        """Grid spacing 2L/n."""
        return 2.0 * self.length / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def npoints(self) -> int:
        return self.n**self.dim

    @property
    def cell_volume(self) -> float:
        return (2.0 * self.length) ** self.dim

    def axis_coords(self) -> np.ndarray:
        """Coordinates along one axis, x_j = -L + j*h."""
        return -self.length + self.h * np.arange(self.n)

    def coords(self) -> np.ndarray:
        """Point coordinates, shape (*shape, dim)."""
        axes = np.meshgrid(*([self.axis_coords()] * self.dim), indexing="ij")
        return np.stack(axes, axis=-1)

    def check_field(self, f: np.ndarray, rank: int, name: str = "field") -> None:
        """Raise ConfigurationError unless f has grid axes + `rank` component axes."""
        want = self.shape + (self.dim,) * rank
        if f.shape != want:
            raise ConfigurationError(
                f"{name} has shape {f.shape}, expected {want} for rank-{rank} on this grid"
            )

    def supercell(self, k) -> "Grid":
        """Grid for a k-fold tiling per axis at the same spacing."""
        k = int(k)
        if k < 1:
            raise ConfigurationError(f"supercell factor must be >= 1, got {k}")
        return Grid(self.dim, self.n * k, self.length * k)


# =========================================================================
# modified symbols
# =========================================================================

@dataclass(frozen=True)
class FrequencySet:
    """Frequencies and central-difference symbols for one grid.

    Attributes
    ----------
    xi : (*shape, dim) float
        DFT frequencies xi_j = pi*m_j/L, m_j in [-n/2, n/2).
    grad_sym : (*shape, dim) complex
        First-difference symbols g_j = i sin(h xi_j)/h.
    lap_sym : (*shape, dim) float
        Second-difference symbols ell_j = 4 sin^2(h xi_j/2)/h^2 (>= 0).
    grad_sq : (*shape,) float
        sum_j |g_j|^2; the symbol of the composed divergence-of-gradient
        operator (what projections must divide by).
    real_axis : bool
        True when built on the half-spectrum (rfft layout along the last
        grid axis).
    """

    grid: Grid
    xi: np.ndarray
    grad_sym: np.ndarray
    lap_sym: np.ndarray
    grad_sq: np.ndarray = field(init=False)
    real_axis: bool = False

    def __post_init__(self):
        gsq = np.sum(np.abs(self.grad_sym) ** 2, axis=-1)
        object.__setattr__(self, "grad_sq", gsq)


def _axis_freq_integers(n: int, real: bool) -> np.ndarray:
    if real:
        return np.arange(n // 2 + 1, dtype=float)
    return np.fft.fftfreq(n, d=1.0 / n)


def modified_symbols(grid: Grid, real: bool = False) -> FrequencySet:
    """Build the :class:`FrequencySet` for `grid`.

    With ``real=True`` the layout matches rfftn (half-spectrum along the
    last grid axis); symbols are identical where the spectra overlap.
    """
    h = grid.h
    per_axis = []
    for ax in range(grid.dim):
        last = ax == grid.dim - 1
        m = _axis_freq_integers(grid.n, real and last)
        per_axis.append(np.pi * m / grid.length)
    mesh = np.meshgrid(*per_axis, indexing="ij")
    xi = np.stack(mesh, axis=-1)
    grad_sym = 1j * np.sin(h * xi) / h
    lap_sym = 4.0 * np.sin(h * xi / 2.0) ** 2 / h**2
    return FrequencySet(grid=grid, xi=xi, grad_sym=grad_sym, lap_sym=lap_sym,
                        real_axis=bool(real))


# =========================================================================
# transforms
# =========================================================================

def _grid_axes(grid: Grid) -> tuple:
    return tuple(range(grid.dim))


def forward_transform(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT over the grid axes (components untouched)."""
    if f.shape[: grid.dim] != grid.shape:
        raise ConfigurationError(
            f"field grid axes {f.shape[:grid.dim]} do not match grid {grid.shape}"
        )
    return _fft.fftn(f, axes=_grid_axes(grid), workers=get_workers())


def inverse_transform(grid: Grid, fhat: np.ndarray) -> np.ndarray:
    """Inverse DFT (carries the 1/n^dim factor)."""
    if fhat.shape[: grid.dim] != grid.shape:
        raise ConfigurationError(
            f"spectral field grid axes {fhat.shape[:grid.dim]} do not match grid {grid.shape}"
        )
    return _fft.ifftn(fhat, axes=_grid_axes(grid), workers=get_workers())


def forward_rfft(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Real-input forward transform (half-spectrum along the last grid axis)."""
    return _fft.rfftn(f, axes=_grid_axes(grid), workers=get_workers())


def inverse_rfft(grid: Grid, fhat: np.ndarray) -> np.ndarray:
    """Inverse of :func:`forward_rfft` (grid shape restored exactly)."""
    return _fft.irfftn(fhat, s=grid.shape, axes=_grid_axes(grid), workers=get_workers())


# =========================================================================
# differentiation
# =========================================================================

def discrete_grad(grid: Grid, u: np.ndarray, freqs: FrequencySet | None = None) -> np.ndarray:
    """Centered-difference gradient of a vector field, (grad u)_ij = D_j u_i.

    Spectral application of g_j; exactly equal (to roundoff) to the
    real-space stencil (u(x + h e_j) - u(x - h e_j)) / (2h).
    """
    grid.check_field(u, 1, "u")
    if freqs is None or not freqs.real_axis:
        freqs = modified_symbols(grid, real=True)
    uhat = forward_rfft(grid, u)
    # (*shape, i) * (*shape, j) -> (*shape, i, j)
    ghat = uhat[..., :, None] * freqs.grad_sym[..., None, :]
    return inverse_rfft(grid, ghat)


def discrete_div(grid: Grid, T: np.ndarray, freqs: FrequencySet | None = None) -> np.ndarray:
    """Centered-difference divergence of a two-tensor, (div T)_i = D_j T_ij."""
    grid.check_field(T, 2, "T")
    if freqs is None or not freqs.real_axis:
        freqs = modified_symbols(grid, real=True)
    That = forward_rfft(grid, T)
    dhat = np.sum(That * freqs.grad_sym[..., None, :], axis=-1)
    return inverse_rfft(grid, dhat)


# =========================================================================
# norms and means
# =========================================================================

def rms(grid: Grid, f: np.ndarray) -> float:
    """Volume-normalized L2 norm: sqrt of the cell average of |f|^2.

    Component axes are contracted with the Frobenius inner product. The
    reduction is a fixed-order pairwise sum (numpy's) for reproducibility.
    """
    a = np.ascontiguousarray(f).reshape(-1)
    return float(np.sqrt(np.sum(a * a) / np.prod(f.shape[: grid.dim])))


def mean_field(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Cell average over the grid axes; returns the component array."""
    return np.mean(f, axis=_grid_axes(grid))


def compat_residual(grid: Grid, F: np.ndarray, grad_u: np.ndarray) -> float:
    """Compatibility gap ||grad u - F|| in the volume-normalized L2 norm."""
    grid.check_field(F, 2, "F")
    grid.check_field(grad_u, 2, "grad_u")
    return rms(grid, grad_u - F)
