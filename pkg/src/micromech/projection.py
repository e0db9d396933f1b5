"""Projection of tensor fields onto compatible deformation gradients.

The global step of the splitting scheme: given the current constitutive
field F and multiplier field lam, find the displacement whose gradient best
matches F - lam/rho. With central-difference symbols g_j this is, per
nonzero frequency,

    u_hat_i = -(F_hat_ij - lam_hat_ij / rho) g_j / sum_k |g_k|^2,

the exact normal-equation solution of the least-squares problem over
discrete-compatible fields, so the discrete divergence of
rho*(grad u - F) + lam vanishes identically afterwards.

The zero-frequency (macroscopic) component is controlled per tensor entry
by a :class:`MacroBC`: strain-controlled entries pin <grad u>_ij directly;
stress-controlled entries update it from the multiplier gap,

    <grad u>_ij = <F>_ij - (<lam>_ij - Sbar_ij) / rho,

which is stationarity of the augmented Lagrangian including the work term
of the prescribed mean stress Sbar, and drives <lam> -> Sbar.

Pure-Nyquist frequency combinations, where all g_j vanish, carry no
representable gradient content and are projected out (see grid module
notes); the multiplier iteration removes F's content there over the outer
iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParameterError
from .grid import (
    FrequencySet,
    Grid,
    forward_rfft,
    inverse_rfft,
    mean_field,
    modified_symbols,
)

__all__ = ["MacroBC", "ProjectionResult", "helmholtz_project"]


@dataclass(frozen=True)
class MacroBC:
    """Per-component control of the macroscopic deformation.

    strain_mask[i, j] True  -> <F_ij> prescribed, value[i, j] is the target
                               mean deformation-gradient entry;
    strain_mask[i, j] False -> mean nominal stress prescribed, value[i, j]
                               is the target <S_ij> (often 0 = traction
                               free in that component).
    """

    strain_mask: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.strain_mask, dtype=bool)
        v = np.asarray(self.value, dtype=float)
        if m.shape != v.shape or m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigurationError(
                f"MacroBC needs square matching arrays, got {m.shape} and {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("MacroBC values must be finite")
        object.__setattr__(self, "strain_mask", m)
        object.__setattr__(self, "value", v)

    @property
    def dim(self) -> int:
        return self.strain_mask.shape[0]

    @classmethod
    def strain(cls, Fbar) -> "MacroBC":
        """Fully strain-controlled: <F> = Fbar."""
        Fbar = np.asarray(Fbar, dtype=float)
        return cls(np.ones_like(Fbar, dtype=bool), Fbar)

    @classmethod
    def stress(cls, Sbar) -> "MacroBC":
        """Fully stress-controlled: <S> = Sbar."""
        Sbar = np.asarray(Sbar, dtype=float)
        return cls(np.zeros_like(Sbar, dtype=bool), Sbar)

    @classmethod
    def mixed(cls, strain_entries: dict, stress_entries: dict, dim: int) -> "MacroBC":
        """Build from {(i, j): value} maps; every entry must appear once."""
        mask = np.zeros((dim, dim), dtype=bool)
        value = np.zeros((dim, dim), dtype=float)
        seen = set()
        for (i, j), v in strain_entries.items():
            mask[i, j] = True
            value[i, j] = v
            seen.add((i, j))
        for (i, j), v in stress_entries.items():
            if (i, j) in seen:
                raise ConfigurationError(f"component {(i, j)} controlled twice")
            value[i, j] = v
            seen.add((i, j))
        if len(seen) != dim * dim:
            missing = [(i, j) for i in range(dim) for j in range(dim) if (i, j) not in seen]
            raise ConfigurationError(f"MacroBC leaves components uncontrolled: {missing}")
        return cls(mask, value)


@dataclass(frozen=True)
class ProjectionResult:
    """Displacement split into mean gradient and periodic fluctuation.

    u_mean : (dim, dim) mean deformation gradient <grad u>
    u_tilde : (*shape, dim) zero-mean periodic fluctuation displacement
    grad_u : (*shape, dim, dim) total gradient, u_mean + grad(u_tilde)
    """

    u_mean: np.ndarray
    u_tilde: np.ndarray
    grad_u: np.ndarray


def macro_gradient(bc: MacroBC, F_mean: np.ndarray, lam_mean: np.ndarray,
                   rho: float) -> np.ndarray:
    """Mean of grad u under the given macroscopic control."""
    stress_update = F_mean - (lam_mean - bc.value) / rho
    return np.where(bc.strain_mask, bc.value, stress_update)


def helmholtz_project(grid: Grid, F: np.ndarray, lam: np.ndarray, rho: float,
                      bc: MacroBC, freqs: FrequencySet | None = None) -> ProjectionResult:
    """Project (F, lam) to the best-matching compatible gradient.

    Parameters
    ----------
    grid, F, lam : periodic grid and two-tensor fields on it.
    rho : positive penalty factor.
    bc : macroscopic control of the zero-frequency component.
    freqs : optional precomputed half-spectrum FrequencySet (hot paths).
    """
    if not (rho > 0.0) or not np.isfinite(rho):
        raise ParameterError(f"rho must be positive and finite, got {rho}")
    grid.check_field(F, 2, "F")
    grid.check_field(lam, 2, "lam")
    if bc.dim != grid.dim:
        raise ConfigurationError(f"MacroBC dim {bc.dim} does not match grid dim {grid.dim}")
    if freqs is None or not freqs.real_axis:
        freqs = modified_symbols(grid, real=True)

    T = F - lam / rho
    That = forward_rfft(grid, T)

    denom = freqs.grad_sq
    live = denom > 1e-14 * denom.max()  # excludes xi=0 and pure-Nyquist nulls
    inv = np.where(live, 1.0 / np.where(live, denom, 1.0), 0.0)

    # u_hat_i = - That_ij g_j / |g|^2
    uhat = -np.einsum("...ij,...j,...->...i", That, freqs.grad_sym, inv)
    # fluctuation gradient in spectral space: (grad u~)_ij = u_hat_i g_j
    ghat = uhat[..., :, None] * freqs.grad_sym[..., None, :]

    u_tilde = inverse_rfft(grid, uhat)
    grad_fluct = inverse_rfft(grid, ghat)

    u_mean = macro_gradient(bc, mean_field(grid, F), mean_field(grid, lam), rho)
    return ProjectionResult(u_mean=u_mean, u_tilde=u_tilde, grad_u=grad_fluct + u_mean)
