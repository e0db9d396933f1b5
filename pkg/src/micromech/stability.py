"""Bloch-wave stability analysis of converged periodic states.

A converged state on the unit cell is stable against perturbations
periodic on a (k_1 x ... x k_d)-supercell iff the smallest eigenvalue
beta of the Hermitian acoustic operator is nonnegative for the Bloch
vector omega_j = pi / (L k_j):

    (A p)_i = B*_j L_ijkl B_l p_k,     B_j = d_j + i omega_j,

acting on cell-periodic complex vector fields p with the volume-mean
norm; L is the incremental tangent field at the converged state. The
shifted gradient B uses continuous symbols i (omega_j + xi_j), so
homogeneous moduli are reproduced exactly at any resolution.

beta is found by the same splitting pattern as the solver: with the
constraint G = Bp, step 1 is a pointwise (L + rho I)^-1 apply, step 2
projects onto the Bloch-gradient subspace subject to |p| = 1 (a scalar
secular equation for the multiplier of the sphere constraint; its fixed
points are exact eigenpairs of A), and step 3 is multiplier ascent.

For k_j = 1 on every axis the frequency xi = -omega makes B vanish:
that coefficient is the rigid translation and carries no energy, so it
is excluded from the eigenproblem (the secular step returns it as 0).
Frequencies with any component in the outer quarter of the band are
excluded as well; see bloch_symbols for why the collocated form is not
trustworthy there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ParameterError
from .grid import Grid, forward_transform, inverse_transform, modified_symbols

__all__ = [
    "BlochResult",
    "tangent_field",
    "bloch_symbols",
    "bloch_min_eigen",
    "stability_sweep",
    "first_unstable",
    "mode_to_perturbation",
]


@dataclass
class BlochResult:
    """Smallest Bloch eigenvalue for one supercell multiplicity."""

    k: tuple
    omega: np.ndarray
    beta: float
    p: np.ndarray          # complex mode, grid.shape + (d,), unit mean-norm
    iterations: int
    converged: bool


def tangent_field(grid: Grid, model, state) -> np.ndarray:
    """Incremental moduli at the converged state, (npts, d, d, d, d).

    Verifies major symmetry, which the Hermitian eigenproblem requires.
    """
    if not getattr(model, "has_tangent", False):
        raise ParameterError(
            f"model '{model.name}' provides no incremental tangent")
    d = grid.dim
    npts = grid.npoints
    L = model.tangent(state.F.reshape(npts, d, d), state.internal)
    sym_err = np.abs(L - np.transpose(L, (0, 3, 4, 1, 2))).max()
    scale = np.abs(L).max()
    if sym_err > 1e-8 * max(scale, 1e-300):
        raise ParameterError(
            f"tangent field lacks major symmetry (error {sym_err:.3e})")
    return L


BAND_FRACTION = 0.75


def bloch_symbols(grid: Grid, k) -> tuple:
    """Continuous shifted symbols for multiplicity k.

    Returns (omega, b, bsq, live): the Bloch vector, the symbol field
    b_j = i (omega_j + xi_j) on the full spectrum, |b|^2, and the mask
    of admissible frequencies. The mask excludes the translation (when
    all k_j = 1) and every frequency with a component beyond
    BAND_FRACTION of the band edge.

    The outer band is cut for the same reason the projection masks the
    Nyquist plane: collocation aliases products there. Two non-collinear
    modes near opposite band corners differ by almost a full reciprocal
    vector, so on the grid they couple through the low-frequency content
    of the tangent field as if they were neighbours. Once the tangent
    loses pointwise convexity somewhere (routine under finite
    compression), that coupling manufactures grid-localized eigenvalues
    of order -|min curvature| (pi/h)^2 that no refinement removes,
    while every rank-one direction stays strongly elliptic. Removing
    the corner carriers eliminates these spurious modes and leaves
    smooth eigenbranches bit-identical.
    """
    k = tuple(int(x) for x in np.atleast_1d(k))
    if len(k) != grid.dim or any(x < 1 for x in k):
        raise ParameterError(f"multiplicity {k} invalid for dim {grid.dim}")
    L = grid.length
    omega = np.pi / (L * np.asarray(k, dtype=float))
    freqs = modified_symbols(grid)
    shifted = freqs.xi + omega
    b = 1j * shifted
    bsq = np.sum(shifted * shifted, axis=-1)
    edge = np.pi / grid.h
    band = np.all(np.abs(freqs.xi) <= (BAND_FRACTION + 1e-12) * edge,
                  axis=-1)
    live = (bsq > 1e-14 * bsq.max()) & band
    return omega, b, bsq, live


def _sphere_project(num, rho_bsq, live, target):
    """Solve the sphere-constrained quadratic projection.

    Minimizing rho/2 |b phat - chat|^2 subject to sum |phat|^2 = target
    gives (rho|b|^2 - eta) phat = num with the scalar eta fixed by the
    constraint; psi(eta) = sum |num / (rho|b|^2 - eta)|^2 is increasing
    on eta < min rho|b|^2, solved by bisection. In the hard case (no
    numerator weight at the smallest pole) the deficit is placed there
    explicitly.
    """
    w2 = np.sum(np.abs(num) ** 2, axis=-1)
    pole = np.where(live, rho_bsq, np.inf)
    pole_min = float(pole.min())
    span = max(pole_min if np.isfinite(pole_min) else 1.0, 1.0)
    hi = pole_min - 1e-13 * span

    def psi(eta):
        denom = rho_bsq - eta
        return float(np.sum(np.where(live, w2 / denom**2, 0.0)))

    if psi(hi) < target:
        # hard case: numerator vanishes at the limiting pole
        eta = hi
        denom = rho_bsq - eta
        phat = np.where(live[..., None], num / denom[..., None], 0.0)
        deficit = target - float(np.sum(np.abs(phat) ** 2))
        if deficit > 0.0:
            at = np.unravel_index(np.argmin(pole), pole.shape)
            phat[at + (0,)] += np.sqrt(deficit)
        return phat, eta

    lo = hi - span
    while psi(lo) > target:
        lo -= 2.0 * (hi - lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if psi(mid) > target:
            hi = mid
        else:
            lo = mid
    eta = 0.5 * (lo + hi)
    denom = rho_bsq - eta
    phat = np.where(live[..., None], num / denom[..., None], 0.0)
    # the secular equation conditions badly as eta nears a pole; rescaling
    # restores the constraint exactly without changing the direction
    phat *= np.sqrt(target / np.sum(np.abs(phat) ** 2))
    return phat, eta


def bloch_min_eigen(grid: Grid, Lfield: np.ndarray, k, mu_rep: float,
                    rho: float | None = None, seed: int = 0,
                    tol_beta: float = 1e-10, tol_primal: float = 1e-8,
                    max_iter: int = 20000,
                    p0: np.ndarray | None = None) -> BlochResult:
    """Smallest eigenvalue of the Bloch acoustic operator at multiplicity k.

    Lfield is the (npts, d, d, d, d) tangent field; mu_rep sets the
    residual scale. The penalty defaults to the spectral spread of the
    pointwise tangent blocks, lambda_max + |lambda_min|_-. For uniform
    curvature lambda the per-mode error map contracts iff rho >= lambda
    (below that, modes with symbols between the minimum and lambda/rho
    times the minimum feed an infeasible multiplier drift), and larger
    rho only slows the dual update, so the spread is the usual floor.
    Deep instabilities can still outrun it (the contraction also needs
    rho |omega|^2 to be comparable with |beta|), so when no penalty was
    requested and the iterates blow past the rigorous Rayleigh bound
    lambda_min max|b|^2 the solve restarts with the penalty scaled up
    fourfold. An explicit rho is honored as given.
    """
    d = grid.dim
    npts = grid.npoints
    Lmat = Lfield.reshape(npts, d * d, d * d)
    spec = np.linalg.eigvalsh(Lmat)
    lam_min = float(spec.min())
    lam_max = float(spec.max())
    user_rho = rho is not None
    if rho is None:
        rho = lam_max + max(0.0, -lam_min)
        if rho <= 0.0:
            rho = mu_rep
    elif rho <= -lam_min:
        raise ParameterError(
            f"penalty {rho} does not dominate the tangent spectrum "
            f"(lambda_min = {lam_min:.3e})")

    omega, b, bsq, live = bloch_symbols(grid, k)
    target = float(npts) ** 2  # Parseval image of unit mean-square norm
    # any feasible Rayleigh quotient sits above this; crossing it (with
    # margin) or going non-finite means the splitting diverged
    floor = min(0.0, lam_min) * float(bsq[live].max())

    if p0 is not None:
        grid.check_field(p0, 1, "p0")

    beta = np.inf
    iters = 0
    converged = False
    for _attempt in range(4):
        Minv = np.linalg.inv(Lmat + rho * np.eye(d * d))
        rho_bsq = rho * bsq

        if p0 is not None:
            p = np.asarray(p0, dtype=complex)
        else:
            rng = np.random.default_rng(seed)
            p = np.full(grid.shape + (d,), 1.0 / np.sqrt(d), dtype=complex)
            p += 1e-3 * (rng.standard_normal(p.shape)
                         + 1j * rng.standard_normal(p.shape))
        phat = forward_transform(grid, p)
        phat[~live] = 0.0
        norm0 = float(np.sum(np.abs(phat) ** 2))
        if norm0 <= 0.0:
            raise ParameterError("starting mode has no live Bloch content")
        phat *= np.sqrt(target / norm0)

        g = np.zeros(grid.shape + (d, d), dtype=complex)
        beta_prev = np.inf
        beta = np.inf
        diverged = False
        converged = False
        # overflow en route to the divergence check is expected; the
        # non-finite iterates are caught, not propagated
        with np.errstate(over="ignore", invalid="ignore"):
            for iters in range(1, max_iter + 1):
                # step 1: pointwise (L + rho I)^{-1} applied to g + rho Bp
                Gp = inverse_transform(grid,
                                       phat[..., :, None] * b[..., None, :])
                rhs = (g + rho * Gp).reshape(npts, d * d)
                G = np.einsum("pab,pb->pa", Minv,
                              rhs).reshape(grid.shape + (d, d))

                # step 2: sphere-constrained projection onto Bloch
                # gradients
                Chat = forward_transform(grid, rho * G - g)
                num = np.einsum("...ij,...j->...i", Chat, np.conj(b))
                phat, _ = _sphere_project(num, rho_bsq, live, target)

                # Rayleigh quotient and multiplier ascent
                Gp = inverse_transform(grid,
                                       phat[..., :, None] * b[..., None, :])
                Gpf = Gp.reshape(npts, d * d)
                beta = float(np.real(np.sum(
                    np.conj(Gpf)
                    * np.einsum("pab,pb->pa", Lmat, Gpf))) / npts)
                g += rho * (Gp - G)

                primal = np.sqrt(float(np.sum(np.abs(Gp - G) ** 2))
                                 / npts)
                if (not np.isfinite(beta) or not np.isfinite(primal)
                        or beta < 4.0 * floor - mu_rep):
                    diverged = True
                    break
                dbeta = abs(beta - beta_prev) / max(abs(beta),
                                                    mu_rep * 1e-12)
                beta_prev = beta
                if (dbeta < tol_beta
                        and primal < tol_primal * max(1.0, abs(beta))):
                    converged = True
                    break

        if not diverged or user_rho:
            break
        rho *= 4.0

    return BlochResult(k=tuple(int(x) for x in np.atleast_1d(k)),
                       omega=omega, beta=beta,
                       p=inverse_transform(grid, phat), iterations=iters,
                       converged=converged)


def stability_sweep(grid: Grid, model, state, k_max: int = 4,
                    seed: int = 0, p0_map: dict | None = None,
                    **kwargs) -> list[BlochResult]:
    """Bloch spectrum over all multiplicities 1 <= k_j <= k_max.

    Returns one result per multiplicity tuple, lexicographic order.
    ``p0_map`` optionally supplies a starting mode per multiplicity
    (e.g. the converged modes of a nearby load step).
    """
    if k_max < 1:
        raise ParameterError("k_max must be at least 1")
    Lfield = tangent_field(grid, model, state)
    results = []
    for flat in np.ndindex(*(k_max,) * grid.dim):
        k = tuple(x + 1 for x in flat)
        p0 = p0_map.get(k) if p0_map else None
        results.append(bloch_min_eigen(grid, Lfield, k, model.mu_rep,
                                       seed=seed, p0=p0, **kwargs))
    return results


def first_unstable(results: list[BlochResult], mu_rep: float,
                   tol: float = 1e-8):
    """The lowest-|k| multiplicity with a negative eigenvalue, or None."""
    bad = [r for r in results if r.beta < -tol * mu_rep]
    if not bad:
        return None
    return min(bad, key=lambda r: (float(np.sum(np.square(r.k))), r.k))


def mode_to_perturbation(grid: Grid, result: BlochResult,
                         amplitude: float) -> np.ndarray:
    """Real displacement field of the Bloch mode on its supercell.

    Tiles the cell-periodic amplitude p over the (k_1 x ... x k_d)
    supercell, multiplies by the plane-wave carrier and takes the real
    part; scaled so the largest pointwise magnitude is amplitude times
    the cell edge length. The supercell keeps the cell spacing, so for
    equal k_j the axes match ``grid.supercell(k)``.
    """
    k = result.k
    p_t = np.tile(result.p, tuple(k) + (1,))
    axes = [-grid.length * kj + grid.h * np.arange(grid.n * kj) for kj in k]
    x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    phase = np.exp(1j * np.einsum("...j,j->...", x, result.omega))
    v = np.real(p_t * phase[..., None])
    peak = np.abs(v).max()
    if peak > 0:
        v *= amplitude * (2.0 * grid.length) / peak
    return v
