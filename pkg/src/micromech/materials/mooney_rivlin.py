"""Compressible Mooney-Rivlin solid in the invariants of C = F^T F.

    W(F) = mu/2 * (I1 - ln I2 - dim) + kappa/2 * (sqrt(I2) - 1)^2,
    I1 = tr C = |F|^2,   I2 = det C = J^2,   J = det F > 0.

The trace constant equals the dimension so that F = I is stress-free in
both 2D (plane strain, the reference case) and 3D. Closed forms:

    S = dW/dF = mu (F - F^{-T}) + kappa (J - 1) cof F,
    dS/dF_ijkl = mu d_ik d_jl + kappa (2J - 1) J F^{-T}_ij F^{-T}_kl
                 + [mu - kappa (J^2 - J)] F^{-1}_jk F^{-1}_li.

Moduli may vary per point (two-phase composites): `mu`/`kappa` broadcast
against the field's point axis. Linearization at F = I gives isotropic
moduli with shear mu and Lame lambda kappa.

The ADMM-step-1 solver is a compiled per-point steepest-descent with
Armijo backtracking, initial step set by the inverse local curvature;
the 2D path is the hot kernel, 3D falls back to the vectorized numpy
descent.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .base import (
    BACKTRACK_DECREASE,
    BACKTRACK_SHRINK,
    MEAS_EPS,
    LocalStats,
    MaterialModel,
    descent_sweeps_numpy,
)

__all__ = ["MooneyRivlin"]


# =========================================================================
# vectorized closed forms (any leading shape)
# =========================================================================

def _det(F):
    return np.linalg.det(F)


def _inv(F):
    return np.linalg.inv(F)


class MooneyRivlin(MaterialModel):
    name = "mooney_rivlin"
    has_tangent = True

    def __init__(self, mu, kappa, dim: int = 2, mu_rep: float | None = None):
        self.dim = int(dim)
        self.mu = np.asarray(mu, dtype=float)
        self.kappa = np.asarray(kappa, dtype=float)
        if np.any(self.mu <= 0) or np.any(self.kappa < 0):
            from ..errors import ParameterError
            raise ParameterError("MooneyRivlin needs mu > 0 and kappa >= 0")
        self.mu_rep = float(mu_rep) if mu_rep is not None else float(np.max(self.mu))

    # -- energy / stress / tangent ----------------------------------------

    def energy(self, F, internal=None):
        J = _det(F)
        self._check_det(J)
        I1 = np.sum(F * F, axis=(-2, -1))
        return 0.5 * self.mu * (I1 - 2.0 * np.log(J) - self.dim) \
            + 0.5 * self.kappa * (J - 1.0) ** 2

    def stress(self, F, internal=None):
        J = _det(F)
        self._check_det(J)
        FinvT = np.swapaxes(_inv(F), -2, -1)
        mu = self.mu[..., None, None] if self.mu.ndim else self.mu
        kap = self.kappa[..., None, None] if self.kappa.ndim else self.kappa
        Jc = J[..., None, None]
        return mu * (F - FinvT) + kap * (Jc * Jc - Jc) * FinvT

    def tangent(self, F, internal=None):
        J = _det(F)
        self._check_det(J)
        Finv = _inv(F)
        FinvT = np.swapaxes(Finv, -2, -1)
        d = self.dim
        lead = F.shape[:-2]
        eye = np.eye(d)
        mu = np.broadcast_to(self.mu, lead)
        kap = np.broadcast_to(self.kappa, lead)
        L = np.zeros(lead + (d, d, d, d))
        L += mu[..., None, None, None, None] * np.einsum("ik,jl->ijkl", eye, eye)
        c1 = kap * (2.0 * J - 1.0) * J
        L += c1[..., None, None, None, None] * np.einsum("...ij,...kl->...ijkl", FinvT, FinvT)
        c2 = mu - kap * (J * J - J)
        L += c2[..., None, None, None, None] * np.einsum("...jk,...li->...ijkl", Finv, Finv)
        return L

    # -- local solver ------------------------------------------------------

    def _flat_moduli(self, npts):
        mu = np.ascontiguousarray(np.broadcast_to(self.mu, (npts,)), dtype=float)
        kap = np.ascontiguousarray(np.broadcast_to(self.kappa, (npts,)), dtype=float)
        return mu, kap

    def local_sweeps(self, F, internal, grad_u, lam, rho, dt, prev_F,
                     prev_internal, frozen, max_sweeps, point_tol) -> LocalStats:
        npts = F.shape[0]
        mu, kap = self._flat_moduli(npts)
        tol = point_tol * self.mu_rep
        if self.dim == 2:
            res = np.empty(npts)
            nsw = np.zeros(npts, dtype=np.int64)
            phi_scale = float(np.max(mu) + np.max(kap))
            _mr_sweeps_2d(F, grad_u, lam, mu, kap, float(rho), tol,
                          int(max_sweeps), phi_scale, res, nsw)
            sweeps = int(nsw.max()) if npts else 0
        else:
            res, sweeps = self._sweeps_numpy(F, grad_u, lam, mu, kap, rho,
                                             tol, max_sweeps)
        frac = float(np.mean(res < tol)) if npts else 1.0
        return LocalStats(res_pts=res, sweeps=sweeps, converged_frac=frac)

    def _sweeps_numpy(self, F, grad_u, lam, mu, kap, rho, tol, max_sweeps):
        d = self.dim
        npts = F.shape[0]
        G = grad_u.reshape(npts, -1)
        L = lam.reshape(npts, -1)

        def obj(X, idx):
            Fl = X.reshape(-1, d, d)
            J = np.linalg.det(Fl)
            bad = J <= 0
            Js = np.where(bad, 1.0, J)
            I1 = np.sum(Fl * Fl, axis=(-2, -1))
            W = 0.5 * mu[idx] * (I1 - 2.0 * np.log(Js) - d) \
                + 0.5 * kap[idx] * (Js - 1.0) ** 2
            coupling = -np.sum(L[idx] * X, axis=1) \
                + 0.5 * rho * np.sum((G[idx] - X) ** 2, axis=1)
            return np.where(bad, np.inf, W + coupling)

        def grd(X, idx):
            Fl = X.reshape(-1, d, d)
            J = np.linalg.det(Fl)
            self._check_det(J)
            FinvT = np.swapaxes(np.linalg.inv(Fl), -2, -1)
            S = mu[idx, None, None] * (Fl - FinvT) \
                + (kap[idx] * (J * J - J))[:, None, None] * FinvT
            return S.reshape(-1, d * d) - L[idx] - rho * (G[idx] - X)

        def adm(X):
            return np.linalg.det(X.reshape(-1, d, d)) > 0

        X = F.reshape(npts, -1).copy()
        # initial step ~ inverse local curvature: Hessian scale rho + mu + O(kappa)
        res, sweeps = descent_sweeps_numpy(
            obj, grd, X, tol, max_sweeps, t0=1.0 / (rho + mu + 4.0 * kap),
            admissible=adm, phi_scale=float(np.max(mu) + np.max(kap)))
        F[...] = X.reshape(npts, d, d)
        return res, sweeps


# =========================================================================
# compiled 2D kernel
# =========================================================================

@njit(parallel=True, cache=True)
def _mr_sweeps_2d(F, G, Lam, mu, kap, rho, tol, max_sweeps, phi_scale,
                  res_out, nsw_out):
    npts = F.shape[0]
    for p in prange(npts):
        a = F[p, 0, 0]; b = F[p, 0, 1]; c = F[p, 1, 0]; d = F[p, 1, 1]
        g00 = G[p, 0, 0]; g01 = G[p, 0, 1]; g10 = G[p, 1, 0]; g11 = G[p, 1, 1]
        l00 = Lam[p, 0, 0]; l01 = Lam[p, 0, 1]; l10 = Lam[p, 1, 0]; l11 = Lam[p, 1, 1]
        m = mu[p]; k = kap[p]
        # initial step ~ inverse local curvature, so short metered calls
        # progress even when the material stiffness dominates the penalty
        t = 1.0 / (rho + m + 4.0 * k)
        tmax_p = 16.0 * t
        free = False  # True once Armijo decrements fall below rounding
        res_prev = 1e300
        nsw = 0
        res = 0.0
        for _ in range(max_sweeps + 1):
            J = a * d - b * c
            iJ = 1.0 / J
            jm1 = J - 1.0
            # S = m (F - cof/J) + k (J-1) cof, cof = [[d, -c], [-b, a]]
            s00 = m * (a - d * iJ) + k * jm1 * d
            s01 = m * (b + c * iJ) - k * jm1 * c
            s10 = m * (c + b * iJ) - k * jm1 * b
            s11 = m * (d - a * iJ) + k * jm1 * a
            r00 = s00 - l00 - rho * (g00 - a)
            r01 = s01 - l01 - rho * (g01 - b)
            r10 = s10 - l10 - rho * (g10 - c)
            r11 = s11 - l11 - rho * (g11 - d)
            gsq = r00 * r00 + r01 * r01 + r10 * r10 + r11 * r11
            res = np.sqrt(gsq)
            if free:
                if res > res_prev:
                    t *= BACKTRACK_SHRINK
                else:
                    t = min(t * 1.3, tmax_p)
                res_prev = res
            if res < tol or nsw >= max_sweeps:
                break
            nsw += 1
            did_step = False
            if not free:
                W = 0.5 * m * (a * a + b * b + c * c + d * d
                               - 2.0 * np.log(J) - 2.0) + 0.5 * k * jm1 * jm1
                phi0 = W - (l00 * a + l01 * b + l10 * c + l11 * d) \
                    + 0.5 * rho * ((g00 - a) ** 2 + (g01 - b) ** 2
                                   + (g10 - c) ** 2 + (g11 - d) ** 2)
                if BACKTRACK_DECREASE * t * gsq <= MEAS_EPS * (abs(phi0) + phi_scale):
                    free = True
                    res_prev = res
                else:
                    t_in = t
                    for _bt in range(60):
                        a2 = a - t * r00; b2 = b - t * r01
                        c2 = c - t * r10; d2 = d - t * r11
                        J2 = a2 * d2 - b2 * c2
                        if J2 > 1e-12:
                            jm2 = J2 - 1.0
                            W2 = 0.5 * m * (a2 * a2 + b2 * b2 + c2 * c2 + d2 * d2
                                            - 2.0 * np.log(J2) - 2.0) + 0.5 * k * jm2 * jm2
                            phi2 = W2 - (l00 * a2 + l01 * b2 + l10 * c2 + l11 * d2) \
                                + 0.5 * rho * ((g00 - a2) ** 2 + (g01 - b2) ** 2
                                               + (g10 - c2) ** 2 + (g11 - d2) ** 2)
                            if phi2 <= phi0 - BACKTRACK_DECREASE * t * gsq:
                                a = a2; b = b2; c = c2; d = d2
                                did_step = True
                                break
                        t *= BACKTRACK_SHRINK
                    if did_step:
                        t = min(t * 1.6, tmax_p)
                    else:
                        free = True
                        t = t_in
                        res_prev = res
            if free and not did_step:
                # terminal phase: plain gradient step, det guard only
                for _bt in range(12):
                    a2 = a - t * r00; b2 = b - t * r01
                    c2 = c - t * r10; d2 = d - t * r11
                    if a2 * d2 - b2 * c2 > 1e-12:
                        a = a2; b = b2; c = c2; d = d2
                        break
                    t *= BACKTRACK_SHRINK
        F[p, 0, 0] = a; F[p, 0, 1] = b; F[p, 1, 0] = c; F[p, 1, 1] = d
        res_out[p] = res
        nsw_out[p] = nsw
