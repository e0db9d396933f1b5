"""Quadratic reference material, W = c/2 |F|^2 with per-point stiffness c.

Not a physical solid (no frame indifference, no det constraint); it exists
because every piece of the splitting scheme has a closed form against it:
the local step has the exact solution F = (lam + rho*grad_u)/(c + rho),
the saddle point of the discretized augmented Lagrangian is a dense linear
solve, and the tangent is constant. Used by tests and benchmarks.
"""

from __future__ import annotations

import numpy as np

from .base import LocalStats, MaterialModel, descent_sweeps_numpy

__all__ = ["QuadraticMaterial"]


class QuadraticMaterial(MaterialModel):
    name = "quadratic"
    has_tangent = True

    def __init__(self, c, dim: int = 2, mu_rep: float | None = None):
        self.dim = int(dim)
        self.c = np.asarray(c, dtype=float)
        if np.any(self.c <= 0):
            from ..errors import ParameterError
            raise ParameterError("QuadraticMaterial needs c > 0")
        self.mu_rep = float(mu_rep) if mu_rep is not None else float(np.max(self.c))

    def energy(self, F, internal=None):
        return 0.5 * self.c * np.sum(F * F, axis=(-2, -1))

    def stress(self, F, internal=None):
        c = self.c[..., None, None] if self.c.ndim else self.c
        return c * F

    def tangent(self, F, internal=None):
        d = self.dim
        lead = F.shape[:-2]
        eye = np.eye(d)
        Lt = np.einsum("ik,jl->ijkl", eye, eye)
        c = np.broadcast_to(self.c, lead)
        return c[..., None, None, None, None] * Lt

    def local_sweeps(self, F, internal, grad_u, lam, rho, dt, prev_F,
                     prev_internal, frozen, max_sweeps, point_tol) -> LocalStats:
        npts = F.shape[0]
        d = self.dim
        c = np.ascontiguousarray(np.broadcast_to(self.c, (npts,)), dtype=float)
        G = grad_u.reshape(npts, -1)
        L = lam.reshape(npts, -1)
        tol = point_tol * self.mu_rep

        def obj(X, idx):
            return 0.5 * c[idx] * np.sum(X * X, axis=1) \
                - np.sum(L[idx] * X, axis=1) \
                + 0.5 * rho * np.sum((G[idx] - X) ** 2, axis=1)

        def grd(X, idx):
            return c[idx, None] * X - L[idx] - rho * (G[idx] - X)

        X = F.reshape(npts, -1).copy()
        res, sweeps = descent_sweeps_numpy(obj, grd, X, tol, max_sweeps,
                                           t0=1.0 / (rho + c),
                                           phi_scale=float(np.max(c)))
        F[...] = X.reshape(npts, d, d)
        frac = float(np.mean(res < tol)) if npts else 1.0
        return LocalStats(res_pts=res, sweeps=sweeps, converged_frac=frac)
