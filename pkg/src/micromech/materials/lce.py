"""Incompressible nematic liquid crystal elastomer.

Pointwise energy in the deformation gradient F and the unit director n,
with the imprinted director n0 as material data:

    W_el = mu/2 * tr(F^T l(n)^{-1} F),    l(n) = r^{-1/d} (I + (r-1) n (x) n),
    W_ni = mu a/2 * tr((I - n0 (x) n0) F^T (n (x) n) F),

so W_el = mu/2 r^{1/d} (|F|^2 - (r-1)/r |F^T n|^2) and
W_ni = mu a/2 (|F^T n|^2 - ((F^T n).n0)^2). The step-length tensor l is
unimodular and elongates by r^{1/d} along n; its printed sign variant
with "-(r-1)" is indefinite for r > 1 and is not used. Frank elasticity
is the one-constant form W_F = kappa |grad n|^2 with the central
difference gradient; its derivative 2 kappa (D^T D) n is frozen over
each outer iteration and enters the local objective linearly.

Constraints: det F = 1 through a per-point multiplier driven by a
nested augmented-Lagrangian update, |det F - 1| <= det_tol at
convergence; |n| = 1 exactly, the director being stored as one angle in
2D and as spherical angles on a per-point chart in 3D (the chart is
rebuilt whenever sin(phi) drops below 0.1, keeping the azimuthal
direction well conditioned).

Time stepping adds the incremental viscous work
nu_F/(2 dt) |F - F_k|^2 + nu_n/(2 dt) |n - n_k|^2 against the fields of
the previous accepted step.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from ..errors import ParameterError
from ..grid import discrete_grad, forward_rfft, inverse_rfft, modified_symbols
from .base import (
    BACKTRACK_DECREASE,
    BACKTRACK_SHRINK,
    MEAS_EPS,
    LocalStats,
    MaterialModel,
)

__all__ = ["LiquidCrystalElastomer", "step_length_tensor", "step_length_sqrt"]


def step_length_tensor(n, r):
    """l(n) = r^{-1/d} (I + (r-1) n (x) n); unimodular for unit n."""
    n = np.asarray(n, dtype=float)
    d = n.shape[-1]
    eye = np.eye(d)
    nn = n[..., :, None] * n[..., None, :]
    return r ** (-1.0 / d) * (eye + (r - 1.0) * nn)


def step_length_sqrt(n, r):
    """Principal square root of the step-length tensor."""
    n = np.asarray(n, dtype=float)
    d = n.shape[-1]
    eye = np.eye(d)
    nn = n[..., :, None] * n[..., None, :]
    return r ** (-0.5 / d) * (eye + (np.sqrt(r) - 1.0) * nn)


def _unit_rows(v, what):
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1)
    if np.any(norms < 1e-12):
        raise ParameterError(f"{what} contains (near-)zero directors")
    return v / norms[..., None]


class LiquidCrystalElastomer(MaterialModel):
    name = "lce"
    has_tangent = False
    has_dissipation = True

    def __init__(self, mu, r, alpha, frank_kappa, n0, dim: int = 2,
                 nu_F: float = 0.0, nu_n: float = 0.0,
                 gamma_inc: float | None = None, det_tol: float = 1e-8,
                 mu_rep: float | None = None):
        self.dim = int(dim)
        if self.dim not in (2, 3):
            raise ParameterError("dim must be 2 or 3")
        self.mu = float(mu)
        self.r = float(r)
        self.alpha = float(alpha)
        self.frank_kappa = float(frank_kappa)
        self.nu_F = float(nu_F)
        self.nu_n = float(nu_n)
        if self.mu <= 0 or self.r < 1.0 or self.alpha < 0 \
                or self.frank_kappa < 0 or self.nu_F < 0 or self.nu_n < 0:
            raise ParameterError(
                "LCE needs mu > 0, r >= 1, alpha >= 0, frank_kappa >= 0 "
                "and nonnegative viscosities")
        self.n0 = _unit_rows(np.atleast_2d(n0), "n0")
        if self.n0.shape[-1] != self.dim:
            raise ParameterError(
                f"n0 has {self.n0.shape[-1]} components, model is {self.dim}D")
        self.gamma_inc = float(gamma_inc) if gamma_inc is not None \
            else 50.0 * self.mu
        if self.gamma_inc <= 0:
            raise ParameterError("gamma_inc must be positive")
        self.det_tol = float(det_tol)
        self.mu_rep = float(mu_rep) if mu_rep is not None else self.mu
        self.internal_spec = {"angles": 1, "p_inc": 1} if self.dim == 2 \
            else {"angles": 2, "chart": 9, "p_inc": 1}
        self._frank_cache = None

    # -- director storage --------------------------------------------------

    def init_internal(self, npts: int, rng=None) -> dict:
        if self.n0.shape[0] != npts:
            raise ParameterError(
                f"n0 holds {self.n0.shape[0]} points, grid has {npts}")
        internal = {"p_inc": np.zeros(npts)}
        if self.dim == 2:
            internal["angles"] = np.arctan2(self.n0[:, 1], self.n0[:, 0])
        else:
            internal["angles"] = np.empty((npts, 2))
            internal["chart"] = np.empty((npts, 3, 3))
            _set_chart(internal["angles"], internal["chart"], self.n0,
                       np.arange(npts))
        return internal

    def director(self, internal) -> np.ndarray:
        """Unit directors reconstructed from the stored angles."""
        if self.dim == 2:
            th = internal["angles"]
            return np.stack([np.cos(th), np.sin(th)], axis=-1)
        ph, th = internal["angles"][:, 0], internal["angles"][:, 1]
        nloc = np.stack([np.sin(ph) * np.cos(th),
                         np.sin(ph) * np.sin(th), np.cos(ph)], axis=-1)
        return np.einsum("pij,pj->pi", internal["chart"], nloc)

    def set_director(self, internal, n):
        """Point the stored angles at the given unit directors."""
        n = _unit_rows(n, "director")
        if self.dim == 2:
            internal["angles"][...] = np.arctan2(n[:, 1], n[:, 0])
        else:
            _set_chart(internal["angles"], internal["chart"], n,
                       np.arange(n.shape[0]))

    # -- pointwise physics -------------------------------------------------

    def _terms(self, F, n):
        r1d = self.r ** (1.0 / self.dim)
        rr = (self.r - 1.0) / self.r
        Ftn = np.einsum("...ji,...j->...i", F, n)
        c = np.sum(Ftn * self.n0, axis=-1)
        return r1d, rr, Ftn, c

    def energy(self, F, internal=None, n=None):
        """W_el + W_ni per point (Frank energy is nonlocal, see
        frank_energy)."""
        if n is None:
            n = self.director(internal)
        r1d, rr, Ftn, c = self._terms(F, n)
        fsq = np.sum(F * F, axis=(-2, -1))
        tsq = np.sum(Ftn * Ftn, axis=-1)
        w_el = 0.5 * self.mu * r1d * (fsq - rr * tsq)
        w_ni = 0.5 * self.mu * self.alpha * (tsq - c * c)
        return w_el + w_ni

    def stress(self, F, internal=None, n=None):
        """d(W_el + W_ni)/dF, without the pressure reaction."""
        if n is None:
            n = self.director(internal)
        r1d, rr, Ftn, c = self._terms(F, n)
        n_out_Ftn = n[..., :, None] * Ftn[..., None, :]
        n_out_n0 = n[..., :, None] * self.n0[..., None, :]
        return self.mu * r1d * (F - rr * n_out_Ftn) \
            + self.mu * self.alpha * (n_out_Ftn - c[..., None, None] * n_out_n0)

    def dW_dn(self, F, internal=None, n=None):
        """Ambient derivative of W_el + W_ni in the director."""
        if n is None:
            n = self.director(internal)
        r1d, rr, Ftn, c = self._terms(F, n)
        h = np.einsum("...ij,...j->...i", F, Ftn)  # F F^T n
        Fn0 = np.einsum("...ij,...j->...i", F, self.n0)
        return -self.mu * r1d * rr * h \
            + self.mu * self.alpha * (h - c[..., None] * Fn0)

    def stress_total(self, F, internal, prev_F, prev_internal, dt):
        """Mechanical stress entering equilibrium: energy stress plus the
        incompressibility reaction plus viscous stress."""
        n = self.director(internal)
        J = np.linalg.det(F)
        cof = J[..., None, None] * np.swapaxes(np.linalg.inv(F), -2, -1)
        react = (internal["p_inc"] + self.gamma_inc * (J - 1.0))[..., None, None]
        S = self.stress(F, n=n) + react * cof
        if dt > 0.0 and self.nu_F > 0.0:
            S = S + (self.nu_F / dt) * (F - prev_F)
        return S

    def dissipation_density(self, dF, dinternal, dt):
        D = 0.5 * self.nu_F * np.sum(dF * dF, axis=(-2, -1))
        if dinternal and "n" in dinternal:
            D = D + 0.5 * self.nu_n * np.sum(dinternal["n"] ** 2, axis=-1)
        return D

    # -- Frank elasticity --------------------------------------------------

    def frank_energy(self, grid, internal=None, n_field=None) -> float:
        """kappa <|grad n|^2> with the central-difference gradient."""
        if n_field is None:
            n_field = self.director(internal).reshape(grid.shape + (self.dim,))
        gn = discrete_grad(grid, n_field)
        return self.frank_kappa * float(np.mean(np.sum(gn * gn, axis=(-2, -1))))

    def frank_force(self, grid, n_field) -> np.ndarray:
        """Variational derivative 2 kappa (D^T D) n of the Frank energy."""
        if self._frank_cache is None or self._frank_cache[0] is not grid:
            freqs = modified_symbols(grid, real=True)
            self._frank_cache = (grid, freqs.grad_sq)
        gsq = self._frank_cache[1]
        nhat = forward_rfft(grid, n_field)
        f = inverse_rfft(grid, gsq[..., None] * nhat)
        return 2.0 * self.frank_kappa * f

    def prepare_frozen(self, grid, F, internal) -> dict:
        n_field = self.director(internal).reshape(grid.shape + (self.dim,))
        if self.frank_kappa > 0.0:
            ff = self.frank_force(grid, n_field).reshape(-1, self.dim)
        else:
            ff = np.zeros((grid.npoints, self.dim))
        return {"frank_force": np.ascontiguousarray(ff)}

    # -- local solver ------------------------------------------------------

    def local_sweeps(self, F, internal, grad_u, lam, rho, dt, prev_F,
                     prev_internal, frozen, max_sweeps, point_tol) -> LocalStats:
        npts = F.shape[0]
        d = self.dim
        tol = point_tol * self.mu_rep
        ff = frozen.get("frank_force") if frozen else None
        if ff is None:
            ff = np.zeros((npts, d))
        if dt > 0.0 and (self.nu_F > 0.0 or self.nu_n > 0.0):
            if prev_F is None or prev_internal is None:
                raise ParameterError(
                    "viscous update needs the previous step (begin_time_step)")
            vis_F = self.nu_F / dt
            vis_n = self.nu_n / dt
            Fk = prev_F
            nk = self.director(prev_internal)
        else:
            vis_F = vis_n = 0.0
            Fk = np.zeros_like(F)
            nk = np.zeros((npts, d))
        r1d = self.r ** (1.0 / d)
        phiF_scale = self.mu * (r1d * (d + 1.0) + self.alpha * d) + self.gamma_inc
        phin_scale = self.mu * (r1d + self.alpha) * d * self.r ** (2.0 / d)
        res = np.empty(npts)
        nsw = np.zeros(npts, dtype=np.int64)
        ok = np.zeros(npts, dtype=np.bool_)
        if d == 2:
            _lce_sweeps_2d(F, internal["angles"], internal["p_inc"],
                           grad_u, lam, self.n0, ff, Fk, nk,
                           self.mu, r1d, (self.r - 1.0) / self.r, self.alpha,
                           self.gamma_inc, float(rho), vis_F, vis_n,
                           tol, self.det_tol, int(max_sweeps),
                           phiF_scale, phin_scale, res, nsw, ok)
        else:
            _lce_sweeps_3d(F, internal["angles"], internal["chart"],
                           internal["p_inc"], grad_u, lam, self.n0, ff, Fk, nk,
                           self.mu, r1d, (self.r - 1.0) / self.r, self.alpha,
                           self.gamma_inc, float(rho), vis_F, vis_n,
                           tol, self.det_tol, int(max_sweeps),
                           phiF_scale, phin_scale, res, nsw, ok)
        sweeps = int(nsw.max()) if npts else 0
        frac = float(np.mean(ok)) if npts else 1.0
        return LocalStats(res_pts=res, sweeps=sweeps, converged_frac=frac)


def _set_chart(angles, chart, n, idx):
    """Chart each director at its equator: e1 = n, phi = pi/2, theta = 0."""
    e1 = n[idx]
    helper = np.zeros_like(e1)
    helper[np.arange(len(idx)), np.argmin(np.abs(e1), axis=1)] = 1.0
    e3 = helper - np.sum(helper * e1, axis=1, keepdims=True) * e1
    e3 /= np.linalg.norm(e3, axis=1, keepdims=True)
    e2 = np.cross(e3, e1)
    chart[idx, :, 0] = e1
    chart[idx, :, 1] = e2
    chart[idx, :, 2] = e3
    angles[idx, 0] = 0.5 * np.pi
    angles[idx, 1] = 0.0


# =========================================================================
# compiled kernels
# =========================================================================
#
# Each point takes damped Newton steps on the joint variable (F, director
# angles); solving the blocks separately converges only linearly at the
# block-coupling rate, which is slow exactly where the director is strongly
# loaded. The Hessian carries the incompressibility penalty exactly, which
# is what makes the stiff gamma (J - 1)^2 term tractable. If the Newton
# system is indefinite the diagonal is inflated (Levenberg style) until the
# direction points downhill; every step is safeguarded by Armijo
# backtracking on the exact objective plus a positivity guard on det F, and
# once the predicted decrement drops below what is measurable in float
# arithmetic, steps are taken without a search. The multiplier takes a
# nested ascent step p += gamma (J - 1) whenever the stationarity residual
# is small relative to the constraint violation; a point counts as
# converged only with both the residual and |J - 1| inside tolerance.

NEWTON_BT = 60
DET_FLOOR = 1e-12


@njit(cache=True)
def _gauss_solve(A, b, x):
    """Solve A x = b in place (A and b are clobbered); returns False on
    a (near-)singular pivot."""
    m = A.shape[0]
    for col in range(m):
        piv = col
        best = abs(A[col, col])
        for r in range(col + 1, m):
            if abs(A[r, col]) > best:
                best = abs(A[r, col])
                piv = r
        if best < 1e-250:
            return False
        if piv != col:
            for c in range(m):
                tmp = A[col, c]
                A[col, c] = A[piv, c]
                A[piv, c] = tmp
            tmp = b[col]
            b[col] = b[piv]
            b[piv] = tmp
        inv = 1.0 / A[col, col]
        for r in range(col + 1, m):
            f = A[r, col] * inv
            if f != 0.0:
                for c in range(col, m):
                    A[r, c] -= f * A[col, c]
                b[r] -= f * b[col]
    for r in range(m - 1, -1, -1):
        s = b[r]
        for c in range(r + 1, m):
            s -= A[r, c] * x[c]
        x[r] = s / A[r, r]
    return True


@njit(cache=True)
def _phiF_2(a, bb, c, dd, n1, n2, m01, m02, mur, rr, mual, pp, gam,
            l00, l01, l10, l11, g00, g01, g10, g11, rho, visF,
            k00, k01, k10, k11):
    u1 = a * n1 + c * n2
    u2 = bb * n1 + dd * n2
    cc = u1 * m01 + u2 * m02
    dJ = a * dd - bb * c - 1.0
    return (0.5 * mur * (a * a + bb * bb + c * c + dd * dd)
            - 0.5 * mur * rr * (u1 * u1 + u2 * u2)
            + 0.5 * mual * (u1 * u1 + u2 * u2 - cc * cc)
            + pp * dJ + 0.5 * gam * dJ * dJ
            - (l00 * a + l01 * bb + l10 * c + l11 * dd)
            + 0.5 * rho * ((g00 - a) ** 2 + (g01 - bb) ** 2
                           + (g10 - c) ** 2 + (g11 - dd) ** 2)
            + 0.5 * visF * ((a - k00) ** 2 + (bb - k01) ** 2
                            + (c - k10) ** 2 + (dd - k11) ** 2))


@njit(parallel=True, cache=True)
def _lce_sweeps_2d(F, ang, p_inc, G, Lam, n0, ff, Fk, nk,
                   mu, r1d, rr, al, gam, rho, vis_F, vis_n,
                   tol, det_tol, max_sweeps, phiF_scale, phin_scale,
                   res_out, nsw_out, ok_out):
    npts = F.shape[0]
    mur = mu * r1d
    mual = mu * al
    q = mual - mur * rr
    scale = phiF_scale + phin_scale
    for p in prange(npts):
        f00 = F[p, 0, 0]; f01 = F[p, 0, 1]
        f10 = F[p, 1, 0]; f11 = F[p, 1, 1]
        th = ang[p]
        pp = p_inc[p]
        g00 = G[p, 0, 0]; g01 = G[p, 0, 1]; g10 = G[p, 1, 0]; g11 = G[p, 1, 1]
        l00 = Lam[p, 0, 0]; l01 = Lam[p, 0, 1]
        l10 = Lam[p, 1, 0]; l11 = Lam[p, 1, 1]
        m01 = n0[p, 0]; m02 = n0[p, 1]
        ff1 = ff[p, 0]; ff2 = ff[p, 1]
        k00 = Fk[p, 0, 0]; k01 = Fk[p, 0, 1]; k10 = Fk[p, 1, 0]; k11 = Fk[p, 1, 1]
        nk1 = nk[p, 0]; nk2 = nk[p, 1]

        H = np.empty((5, 5))
        A = np.empty((5, 5))
        rhs = np.empty(5)
        bw = np.empty(5)
        d = np.empty(5)
        wv = np.empty(4)
        cv = np.empty(4)

        fsq0 = f00 * f00 + f01 * f01 + f10 * f10 + f11 * f11
        tF0 = 1.0 / (rho + 2.0 * mur + 2.0 * mual + 2.0 * gam + vis_F)
        tN0 = 1.0 / (mu * (2.0 * r1d + 2.0 * al) * max(fsq0, 1.0) + vis_n + 1e-30)
        base = mur + rho + vis_F
        nsw = 0
        res = 0.0
        converged = False

        for _ in range(max_sweeps + 1):
            # ---- shared quantities and the joint residual
            n1 = np.cos(th); n2 = np.sin(th)
            u1 = f00 * n1 + f10 * n2   # F^T n
            u2 = f01 * n1 + f11 * n2
            cc = u1 * m01 + u2 * m02
            v1 = f00 * m01 + f01 * m02  # F n0
            v2 = f10 * m01 + f11 * m02
            h1 = f00 * u1 + f01 * u2    # F F^T n
            h2 = f10 * u1 + f11 * u2
            J = f00 * f11 - f01 * f10
            dJ = J - 1.0
            pr = pp + gam * dJ
            rF00 = mur * f00 + q * n1 * u1 - mual * cc * n1 * m01 + pr * f11 \
                - l00 - rho * (g00 - f00) + vis_F * (f00 - k00)
            rF01 = mur * f01 + q * n1 * u2 - mual * cc * n1 * m02 - pr * f10 \
                - l01 - rho * (g01 - f01) + vis_F * (f01 - k01)
            rF10 = mur * f10 + q * n2 * u1 - mual * cc * n2 * m01 - pr * f01 \
                - l10 - rho * (g10 - f10) + vis_F * (f10 - k10)
            rF11 = mur * f11 + q * n2 * u2 - mual * cc * n2 * m02 + pr * f00 \
                - l11 - rho * (g11 - f11) + vis_F * (f11 - k11)
            gF2 = rF00 * rF00 + rF01 * rF01 + rF10 * rF10 + rF11 * rF11
            gn1 = q * h1 - mual * cc * v1 + ff1 + vis_n * (n1 - nk1)
            gn2 = q * h2 - mual * cc * v2 + ff2 + vis_n * (n2 - nk2)
            gth = -gn1 * n2 + gn2 * n1
            res = np.sqrt(gF2 + gth * gth)

            if res < tol and abs(dJ) <= det_tol:
                converged = True
                break
            if nsw >= max_sweeps:
                break
            nsw += 1

            # ---- nested multiplier ascent on det F = 1
            if abs(dJ) > det_tol and res <= max(tol, 0.25 * gam * abs(dJ)):
                pp += gam * dJ
                continue

            phi0 = _phiF_2(f00, f01, f10, f11, n1, n2, m01, m02, mur, rr,
                           mual, pp, gam, l00, l01, l10, l11,
                           g00, g01, g10, g11, rho, vis_F,
                           k00, k01, k10, k11) \
                + ff1 * n1 + ff2 * n2 \
                + 0.5 * vis_n * ((n1 - nk1) ** 2 + (n2 - nk2) ** 2)

            # ---- joint Hessian on (F, theta)
            for a in range(5):
                for b in range(5):
                    H[a, b] = 0.0
            for a in range(4):
                H[a, a] = base
            n11 = q * n1 * n1; n12 = q * n1 * n2; n22 = q * n2 * n2
            H[0, 0] += n11; H[0, 2] += n12; H[2, 0] += n12; H[2, 2] += n22
            H[1, 1] += n11; H[1, 3] += n12; H[3, 1] += n12; H[3, 3] += n22
            wv[0] = n1 * m01; wv[1] = n1 * m02
            wv[2] = n2 * m01; wv[3] = n2 * m02
            cv[0] = f11; cv[1] = -f10; cv[2] = -f01; cv[3] = f00
            for a in range(4):
                for b in range(4):
                    H[a, b] += gam * cv[a] * cv[b] - mual * wv[a] * wv[b]
            H[0, 3] += pr; H[3, 0] += pr
            H[1, 2] -= pr; H[2, 1] -= pr
            # cross terms d2/dF dtheta along n' = (-n2, n1)
            up1 = -f00 * n2 + f10 * n1   # F^T n'
            up2 = -f01 * n2 + f11 * n1
            ccp = up1 * m01 + up2 * m02
            H[0, 4] = q * (-n2 * u1 + n1 * up1) - mual * (ccp * n1 - cc * n2) * m01
            H[1, 4] = q * (-n2 * u2 + n1 * up2) - mual * (ccp * n1 - cc * n2) * m02
            H[2, 4] = q * (n1 * u1 + n2 * up1) - mual * (ccp * n2 + cc * n1) * m01
            H[3, 4] = q * (n1 * u2 + n2 * up2) - mual * (ccp * n2 + cc * n1) * m02
            for a in range(4):
                H[4, a] = H[a, 4]
            H[4, 4] = q * (up1 * up1 + up2 * up2) - mual * ccp * ccp \
                + vis_n - (gn1 * n1 + gn2 * n2)
            rhs[0] = -rF00; rhs[1] = -rF01; rhs[2] = -rF10; rhs[3] = -rF11
            rhs[4] = -gth
            g2all = gF2 + gth * gth

            # ---- Newton direction, inflating the diagonal if indefinite
            lam = 0.0
            found = False
            gd = 0.0
            for _lm in range(4):
                for a in range(5):
                    for b in range(5):
                        A[a, b] = H[a, b]
                    A[a, a] += lam
                    bw[a] = rhs[a]
                if _gauss_solve(A, bw, d):
                    gd = -(rhs[0] * d[0] + rhs[1] * d[1] + rhs[2] * d[2]
                           + rhs[3] * d[3] + rhs[4] * d[4])
                    if gd < 0.0:
                        found = True
                        break
                lam = base if lam == 0.0 else lam * 10.0

            did = False
            if found:
                if -0.5 * gd <= MEAS_EPS * (abs(phi0) + scale):
                    t = 1.0
                    for _bt in range(12):
                        a2 = f00 + t * d[0]; b2 = f01 + t * d[1]
                        c2 = f10 + t * d[2]; d2 = f11 + t * d[3]
                        if a2 * d2 - b2 * c2 > DET_FLOOR:
                            f00 = a2; f01 = b2; f10 = c2; f11 = d2
                            th = th + t * d[4]
                            did = True
                            break
                        t *= 0.5
                else:
                    t = 1.0
                    for _bt in range(NEWTON_BT):
                        a2 = f00 + t * d[0]; b2 = f01 + t * d[1]
                        c2 = f10 + t * d[2]; d2 = f11 + t * d[3]
                        if a2 * d2 - b2 * c2 > DET_FLOOR:
                            th2 = th + t * d[4]
                            p1 = np.cos(th2); p2 = np.sin(th2)
                            phi2 = _phiF_2(a2, b2, c2, d2, p1, p2, m01, m02,
                                           mur, rr, mual, pp, gam,
                                           l00, l01, l10, l11,
                                           g00, g01, g10, g11, rho, vis_F,
                                           k00, k01, k10, k11) \
                                + ff1 * p1 + ff2 * p2 \
                                + 0.5 * vis_n * ((p1 - nk1) ** 2 + (p2 - nk2) ** 2)
                            if phi2 <= phi0 + BACKTRACK_DECREASE * t * gd:
                                f00 = a2; f01 = b2; f10 = c2; f11 = d2
                                th = th2
                                did = True
                                break
                        t *= 0.5
            if not did:
                # scaled-gradient fallback
                d[0] = -tF0 * rF00; d[1] = -tF0 * rF01
                d[2] = -tF0 * rF10; d[3] = -tF0 * rF11
                d[4] = -tN0 * gth
                gd = -(tF0 * gF2 + tN0 * gth * gth)
                if -BACKTRACK_DECREASE * gd <= MEAS_EPS * (abs(phi0) + scale):
                    t = 1.0
                    for _bt in range(12):
                        a2 = f00 + t * d[0]; b2 = f01 + t * d[1]
                        c2 = f10 + t * d[2]; d2 = f11 + t * d[3]
                        if a2 * d2 - b2 * c2 > DET_FLOOR:
                            f00 = a2; f01 = b2; f10 = c2; f11 = d2
                            th = th + t * d[4]
                            break
                        t *= 0.5
                else:
                    t = 1.0
                    for _bt in range(NEWTON_BT):
                        a2 = f00 + t * d[0]; b2 = f01 + t * d[1]
                        c2 = f10 + t * d[2]; d2 = f11 + t * d[3]
                        if a2 * d2 - b2 * c2 > DET_FLOOR:
                            th2 = th + t * d[4]
                            p1 = np.cos(th2); p2 = np.sin(th2)
                            phi2 = _phiF_2(a2, b2, c2, d2, p1, p2, m01, m02,
                                           mur, rr, mual, pp, gam,
                                           l00, l01, l10, l11,
                                           g00, g01, g10, g11, rho, vis_F,
                                           k00, k01, k10, k11) \
                                + ff1 * p1 + ff2 * p2 \
                                + 0.5 * vis_n * ((p1 - nk1) ** 2 + (p2 - nk2) ** 2)
                            if phi2 <= phi0 + BACKTRACK_DECREASE * t * gd:
                                f00 = a2; f01 = b2; f10 = c2; f11 = d2
                                th = th2
                                break
                        t *= 0.5

        F[p, 0, 0] = f00; F[p, 0, 1] = f01
        F[p, 1, 0] = f10; F[p, 1, 1] = f11
        ang[p] = th
        p_inc[p] = pp
        res_out[p] = res
        nsw_out[p] = nsw
        ok_out[p] = converged


# ---- 3D helpers operating on (3, 3) scratch arrays ----------------------

@njit(cache=True)
def _det3(A):
    return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))


@njit(cache=True)
def _cof3(A, out):
    out[0, 0] = A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]
    out[0, 1] = A[1, 2] * A[2, 0] - A[1, 0] * A[2, 2]
    out[0, 2] = A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]
    out[1, 0] = A[0, 2] * A[2, 1] - A[0, 1] * A[2, 2]
    out[1, 1] = A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
    out[1, 2] = A[0, 1] * A[2, 0] - A[0, 0] * A[2, 1]
    out[2, 0] = A[0, 1] * A[1, 2] - A[0, 2] * A[1, 1]
    out[2, 1] = A[0, 2] * A[1, 0] - A[0, 0] * A[1, 2]
    out[2, 2] = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]


@njit(cache=True)
def _n_from_chart(ph, th, E, out):
    sp = np.sin(ph)
    a = sp * np.cos(th)
    b = sp * np.sin(th)
    c = np.cos(ph)
    for i in range(3):
        out[i] = a * E[i, 0] + b * E[i, 1] + c * E[i, 2]


@njit(cache=True)
def _phiF_3(Fl, n, n0l, mur, rr, mual, pp, gam, Ll, Gl, rho, visF, Kl):
    fsq = 0.0
    coup = 0.0
    for i in range(3):
        for j in range(3):
            fij = Fl[i, j]
            fsq += fij * fij
            coup += (-Ll[i, j] * fij + 0.5 * rho * (Gl[i, j] - fij) ** 2
                     + 0.5 * visF * (fij - Kl[i, j]) ** 2)
    usq = 0.0
    cc = 0.0
    for i in range(3):
        ui = Fl[0, i] * n[0] + Fl[1, i] * n[1] + Fl[2, i] * n[2]
        usq += ui * ui
        cc += ui * n0l[i]
    dJ = _det3(Fl) - 1.0
    return (0.5 * mur * (fsq - rr * usq) + 0.5 * mual * (usq - cc * cc)
            + pp * dJ + 0.5 * gam * dJ * dJ + coup)


@njit(cache=True)
def _phiJ_3(Fl, n, n0l, mur, rr, mual, pp, gam, Ll, Gl, rho, visF, Kl,
            ffl, visn, nkl):
    extra = 0.0
    for i in range(3):
        extra += ffl[i] * n[i] + 0.5 * visn * (n[i] - nkl[i]) ** 2
    return _phiF_3(Fl, n, n0l, mur, rr, mual, pp, gam, Ll, Gl, rho,
                   visF, Kl) + extra


@njit(cache=True)
def _gradN_3(n, Fl, n0l, mur, rr, mual, ffl, visn, nkl, out):
    # dW/dn = (mual - mur rr) F F^T n - mual c F n0 + ff + visn (n - nk)
    u0 = Fl[0, 0] * n[0] + Fl[1, 0] * n[1] + Fl[2, 0] * n[2]
    u1 = Fl[0, 1] * n[0] + Fl[1, 1] * n[1] + Fl[2, 1] * n[2]
    u2 = Fl[0, 2] * n[0] + Fl[1, 2] * n[1] + Fl[2, 2] * n[2]
    cc = u0 * n0l[0] + u1 * n0l[1] + u2 * n0l[2]
    q = mual - mur * rr
    for i in range(3):
        h = Fl[i, 0] * u0 + Fl[i, 1] * u1 + Fl[i, 2] * u2
        v = Fl[i, 0] * n0l[0] + Fl[i, 1] * n0l[1] + Fl[i, 2] * n0l[2]
        out[i] = q * h - mual * cc * v + ffl[i] + visn * (n[i] - nkl[i])


@njit(cache=True)
def _Qdot(Fl, Fn0, q, mual, visn, v, out):
    """out = (q F F^T - mual (F n0)(F n0)^T + visn I) v."""
    u0 = Fl[0, 0] * v[0] + Fl[1, 0] * v[1] + Fl[2, 0] * v[2]
    u1 = Fl[0, 1] * v[0] + Fl[1, 1] * v[1] + Fl[2, 1] * v[2]
    u2 = Fl[0, 2] * v[0] + Fl[1, 2] * v[1] + Fl[2, 2] * v[2]
    vf = v[0] * Fn0[0] + v[1] * Fn0[1] + v[2] * Fn0[2]
    for i in range(3):
        h = Fl[i, 0] * u0 + Fl[i, 1] * u1 + Fl[i, 2] * u2
        out[i] = q * h - mual * vf * Fn0[i] + visn * v[i]


@njit(parallel=True, cache=True)
def _lce_sweeps_3d(F, ang, chart, p_inc, G, Lam, n0, ff, Fk, nk,
                   mu, r1d, rr, al, gam, rho, vis_F, vis_n,
                   tol, det_tol, max_sweeps, phiF_scale, phin_scale,
                   res_out, nsw_out, ok_out):
    npts = F.shape[0]
    mur = mu * r1d
    mual = mu * al
    q = mual - mur * rr
    scale = phiF_scale + phin_scale
    for p in prange(npts):
        Fl = F[p].copy()
        E = chart[p].copy()
        Gl = G[p]
        Ll = Lam[p]
        Kl = Fk[p]
        n0l = n0[p]
        ffl = ff[p]
        nkl = nk[p]
        ph = ang[p, 0]
        th = ang[p, 1]
        pp = p_inc[p]

        n = np.empty(3)
        u = np.empty(3)
        gFl = np.empty((3, 3))
        cof = np.empty((3, 3))
        Ftry = np.empty((3, 3))
        gn = np.empty(3)
        ntry = np.empty(3)
        Fn0 = np.empty(3)
        m1 = np.empty(3)
        mth = np.empty(3)
        ua = np.empty(3)
        ub = np.empty(3)
        qv = np.empty(3)
        H = np.empty((11, 11))
        A = np.empty((11, 11))
        rhs = np.empty(11)
        bw = np.empty(11)
        d = np.empty(11)
        wv = np.empty(9)
        cv = np.empty(9)

        fsq0 = 0.0
        for i in range(3):
            for j in range(3):
                fsq0 += Fl[i, j] * Fl[i, j]
        tF0 = 1.0 / (rho + 2.0 * mur + 2.0 * mual + 3.0 * gam + vis_F)
        tN0 = 1.0 / (mu * (2.0 * r1d + 2.0 * al) * max(fsq0, 1.0) + vis_n + 1e-30)
        base = mur + rho + vis_F
        nsw = 0
        res = 0.0
        converged = False

        for _ in range(max_sweeps + 1):
            # ---- keep the chart's azimuth well conditioned
            if np.sin(ph) < 0.1:
                _n_from_chart(ph, th, E, n)
                k = 0
                if abs(n[1]) < abs(n[k]):
                    k = 1
                if abs(n[2]) < abs(n[k]):
                    k = 2
                dot = n[k]
                e3n = 0.0
                for i in range(3):
                    v = (1.0 if i == k else 0.0) - dot * n[i]
                    gn[i] = v  # scratch
                    e3n += v * v
                e3n = np.sqrt(e3n)
                for i in range(3):
                    E[i, 0] = n[i]
                    E[i, 2] = gn[i] / e3n
                E[0, 1] = E[1, 2] * E[2, 0] - E[2, 2] * E[1, 0]
                E[1, 1] = E[2, 2] * E[0, 0] - E[0, 2] * E[2, 0]
                E[2, 1] = E[0, 2] * E[1, 0] - E[1, 2] * E[0, 0]
                ph = 0.5 * np.pi
                th = 0.0

            # ---- shared quantities and the joint residual
            _n_from_chart(ph, th, E, n)
            sp = np.sin(ph)
            cp = np.cos(ph)
            ct = np.cos(th)
            st = np.sin(th)
            for j in range(3):
                u[j] = Fl[0, j] * n[0] + Fl[1, j] * n[1] + Fl[2, j] * n[2]
            cc = u[0] * n0l[0] + u[1] * n0l[1] + u[2] * n0l[2]
            J = _det3(Fl)
            dJ = J - 1.0
            pr = pp + gam * dJ
            _cof3(Fl, cof)
            gF2 = 0.0
            for i in range(3):
                for j in range(3):
                    g = (mur * Fl[i, j] + q * n[i] * u[j]
                         - mual * cc * n[i] * n0l[j] + pr * cof[i, j]
                         - Ll[i, j] - rho * (Gl[i, j] - Fl[i, j])
                         + vis_F * (Fl[i, j] - Kl[i, j]))
                    gFl[i, j] = g
                    gF2 += g * g
            _gradN_3(n, Fl, n0l, mur, rr, mual, ffl, vis_n, nkl, gn)
            # tangent frame: m1 = dn/dphi, mth = dn/dtheta
            g1 = 0.0
            g2 = 0.0
            gnn = 0.0
            for i in range(3):
                m1[i] = cp * ct * E[i, 0] + cp * st * E[i, 1] - sp * E[i, 2]
                mth[i] = sp * (-st * E[i, 0] + ct * E[i, 1])
                g1 += gn[i] * m1[i]
                g2 += gn[i] * mth[i]
                gnn += gn[i] * n[i]
            sp2 = max(sp * sp, 1e-4)
            res = np.sqrt(gF2 + g1 * g1 + g2 * g2 / sp2)

            if res < tol and abs(dJ) <= det_tol:
                converged = True
                break
            if nsw >= max_sweeps:
                break
            nsw += 1

            # ---- nested multiplier ascent on det F = 1
            if abs(dJ) > det_tol and res <= max(tol, 0.25 * gam * abs(dJ)):
                pp += gam * dJ
                continue

            phi0 = _phiJ_3(Fl, n, n0l, mur, rr, mual, pp, gam, Ll, Gl,
                           rho, vis_F, Kl, ffl, vis_n, nkl)

            # ---- joint Hessian on (F, phi, theta)
            for a in range(11):
                for b in range(11):
                    H[a, b] = 0.0
            for a in range(9):
                H[a, a] = base
            for i in range(3):
                for k in range(3):
                    qnn = q * n[i] * n[k]
                    for j in range(3):
                        H[3 * i + j, 3 * k + j] += qnn
            for i in range(3):
                for j in range(3):
                    wv[3 * i + j] = n[i] * n0l[j]
                    cv[3 * i + j] = cof[i, j]
            for a in range(9):
                for b in range(9):
                    H[a, b] += gam * cv[a] * cv[b] - mual * wv[a] * wv[b]
            # pr * d^2 J / dF^2 through the Levi-Civita contraction
            for i in range(3):
                for k in range(3):
                    if k == i:
                        continue
                    m = 3 - i - k
                    si = 1.0 if k == (i + 1) % 3 else -1.0
                    for j in range(3):
                        for l in range(3):
                            if l == j:
                                continue
                            nn = 3 - j - l
                            sj = 1.0 if l == (j + 1) % 3 else -1.0
                            H[3 * i + j, 3 * k + l] += pr * si * sj * Fl[m, nn]
            # cross terms d2/dF da along dn/da for a in (phi, theta)
            for j in range(3):
                ua[j] = Fl[0, j] * m1[0] + Fl[1, j] * m1[1] + Fl[2, j] * m1[2]
                ub[j] = Fl[0, j] * mth[0] + Fl[1, j] * mth[1] + Fl[2, j] * mth[2]
            cca = ua[0] * n0l[0] + ua[1] * n0l[1] + ua[2] * n0l[2]
            ccb = ub[0] * n0l[0] + ub[1] * n0l[1] + ub[2] * n0l[2]
            for i in range(3):
                for j in range(3):
                    a = 3 * i + j
                    H[a, 9] = q * (m1[i] * u[j] + n[i] * ua[j]) \
                        - mual * (cca * n[i] + cc * m1[i]) * n0l[j]
                    H[9, a] = H[a, 9]
                    H[a, 10] = q * (mth[i] * u[j] + n[i] * ub[j]) \
                        - mual * (ccb * n[i] + cc * mth[i]) * n0l[j]
                    H[10, a] = H[a, 10]
            # angle block; second chart derivatives are
            # d2n/dphi2 = -n, d2n/dphi dtheta = (cp/sp) dn/dtheta,
            # d2n/dtheta2 = -sp (ct e1 + st e2)
            gchd = 0.0
            gt2 = 0.0
            for i in range(3):
                gchd += gn[i] * cp * (-st * E[i, 0] + ct * E[i, 1])
                gt2 += gn[i] * (-sp) * (ct * E[i, 0] + st * E[i, 1])
            for i in range(3):
                Fn0[i] = Fl[i, 0] * n0l[0] + Fl[i, 1] * n0l[1] + Fl[i, 2] * n0l[2]
            _Qdot(Fl, Fn0, q, mual, vis_n, m1, qv)
            h11 = -gnn
            h12 = gchd
            for i in range(3):
                h11 += m1[i] * qv[i]
                h12 += mth[i] * qv[i]
            _Qdot(Fl, Fn0, q, mual, vis_n, mth, qv)
            h22 = gt2
            for i in range(3):
                h22 += mth[i] * qv[i]
            H[9, 9] = h11
            H[9, 10] = h12
            H[10, 9] = h12
            H[10, 10] = h22
            for i in range(3):
                for j in range(3):
                    rhs[3 * i + j] = -gFl[i, j]
            rhs[9] = -g1
            rhs[10] = -g2

            # ---- Newton direction, inflating the diagonal if indefinite
            lam = 0.0
            found = False
            gd = 0.0
            for _lm in range(4):
                for a in range(11):
                    for b in range(11):
                        A[a, b] = H[a, b]
                    A[a, a] += lam
                    bw[a] = rhs[a]
                if _gauss_solve(A, bw, d):
                    gd = 0.0
                    for a in range(11):
                        gd -= rhs[a] * d[a]
                    if gd < 0.0:
                        found = True
                        break
                lam = base if lam == 0.0 else lam * 10.0

            did = False
            if found:
                if -0.5 * gd <= MEAS_EPS * (abs(phi0) + scale):
                    t = 1.0
                    for _bt in range(12):
                        for i in range(3):
                            for j in range(3):
                                Ftry[i, j] = Fl[i, j] + t * d[3 * i + j]
                        if _det3(Ftry) > DET_FLOOR:
                            for i in range(3):
                                for j in range(3):
                                    Fl[i, j] = Ftry[i, j]
                            ph = ph + t * d[9]
                            th = th + t * d[10]
                            did = True
                            break
                        t *= 0.5
                else:
                    t = 1.0
                    for _bt in range(NEWTON_BT):
                        for i in range(3):
                            for j in range(3):
                                Ftry[i, j] = Fl[i, j] + t * d[3 * i + j]
                        if _det3(Ftry) > DET_FLOOR:
                            ph2 = ph + t * d[9]
                            th2 = th + t * d[10]
                            _n_from_chart(ph2, th2, E, ntry)
                            phi2 = _phiJ_3(Ftry, ntry, n0l, mur, rr, mual,
                                           pp, gam, Ll, Gl, rho, vis_F, Kl,
                                           ffl, vis_n, nkl)
                            if phi2 <= phi0 + BACKTRACK_DECREASE * t * gd:
                                for i in range(3):
                                    for j in range(3):
                                        Fl[i, j] = Ftry[i, j]
                                ph = ph2
                                th = th2
                                did = True
                                break
                        t *= 0.5
            if not did:
                # scaled-gradient fallback; the theta step carries 1/sin^2
                for i in range(3):
                    for j in range(3):
                        d[3 * i + j] = -tF0 * gFl[i, j]
                d[9] = -tN0 * g1
                d[10] = -tN0 * g2 / sp2
                gd = -(tF0 * gF2 + tN0 * (g1 * g1 + g2 * g2 / sp2))
                if -BACKTRACK_DECREASE * gd <= MEAS_EPS * (abs(phi0) + scale):
                    t = 1.0
                    for _bt in range(12):
                        for i in range(3):
                            for j in range(3):
                                Ftry[i, j] = Fl[i, j] + t * d[3 * i + j]
                        if _det3(Ftry) > DET_FLOOR:
                            for i in range(3):
                                for j in range(3):
                                    Fl[i, j] = Ftry[i, j]
                            ph = ph + t * d[9]
                            th = th + t * d[10]
                            break
                        t *= 0.5
                else:
                    t = 1.0
                    for _bt in range(NEWTON_BT):
                        for i in range(3):
                            for j in range(3):
                                Ftry[i, j] = Fl[i, j] + t * d[3 * i + j]
                        if _det3(Ftry) > DET_FLOOR:
                            ph2 = ph + t * d[9]
                            th2 = th + t * d[10]
                            _n_from_chart(ph2, th2, E, ntry)
                            phi2 = _phiJ_3(Ftry, ntry, n0l, mur, rr, mual,
                                           pp, gam, Ll, Gl, rho, vis_F, Kl,
                                           ffl, vis_n, nkl)
                            if phi2 <= phi0 + BACKTRACK_DECREASE * t * gd:
                                for i in range(3):
                                    for j in range(3):
                                        Fl[i, j] = Ftry[i, j]
                                ph = ph2
                                th = th2
                                break
                        t *= 0.5

        for i in range(3):
            for j in range(3):
                F[p, i, j] = Fl[i, j]
                chart[p, i, j] = E[i, j]
        ang[p, 0] = ph
        ang[p, 1] = th
        p_inc[p] = pp
        res_out[p] = res
        nsw_out[p] = nsw
        ok_out[p] = converged
