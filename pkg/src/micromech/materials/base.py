"""Material model contract used by the operator-splitting solver.

A material owns everything pointwise: stored energy, stress, internal
variables with their kinetics and constraints, and the local solver that
advances one splitting iteration at every grid point simultaneously
(ADMM step 1). The solver core never looks inside; it only needs

  * ``energy`` / ``stress`` / ``stress_total`` for diagnostics and
    residuals,
  * ``prepare_frozen`` once per outer iteration (terms treated explicitly,
    e.g. director-gradient forces),
  * ``local_sweeps`` to advance the per-point minimization by a bounded
    number of descent sweeps (the inexactness policies meter these),
  * ``tangent`` where second derivatives exist (stability analysis).

Field arrays are passed flattened, points first: F has shape
(npts, dim, dim), internal variables (npts, ncomp). The per-point
augmented objective each point minimizes is

    W(F, q) + dt*D((F - F_prev)/dt, (q - q_prev)/dt)
      - lam : F + rho/2 |grad_u - F|^2   (+ constraint terms),

whose F-gradient is exactly the local residual the policies meter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InadmissibleStateError

__all__ = ["MaterialModel", "LocalStats", "BACKTRACK_SHRINK", "BACKTRACK_DECREASE"]

# Armijo line-search constants shared by all local solvers.
BACKTRACK_DECREASE = 1e-4
BACKTRACK_SHRINK = 0.5
MAX_BACKTRACKS = 60
#: an Armijo decrease below MEAS_EPS * (|phi| + scale) is float noise
MEAS_EPS = 64.0 * np.finfo(float).eps


@dataclass
class LocalStats:
    """Outcome of one metered batch of local sweeps.

    res_pts : (npts,) pointwise residual norms (stress units, unscaled).
    sweeps : int, sweeps actually executed in this batch (max over points).
    converged_frac : fraction of points with res_pts < tol at exit.
    """

    res_pts: np.ndarray
    sweeps: int
    converged_frac: float


class MaterialModel:
    """Base class; concrete models override the pointwise physics."""

    dim: int = 2
    name: str = "base"
    mu_rep: float = 1.0
    #: names and component counts of internal-variable arrays
    internal_spec: dict = {}
    has_tangent: bool = False
    has_dissipation: bool = False

    # -- state ------------------------------------------------------------

    def init_internal(self, npts: int, rng=None) -> dict:
        """Fresh internal-variable arrays for npts points."""
        return {}

    # -- pointwise physics -------------------------------------------------

    def energy(self, F: np.ndarray, internal: dict) -> np.ndarray:
        raise NotImplementedError

    def stress(self, F: np.ndarray, internal: dict) -> np.ndarray:
        """dW/dF, without constraint reactions or viscous contributions."""
        raise NotImplementedError

    def stress_total(self, F, internal, prev_F, prev_internal, dt) -> np.ndarray:
        """Full mechanical stress entering equilibrium: dW/dF plus
        constraint reactions plus viscous stress. Defaults to stress()."""
        return self.stress(F, internal)

    def tangent(self, F: np.ndarray, internal: dict) -> np.ndarray:
        """d2W/dF2, shape (npts, d, d, d, d)."""
        raise NotImplementedError(f"{self.name} has no analytic tangent")

    def dissipation_density(self, dF, dinternal, dt) -> np.ndarray:
        """D evaluated at rates (dF/dt, dq/dt); zero unless overridden."""
        npts = dF.shape[0]
        return np.zeros(npts)

    # -- local solver ------------------------------------------------------

    def prepare_frozen(self, grid, F, internal) -> dict:
        """Per-outer-iteration frozen data (explicitly treated terms)."""
        return {}

    def local_sweeps(self, F, internal, grad_u, lam, rho, dt, prev_F,
                     prev_internal, frozen, max_sweeps, point_tol) -> LocalStats:
        """Advance every point by at most max_sweeps descent sweeps.

        Points whose residual is already below point_tol are skipped.
        Updates F and internal in place; must be deterministic and must
        only write each point's own slot (data-parallel contract).
        """
        raise NotImplementedError

    # -- helpers shared by the numpy-path models ---------------------------

    def _check_det(self, J: np.ndarray):
        if np.any(J <= 0.0):
            bad = int(np.argmax(J <= 0.0))
            raise InadmissibleStateError(
                f"det F = {J.reshape(-1)[bad]:.3e} <= 0 at point {bad}"
            )


def descent_sweeps_numpy(objective, gradient, X, tol, max_sweeps, t0,
                         admissible=None, phi_scale=1.0):
    """Vectorized steepest descent with Armijo backtracking.

    Reference implementation of the per-point minimization used by models
    without a compiled kernel. ``X`` is (npts, nvar), updated in place.
    ``objective(X_rows, idx)`` and ``gradient(X_rows, idx)`` receive the
    row values together with their point indices so that per-point frozen
    data can be indexed during partial (line-search) evaluations; they
    return (nrows,) / (nrows, nvar). ``admissible(X_rows)`` marks rows
    whose trial state may be evaluated at all. ``phi_scale`` is the
    energy-density scale of the model (e.g. a representative modulus).

    Near a minimum the requested Armijo decrease c1*t*|g|^2 drops below
    the rounding noise of the objective; accept/reject becomes a coin
    flip there, which is what stalls a naive implementation around
    |g| ~ sqrt(eps). Once a point's decrease is unmeasurable against
    MEAS_EPS*(|phi| + phi_scale) it switches permanently to plain
    gradient steps with the step grown gently while the residual falls
    and halved whenever it grows. That terminal phase needs no objective
    values and reaches tolerances far below sqrt(eps).

    Returns (res_pts, sweeps_done). The step starts at t0 (scalar or per
    point; pass ~1/local curvature so short metered calls make progress)
    and is carried per point across sweeps within one call.
    """
    npts = X.shape[0]
    all_idx = np.arange(npts)
    t = np.broadcast_to(np.asarray(t0, dtype=float), (npts,)).copy()
    tmax = t * 16.0
    free_mode = np.zeros(npts, dtype=bool)
    grad = gradient(X, all_idx)
    res = np.sqrt(np.sum(grad * grad, axis=1))
    sweeps = 0
    ref = np.inf
    for _ in range(max_sweeps):
        active = res > tol
        if not np.any(active):
            break
        sweeps += 1
        arm = np.flatnonzero(active & ~free_mode)
        if arm.size:
            phi0 = objective(X[arm], arm)
            gsq = np.sum(grad[arm] * grad[arm], axis=1)
            meas = BACKTRACK_DECREASE * t[arm] * gsq \
                > MEAS_EPS * (np.abs(phi0) + phi_scale)
            free_mode[arm[~meas]] = True
            keep = meas
        fre = np.flatnonzero(active & free_mode)
        res_before = res[fre]

        if arm.size:
            arm = arm[keep]
        if arm.size:
            phi0 = phi0[keep]
            gsq = gsq[keep]
            t_in = t[arm].copy()
            accepted = np.zeros(arm.size, dtype=bool)
            for _bt in range(MAX_BACKTRACKS):
                todo = np.flatnonzero(~accepted)
                if todo.size == 0:
                    break
                rows = arm[todo]
                Xtry = X[rows] - t[rows, None] * grad[rows]
                ok = np.ones(todo.size, dtype=bool)
                if admissible is not None:
                    ok &= admissible(Xtry)
                phi_try = np.full(todo.size, np.inf)
                if np.any(ok):
                    phi_try[ok] = objective(Xtry[ok], rows[ok])
                good = phi_try <= phi0[todo] - BACKTRACK_DECREASE * t[rows] * gsq[todo]
                X[rows[good]] = Xtry[good]
                accepted[todo[good]] = True
                t[rows[~good]] *= BACKTRACK_SHRINK
            t[arm[accepted]] = np.minimum(t[arm[accepted]] * 1.6,
                                          tmax[arm[accepted]])
            failed = ~accepted
            free_mode[arm[failed]] = True
            t[arm[failed]] = t_in[failed]

        if fre.size:
            Xtry = X[fre] - t[fre, None] * grad[fre]
            took = np.ones(fre.size, dtype=bool)
            if admissible is not None:
                took = admissible(Xtry)
                for _bt in range(12):
                    if np.all(took):
                        break
                    bad = np.flatnonzero(~took)
                    t[fre[bad]] *= BACKTRACK_SHRINK
                    Xtry[bad] = X[fre[bad]] - t[fre[bad], None] * grad[fre[bad]]
                    took[bad] = admissible(Xtry[bad])
            X[fre[took]] = Xtry[took]

        grad = gradient(X, all_idx)
        res = np.sqrt(np.sum(grad * grad, axis=1))
        if fre.size:
            grew = res[fre] > res_before
            t[fre[grew]] *= BACKTRACK_SHRINK
            t[fre[~grew]] = np.minimum(t[fre[~grew]] * 1.3, tmax[fre[~grew]])
        # stall guard: no measurable progress over a long stretch
        if sweeps % 32 == 0:
            cur = float(np.sum(res[res > tol]))
            if cur > 0.995 * ref:
                break
            ref = cur
    return res, sweeps
