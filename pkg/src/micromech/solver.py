"""Operator-splitting solver for periodic finite-strain equilibrium.

Each outer iteration advances one splitting round on the constraint
grad u = F, with Lagrange multiplier field lam and penalty rho:

  1. local: at every grid point, minimize the augmented pointwise
     objective W(F, q) + dt*D + coupling terms over (F, q). Fully
     data-parallel; an inexactness policy meters how many descent
     sweeps are spent (see LocalPolicy subclasses).
  2. global: project F - lam/rho onto compatible gradients by one
     spectral Helmholtz solve, with the macroscopic average set by the
     strain/stress boundary control.
  3. multiplier: lam += rho * (grad u - F), exact ascent step. After
     this update the multiplier field is discretely divergence free,
     which is what ties lam to the equilibrated stress field.

Residuals per iteration (all scale invariant):
  r_p = RMS(grad u - F)                       primal, strain units
  r_d = (rho/mu_rep) * RMS(change in grad u)  dual
  r_l = RMS(local stationarity gradient)/mu_rep

The penalty is rebalanced by fixed factors whenever primal and dual
residuals drift apart by more than a ratio threshold; the multiplier is
kept unscaled so no rescaling is needed when rho changes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DivergenceError, ParameterError
from .grid import (
    Grid,
    forward_transform,
    mean_field,
    modified_symbols,
    rms,
)
from .projection import MacroBC, helmholtz_project

__all__ = [
    "SolverParams",
    "Residuals",
    "ADMMState",
    "LocalPolicy",
    "ExactAll",
    "FractionConverged",
    "RatioToDual",
    "init_state",
    "outer_iteration",
    "solve",
    "begin_time_step",
    "equilibrium_residual",
    "macro_stress",
]


# =========================================================================
# parameters, residual record, state
# =========================================================================

@dataclass
class SolverParams:
    """Outer-loop tolerances and penalty schedule.

    rho_init of None means "use the model's representative modulus".
    The penalty floor is rho_min_factor times the initial penalty.
    """

    r_p_tol: float = 1e-6
    r_d_tol: float = 1e-6
    r_l_tol: float | None = None  # default: max(r_p_tol, r_d_tol)
    point_tol: float = 1e-11
    max_outer: int = 20000
    max_local: int = 2000
    rho_init: float | None = None
    rho_min_factor: float = 1e-3
    kappa_adapt: float = 1.3
    tau_adapt: float = 10.0
    adapt: bool = True
    divergence_limit: float = 1e8

    def __post_init__(self):
        if self.r_p_tol <= 0 or self.r_d_tol <= 0:
            raise ParameterError("residual tolerances must be positive")
        if self.kappa_adapt <= 1.0:
            raise ParameterError("kappa_adapt must exceed 1")
        if self.tau_adapt < 1.0:
            raise ParameterError("tau_adapt must be at least 1")


class Residuals(NamedTuple):
    outer_iter: int
    r_p: float
    r_d: float
    r_l: float
    rho: float
    wall_ms: float


@dataclass
class ADMMState:
    """Complete solver state; everything needed to resume a run."""

    u_mean: np.ndarray          # (d, d) macroscopic deformation gradient
    u_tilde: np.ndarray         # grid.shape + (d,) fluctuation map
    grad_u: np.ndarray          # grid.shape + (d, d)
    F: np.ndarray               # grid.shape + (d, d) local variable
    lam: np.ndarray             # grid.shape + (d, d) multiplier
    internal: dict              # model internal variables, (npts, ncomp)
    rho: float
    outer_iter: int = 0
    r_d_prev: float = np.inf
    total_sweeps: int = 0
    history: list = field(default_factory=list)
    prev_F: np.ndarray | None = None
    prev_internal: dict | None = None


# =========================================================================
# local inexactness policies
# =========================================================================

class LocalPolicy:
    """Meters descent sweeps spent in the local stage each iteration.

    ``target_tol`` returns the pointwise residual tolerance (relative to
    mu_rep) requested this iteration; ``is_done`` inspects the stats of
    the last metered batch. The solver stops batching when the policy is
    satisfied, when no point advanced, or at the sweep budget.
    """

    name = "base"
    chunk = 50

    def target_tol(self, params: SolverParams, r_d_prev: float) -> float:
        return params.point_tol

    def is_done(self, stats, sweeps_total: int) -> bool:
        raise NotImplementedError


class ExactAll(LocalPolicy):
    """Run until every point meets the pointwise tolerance."""

    name = "exact"
    chunk = 50

    def is_done(self, stats, sweeps_total):
        return stats.converged_frac >= 1.0


class FractionConverged(LocalPolicy):
    """Stop once a fraction of points meets the pointwise tolerance.

    Checks cheaply every ``check_every`` sweeps; the remaining points
    carry their residual into the next outer iteration.
    """

    name = "fraction"

    def __init__(self, fraction: float = 0.9, check_every: int = 2):
        if not 0.0 < fraction <= 1.0:
            raise ParameterError("fraction must lie in (0, 1]")
        self.fraction = float(fraction)
        self.chunk = int(check_every)

    def is_done(self, stats, sweeps_total):
        return stats.converged_frac >= self.fraction


class RatioToDual(LocalPolicy):
    """Tie local accuracy to the previous dual residual.

    Requests pointwise residuals no larger than ratio * r_d_prev (in
    mu_rep units), so early outer iterations are cheap and the local
    stage tightens as the global iteration converges. Unbounded on the
    first iteration, where one batch is always run.
    """

    name = "ratio"
    chunk = 25

    def __init__(self, ratio: float = 0.3):
        if ratio <= 0:
            raise ParameterError("ratio must be positive")
        self.ratio = float(ratio)

    def target_tol(self, params, r_d_prev):
        if not np.isfinite(r_d_prev):
            return 1.0
        return max(params.point_tol, self.ratio * r_d_prev)

    def is_done(self, stats, sweeps_total):
        return stats.converged_frac >= 1.0


# =========================================================================
# state setup and the outer iteration
# =========================================================================

def init_state(grid: Grid, model, bc: MacroBC, params: SolverParams,
               rng=None) -> ADMMState:
    """Uniform initial state at the pinned macroscopic strain."""
    d = grid.dim
    if bc.strain_mask.shape != (d, d):
        raise ParameterError("boundary control dimension mismatch")
    Fbar0 = np.where(bc.strain_mask, bc.value, np.eye(d))
    F = np.empty(grid.shape + (d, d))
    F[...] = Fbar0
    state = ADMMState(
        u_mean=Fbar0.copy(),
        u_tilde=np.zeros(grid.shape + (d,)),
        grad_u=F.copy(),
        F=F,
        lam=np.zeros(grid.shape + (d, d)),
        internal=model.init_internal(grid.npoints, rng),
        rho=float(params.rho_init if params.rho_init is not None
                  else model.mu_rep),
    )
    if state.rho <= 0:
        raise ParameterError("initial penalty must be positive")
    return state


def begin_time_step(state: ADMMState):
    """Freeze the current fields as the previous-step reference."""
    state.prev_F = state.F.copy()
    state.prev_internal = {k: v.copy() for k, v in state.internal.items()}


def outer_iteration(grid: Grid, model, state: ADMMState, params: SolverParams,
                    bc: MacroBC, policy: LocalPolicy, dt: float = 0.0,
                    freqs=None) -> Residuals:
    """One full splitting round; updates state in place."""
    t_start = time.perf_counter()
    d = grid.dim
    npts = grid.npoints
    mu_rep = model.mu_rep
    Ff = state.F.reshape(npts, d, d)
    Gf = state.grad_u.reshape(npts, d, d)
    Lf = state.lam.reshape(npts, d, d)
    prev_Ff = (state.prev_F.reshape(npts, d, d)
               if state.prev_F is not None else None)

    frozen = model.prepare_frozen(grid, state.F, state.internal)

    # ---- step 1: metered local solves
    tol_pt = policy.target_tol(params, state.r_d_prev)
    sweeps_total = 0
    while True:
        chunk = min(policy.chunk, params.max_local - sweeps_total)
        stats = model.local_sweeps(Ff, state.internal, Gf, Lf, state.rho, dt,
                                   prev_Ff, state.prev_internal, frozen,
                                   chunk, tol_pt)
        sweeps_total += stats.sweeps
        if (policy.is_done(stats, sweeps_total)
                or stats.sweeps < chunk
                or sweeps_total >= params.max_local):
            break
    state.total_sweeps += sweeps_total
    r_l = float(np.sqrt(np.sum(stats.res_pts ** 2) / npts)) / mu_rep

    # ---- step 2: compatible projection with macroscopic control
    proj = helmholtz_project(grid, state.F, state.lam, state.rho, bc,
                             freqs=freqs)
    r_d = state.rho * rms(grid, proj.grad_u - state.grad_u) / mu_rep
    state.u_mean = proj.u_mean
    state.u_tilde = proj.u_tilde
    state.grad_u = proj.grad_u

    # ---- step 3: exact multiplier ascent
    misfit = state.grad_u - state.F
    r_p = rms(grid, misfit)
    state.lam += state.rho * misfit

    state.outer_iter += 1
    state.r_d_prev = r_d

    if not np.isfinite(r_p) or r_p > params.divergence_limit:
        raise DivergenceError(
            f"primal residual {r_p:.3e} at outer iteration {state.outer_iter}")

    # ---- penalty rebalancing
    if params.adapt and state.outer_iter > 1:
        rho_ref = (params.rho_init if params.rho_init is not None
                   else model.mu_rep)
        if r_p > params.tau_adapt * r_d:
            state.rho *= params.kappa_adapt
        elif r_d > params.tau_adapt * r_p:
            state.rho = max(state.rho / params.kappa_adapt,
                            params.rho_min_factor * rho_ref)

    wall_ms = (time.perf_counter() - t_start) * 1e3
    resid = Residuals(state.outer_iter, float(r_p), float(r_d), float(r_l),
                      float(state.rho), wall_ms)
    state.history.append(resid)
    return resid


def solve(grid: Grid, model, bc: MacroBC, params: SolverParams,
          policy: LocalPolicy | None = None, state: ADMMState | None = None,
          dt: float = 0.0, rng=None, callback=None,
          raise_on_max: bool = True):
    """Iterate to joint primal/dual tolerance; returns (state, converged).

    A supplied state continues (warm start / time stepping); otherwise a
    fresh uniform state is built. ``callback(state, resid)`` runs after
    every outer iteration, e.g. for logging or checkpointing.
    """
    if policy is None:
        policy = ExactAll()
    if state is None:
        state = init_state(grid, model, bc, params, rng)
    freqs = modified_symbols(grid, real=True)
    r_l_tol = (params.r_l_tol if params.r_l_tol is not None
               else max(params.r_p_tol, params.r_d_tol))
    converged = False
    for _ in range(params.max_outer):
        resid = outer_iteration(grid, model, state, params, bc, policy,
                                dt=dt, freqs=freqs)
        if callback is not None:
            callback(state, resid)
        # full stationarity: primal feasibility, dual stability and the
        # pointwise optimality all below tolerance
        if (resid.r_p <= params.r_p_tol and resid.r_d <= params.r_d_tol
                and resid.r_l <= r_l_tol):
            converged = True
            break
    if not converged and raise_on_max:
        raise ConvergenceError(
            f"no convergence in {params.max_outer} outer iterations "
            f"(r_p={resid.r_p:.3e}, r_d={resid.r_d:.3e})",
            history=state.history)
    return state, converged


# =========================================================================
# diagnostics
# =========================================================================

def equilibrium_residual(grid: Grid, model, state: ADMMState,
                         dt: float = 0.0) -> float:
    """Negative-norm measure of div P at the current state.

    P is the full mechanical stress (elastic plus constraint reactions
    plus viscous terms). The divergence is taken with the same modified
    spectral symbols the projection uses, and each nonzero frequency is
    weighted by the inverse gradient-symbol magnitude, so the result is
    comparable to the RMS residuals: it is bounded by a small multiple
    of mu_rep * (r_d + r_l) for the converged splitting iterates.
    """
    d = grid.dim
    npts = grid.npoints
    Pf = model.stress_total(state.F.reshape(npts, d, d), state.internal,
                            state.prev_F.reshape(npts, d, d)
                            if state.prev_F is not None else None,
                            state.prev_internal, dt)
    P = Pf.reshape(grid.shape + (d, d))
    freqs = modified_symbols(grid)
    Phat = forward_transform(grid, P)
    divhat = np.einsum("...ij,...j->...i", Phat, freqs.grad_sym)
    gsq = freqs.grad_sq
    live = gsq > 1e-14 * gsq.max()
    w = np.where(live, 1.0 / np.where(live, gsq, 1.0), 0.0)
    total = np.sum(np.abs(divhat) ** 2 * w[..., None])
    return float(np.sqrt(total) / npts)


def macro_stress(grid: Grid, state: ADMMState) -> np.ndarray:
    """Volume average of the multiplier field, the macroscopic nominal
    stress once the iteration has converged."""
    return mean_field(grid, state.lam)
