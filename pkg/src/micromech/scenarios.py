"""End-to-end experiment drivers and microstructure utilities.

Two families of studies are orchestrated here on top of the core solver:

* a two-phase composite under equi-biaxial compression, including the
  2x2-supercell bifurcation comparison (unperturbed vs eigenmode-seeded
  initial guesses) with the accompanying Bloch stability trace;
* liquid-crystal-elastomer preparation (monodomain, random polydomain,
  compatible stripes) and quasistatic/viscous loading protocols with
  nominal stress, true stress, and orientation-tensor records.

Protocols are expressed as mixed macroscopic boundary controls: a subset
of mean deformation-gradient components is pinned as a function of the
stretch parameter while the rest are stress-controlled at zero. Pinned
targets compose a protocol deformation P(lam) with a reference mean
deformation, so lam = 1 reproduces the (possibly relaxed, non-identity)
reference exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np
from scipy import special
from scipy.optimize import least_squares

from .errors import ConfigurationError, ConvergenceError, ParameterError
from .grid import Grid, discrete_grad, mean_field
from .materials import MooneyRivlin, step_length_sqrt
from .projection import MacroBC
from .solver import (
    ADMMState,
    RatioToDual,
    SolverParams,
    begin_time_step,
    init_state,
    macro_stress,
    solve,
)
from .stability import mode_to_perturbation, stability_sweep

__all__ = [
    "ProtocolSpec",
    "MicrostructureSpec",
    "BifurcationStudy",
    "ProtocolStudy",
    "StepRecord",
    "CompatibilityResult",
    "build_composite",
    "composite_moduli",
    "tile_field",
    "tile_state",
    "perturb_state",
    "generate_polydomain_n0",
    "make_stripe_n0",
    "check_stripe_compatibility",
    "orientation_tensor",
    "true_stress",
    "run_bifurcation",
    "relax_zero_stress",
    "run_lce_protocol",
]


# =========================================================================
# protocol specification
# =========================================================================

PROTOCOL_KINDS = ("eb_compression", "uni", "pe", "eb", "monodomain", "custom")


def _field_eq(a, b):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return a is not None and b is not None and np.array_equal(a, b)
    return a == b

# which mean deformation-gradient components each named protocol pins;
# entries not listed are stress-controlled at zero mean stress
_KIND_MASKS = {
    "uni": ((0, 0),),
    "pe": ((0, 0), (0, 1), (1, 1)),
    "eb": ((0, 0), (0, 1), (1, 1)),
    "monodomain": ((0, 0), (0, 1), (1, 0)),
}


@dataclass(frozen=True, eq=False)
class ProtocolSpec:
    """Loading protocol: which mean components are pinned, and the
    stretch schedule lam_start -> lam_end in steps of lam_step.

    ``rate`` (stretch per unit time) with ``dt == 0`` derives the time
    step as |lam_step| / rate; both zero means quasistatic steps.
    ``strain_mask`` applies to kind "custom" only.
    """

    kind: str
    lam_start: float = 1.0
    lam_end: float = 1.0
    lam_step: float = 0.0
    rate: float = 0.0
    dt: float = 0.0
    strain_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ConfigurationError(
                f"unknown protocol kind {self.kind!r}; "
                f"expected one of {PROTOCOL_KINDS}")
        span = self.lam_end - self.lam_start
        if span != 0.0 and self.lam_step == 0.0:
            raise ConfigurationError("lam_step must be nonzero for a "
                                     "nontrivial stretch schedule")
        if span * self.lam_step < 0.0:
            raise ConfigurationError("lam_step direction must match the "
                                     "schedule (monotone)")
        if self.rate < 0.0 or self.dt < 0.0:
            raise ConfigurationError("rate and dt must be nonnegative")
        if self.kind == "custom":
            if self.strain_mask is None:
                raise ConfigurationError(
                    "custom protocol needs a strain_mask")
            m = np.asarray(self.strain_mask, dtype=bool)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ConfigurationError("strain_mask must be square")
            object.__setattr__(self, "strain_mask", m)
        if self.rate > 0.0 and self.dt == 0.0:
            object.__setattr__(self, "dt",
                               abs(self.lam_step) / self.rate)

    def __eq__(self, other):
        if not isinstance(other, ProtocolSpec):
            return NotImplemented
        return all(_field_eq(getattr(self, f), getattr(other, f))
                   for f in self.__dataclass_fields__)

    def schedule(self) -> np.ndarray:
        """Stretch values, start and end inclusive."""
        span = self.lam_end - self.lam_start
        if span == 0.0:
            return np.array([self.lam_start])
        nstep = int(round(span / self.lam_step))
        return self.lam_start + self.lam_step * np.arange(nstep + 1)

    def deformation(self, lam: float, dim: int) -> np.ndarray:
        """Protocol deformation P(lam) applied on top of the reference."""
        P = np.eye(dim)
        P[0, 0] = lam
        if self.kind == "eb_compression":
            P = lam * np.eye(dim)
        elif self.kind == "eb":
            P[1, 1] = lam
        return P

    def mask(self, dim: int) -> np.ndarray:
        if self.kind == "eb_compression":
            return np.ones((dim, dim), dtype=bool)
        if self.kind == "custom":
            if self.strain_mask.shape != (dim, dim):
                raise ConfigurationError(
                    f"strain_mask is {self.strain_mask.shape}, "
                    f"grid is {dim}D")
            return self.strain_mask.copy()
        m = np.zeros((dim, dim), dtype=bool)
        for ij in _KIND_MASKS[self.kind]:
            m[ij] = True
        return m

    def macro_bc(self, lam: float, dim: int,
                 reference: np.ndarray | None = None) -> MacroBC:
        """Mixed control at stretch lam relative to ``reference``.

        Pinned components take the values of P(lam) @ reference; all
        other components are stress-controlled at zero.
        """
        ref = np.eye(dim) if reference is None else np.asarray(reference)
        target = self.deformation(lam, dim) @ ref
        m = self.mask(dim)
        return MacroBC(strain_mask=m, value=np.where(m, target, 0.0))


# =========================================================================
# microstructure specification
# =========================================================================

MICROSTRUCTURE_KINDS = ("circular_inclusion", "stripe_director",
                        "random_director", "uniform_director")


def _unit(v, what):
    v = np.asarray(v, dtype=float)
    nrm = np.linalg.norm(v)
    if not np.isfinite(nrm) or nrm < 1e-12:
        raise ConfigurationError(f"{what} must be a nonzero vector")
    return v / nrm


@dataclass(frozen=True, eq=False)
class MicrostructureSpec:
    """Initial microstructure: composite phase layout or imprinted
    director field. Director values are renormalized to exact unit norm.
    """

    kind: str
    volume_fraction: float = 0.0
    interface_width: float = 0.02
    n0_plus: np.ndarray | None = None
    n0_minus: np.ndarray | None = None
    stripes: int = 0
    correlation_length: float = 0.0
    seed: int = 0
    n0: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in MICROSTRUCTURE_KINDS:
            raise ConfigurationError(
                f"unknown microstructure kind {self.kind!r}; "
                f"expected one of {MICROSTRUCTURE_KINDS}")
        if self.kind == "circular_inclusion":
            if not 0.0 < self.volume_fraction < 1.0:
                raise ConfigurationError(
                    "volume_fraction must lie in (0, 1)")
            if self.interface_width < 0.0:
                raise ConfigurationError(
                    "interface_width must be nonnegative")
        elif self.kind == "stripe_director":
            if self.stripes < 2:
                raise ConfigurationError("need at least two stripes")
            object.__setattr__(self, "n0_plus",
                               _unit(self.n0_plus, "n0_plus"))
            object.__setattr__(self, "n0_minus",
                               _unit(self.n0_minus, "n0_minus"))
        elif self.kind == "random_director":
            if self.correlation_length <= 0.0:
                raise ConfigurationError(
                    "correlation_length must be positive")
        elif self.kind == "uniform_director":
            object.__setattr__(self, "n0", _unit(self.n0, "n0"))

    def __eq__(self, other):
        if not isinstance(other, MicrostructureSpec):
            return NotImplemented
        return all(_field_eq(getattr(self, f), getattr(other, f))
                   for f in self.__dataclass_fields__)

    def build(self, grid: Grid) -> np.ndarray:
        """Phase field (grid shape) or n0 field (npoints, dim)."""
        if self.kind == "circular_inclusion":
            return build_composite(grid, self.volume_fraction,
                                   self.interface_width)
        if self.kind == "stripe_director":
            return make_stripe_n0(grid, self.n0_plus, self.n0_minus,
                                  self.stripes)
        if self.kind == "random_director":
            return generate_polydomain_n0(grid, self.correlation_length,
                                          self.seed)
        if len(self.n0) != grid.dim:
            raise ConfigurationError("uniform director dimension must "
                                     "match the grid")
        return np.tile(self.n0, (grid.npoints, 1))


# =========================================================================
# composite geometry
# =========================================================================

def build_composite(grid: Grid, volume_fraction: float,
                    interface_width: float = 0.02) -> np.ndarray:
    """Indicator of a centered circular inclusion with a graded boundary.

    Returns a float field on the grid, 1.0 deep inside the inclusion and
    0.0 in the matrix, crossing over along an erf profile of length scale
    ``interface_width``. The radius is corrected so the cell mean of the
    field equals ``volume_fraction``; ``interface_width = 0`` gives the
    sharp pixelated disc.

    The graded ring is not cosmetic. With a sharp pixel jump, the
    collocated second-variation form supports spurious grid-localized
    negative modes as soon as the tangent loses pointwise convexity,
    with magnitudes growing like the squared cutoff frequency. A profile
    that is smooth on the grid scale keeps the discrete Bloch spectrum
    on the physical branches.
    """
    if grid.dim != 2:
        raise ConfigurationError("the composite layout is two-dimensional")
    if not 0.0 < volume_fraction < 1.0:
        raise ConfigurationError("volume_fraction must lie in (0, 1)")
    if not 0.0 <= interface_width < grid.length:
        raise ConfigurationError(
            f"interface_width {interface_width} must lie in [0, {grid.length})")
    L = grid.length
    r0sq = (2.0 * L) ** 2 * volume_fraction / np.pi
    # the erf disc carries area pi (radius^2 + width^2); shrink the radius
    # so the mean of the field realizes the requested fraction exactly
    if r0sq <= interface_width**2:
        raise ConfigurationError(
            f"volume fraction {volume_fraction} gives an inclusion smaller "
            f"than interface_width {interface_width}")
    radius = np.sqrt(r0sq - interface_width**2)
    if radius > L:
        raise ConfigurationError(
            f"volume fraction {volume_fraction} needs inclusion radius "
            f"{radius:.3f} > half cell {L}")
    x = grid.coords()
    r = np.sqrt(np.sum(x * x, axis=-1))
    if interface_width == 0.0:
        return (r <= radius).astype(float)
    return 0.5 * special.erfc((r - radius) / (np.sqrt(2.0) * interface_width))


def composite_moduli(phase: np.ndarray, mu_matrix: float = 1.0,
                     contrast: float = 20.0, kappa_ratio: float = 9.8):
    """Per-point (mu, kappa) for a compliant inclusion in a stiff matrix.

    mu interpolates linearly in the phase field from the matrix value
    down to the ``contrast``-reduced inclusion value; kappa =
    kappa_ratio * mu pointwise, so the ratio holds in both phases and
    across the graded ring.
    """
    if contrast <= 0 or mu_matrix <= 0 or kappa_ratio < 0:
        raise ConfigurationError("moduli and contrast must be positive")
    chi = np.clip(phase.ravel().astype(float), 0.0, 1.0)
    mu = mu_matrix + (mu_matrix / contrast - mu_matrix) * chi
    return mu, kappa_ratio * mu


# =========================================================================
# supercell tiling
# =========================================================================

def tile_field(grid: Grid, f: np.ndarray, k: int) -> np.ndarray:
    """Replicate a cell field onto the k x ... x k supercell."""
    extra = f.ndim - grid.dim
    if f.shape[:grid.dim] != grid.shape:
        raise ConfigurationError("field does not live on this grid")
    return np.tile(f, (k,) * grid.dim + (1,) * extra)


def _tile_points(grid: Grid, a: np.ndarray, k: int) -> np.ndarray:
    shaped = a.reshape(grid.shape + a.shape[1:])
    tiled = tile_field(grid, shaped, k)
    return np.ascontiguousarray(tiled.reshape((-1,) + a.shape[1:]))


def tile_state(grid: Grid, state: ADMMState, k: int) -> ADMMState:
    """Solver state replicated onto the supercell, counters reset.

    Point-indexed internal arrays are re-flattened in the supercell's
    row-major point order.
    """
    return ADMMState(
        u_mean=state.u_mean.copy(),
        u_tilde=tile_field(grid, state.u_tilde, k),
        grad_u=tile_field(grid, state.grad_u, k),
        F=tile_field(grid, state.F, k),
        lam=tile_field(grid, state.lam, k),
        internal={key: _tile_points(grid, a, k)
                  for key, a in state.internal.items()},
        rho=state.rho,
    )


def perturb_state(grid: Grid, state: ADMMState, v: np.ndarray) -> None:
    """Add a displacement field to the compatible iterate in place.

    Only the fluctuation and its gradient move; the local field F keeps
    its warm values, so admissibility guards in the local stage see the
    perturbation through the projected gradient.
    """
    grid.check_field(v, 1, "perturbation")
    v = v - mean_field(grid, v)
    state.u_tilde = state.u_tilde + v
    state.grad_u = state.grad_u + discrete_grad(grid, v)


# =========================================================================
# director field generators
# =========================================================================

def generate_polydomain_n0(grid: Grid, correlation_length: float,
                           seed: int, angle_std: float = 0.5 * np.pi):
    """Seeded random imprinted-director field, (npoints, dim).

    A Gaussian white-noise field is low-pass filtered with a Gaussian
    spectral kernel cut off at 2*pi/correlation_length. In 2D the field
    is an angle field rescaled to ``angle_std`` pointwise spread; in 3D
    three independent components are filtered and normalized pointwise,
    which makes the directors exactly equi-distributed on the sphere.
    """
    edge = 2.0 * grid.length
    if not 0.0 < correlation_length <= edge:
        raise ConfigurationError(
            "correlation_length must lie in (0, cell edge]")
    rng = np.random.default_rng(seed)
    cut = 2.0 * np.pi / correlation_length
    # |xi|^2 on the full transform grid
    xi2 = np.zeros(grid.shape)
    for ax in range(grid.dim):
        shape = [1] * grid.dim
        shape[ax] = grid.n
        xi = np.fft.fftfreq(grid.n, d=grid.h) * 2.0 * np.pi
        xi2 = xi2 + (xi.reshape(shape)) ** 2
    kernel = np.exp(-0.5 * xi2 / cut**2)

    def filtered():
        w = rng.standard_normal(grid.shape)
        return np.fft.ifftn(np.fft.fftn(w) * kernel).real

    if grid.dim == 2:
        theta = filtered()
        spread = theta.std()
        if spread > 0:
            theta = theta * (angle_std / spread)
        n = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return n.reshape(-1, 2)
    v = np.stack([filtered() for _ in range(3)], axis=-1).reshape(-1, 3)
    nrm = np.linalg.norm(v, axis=1)
    bad = nrm < 1e-12
    if np.any(bad):
        v[bad] = (1.0, 0.0, 0.0)
        nrm[bad] = 1.0
    return v / nrm[:, None]


def make_stripe_n0(grid: Grid, n0_plus, n0_minus,
                   stripes: int) -> np.ndarray:
    """Piecewise-constant director bands normal to the second axis.

    The two values alternate across ``stripes`` equal bands; both are
    renormalized to exact unit norm.
    """
    if stripes < 2:
        raise ConfigurationError("need at least two stripes")
    np0 = _unit(n0_plus, "n0_plus")
    nm0 = _unit(n0_minus, "n0_minus")
    if len(np0) != grid.dim or len(nm0) != grid.dim:
        raise ConfigurationError("stripe directors must match the grid "
                                 "dimension")
    y = grid.coords()[..., 1]
    band = np.floor((y + grid.length) / (2.0 * grid.length) * stripes)
    band = np.clip(band, 0, stripes - 1).astype(int)
    n = np.where((band % 2 == 0)[..., None], np0, nm0)
    return np.ascontiguousarray(n.reshape(-1, grid.dim))


# =========================================================================
# stripe compatibility
# =========================================================================

@dataclass(frozen=True)
class CompatibilityResult:
    compatible: bool
    Q: np.ndarray | None
    a: np.ndarray | None
    residual: float


def check_stripe_compatibility(n0_plus, n0_minus, r: float,
                               normal=None, tol: float = 1e-8,
                               seed: int = 0) -> CompatibilityResult:
    """Rank-one compatibility of the two spontaneous stretches.

    Solves Q U+ = U- + a (x) normal for a rotation Q and vector a, with
    U+- the spontaneous stretch of each director. The vector a is found
    by multi-start least squares on the rotation-free normal equation
    (U- + a (x) normal)^T (U- + a (x) normal) = U+^2; Q is recovered
    afterwards. Generic incompatibility shows as a residual floor.
    """
    np0 = _unit(n0_plus, "n0_plus")
    nm0 = _unit(n0_minus, "n0_minus")
    d = len(np0)
    if len(nm0) != d:
        raise ConfigurationError("directors must have equal dimension")
    if normal is None:
        normal = np.zeros(d)
        normal[1] = 1.0
    nu = _unit(normal, "normal")
    Up = step_length_sqrt(np0[None], r)[0]
    Um = step_length_sqrt(nm0[None], r)[0]
    target = Up @ Up
    scale = np.linalg.norm(target)

    def resid(a):
        M = Um + np.outer(a, nu)
        return ((M.T @ M) - target)[np.triu_indices(d)]

    rng = np.random.default_rng(seed)
    starts = [np.zeros(d)]
    starts += [0.5 * rng.standard_normal(d) for _ in range(7)]
    best = None
    for a0 in starts:
        sol = least_squares(resid, a0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        M = Um + np.outer(sol.x, nu)
        if np.linalg.det(M) <= 0:
            continue
        res = np.linalg.norm(resid(sol.x)) / scale
        if best is None or res < best[0]:
            best = (res, sol.x, M)
    if best is None or best[0] > tol:
        return CompatibilityResult(False, None, None,
                                   np.inf if best is None else best[0])
    res, a, M = best
    Q = M @ np.linalg.inv(Up)
    return CompatibilityResult(True, Q, a, res)


# =========================================================================
# diagnostics
# =========================================================================

def orientation_tensor(n: np.ndarray) -> np.ndarray:
    """Nematic order parameter 3/2 (<n (x) n> - I/3), always 3x3.

    Planar director fields are embedded with zero out-of-plane
    component; full alignment along an axis gives principal value +1,
    an equi-distributed 3D field gives 0. Invariant under n -> -n.
    """
    n = np.asarray(n, dtype=float)
    if n.ndim != 2 or n.shape[1] not in (2, 3):
        raise ConfigurationError("director sample must be (npoints, 2|3)")
    if n.shape[1] == 2:
        n = np.concatenate([n, np.zeros((len(n), 1))], axis=1)
    M = (n[:, :, None] * n[:, None, :]).mean(axis=0)
    return 1.5 * (M - np.eye(3) / 3.0)


def true_stress(nominal: np.ndarray, Fbar: np.ndarray) -> np.ndarray:
    """Cauchy stress from mean nominal stress and mean deformation."""
    return nominal @ Fbar.T / np.linalg.det(Fbar)


# =========================================================================
# composite bifurcation study
# =========================================================================

@dataclass
class BifurcationStudy:
    """Three stress-stretch curves plus the cell stability trace."""

    lams: np.ndarray
    stress_unit: np.ndarray      # (nstep, d, d) nominal, unit cell
    stress_super: np.ndarray     # supercell from the tiled state
    stress_pert: np.ndarray      # supercell with eigenmode-seeded guesses
    betas: dict                  # multiplicity -> (nstep,) eigenvalue trace
    completed: bool = True

    def beta_zero_lam(self, k=(2, 2)) -> float | None:
        """First schedule point where the k eigenvalue is <= 0."""
        tr = self.betas[tuple(k)]
        hit = np.nonzero(tr <= 0.0)[0]
        return None if hit.size == 0 else float(self.lams[hit[0]])

    def departure_lam(self, rel: float = 1e-3) -> float | None:
        """First point where the perturbed curve leaves the unperturbed
        one by more than ``rel`` relative to the curve's stress scale."""
        a = self.stress_super[:, 0, 0]
        b = self.stress_pert[:, 0, 0]
        scale = np.nanmax(np.abs(a))
        if not np.isfinite(scale) or scale == 0.0:
            scale = 1.0
        hit = np.nonzero(np.abs(a - b) > rel * scale)[0]
        return None if hit.size == 0 else float(self.lams[hit[0]])


def _solve_step(grid, model, bc, params, policy, state, label, lam):
    state, ok = solve(grid, model, bc, params, policy=policy, state=state,
                      raise_on_max=False)
    if not ok:
        raise ConvergenceError(
            f"{label} branch did not converge at stretch {lam:.6g}",
            history=state.history)
    return state


def run_bifurcation(grid: Grid, protocol: ProtocolSpec,
                    volume_fraction: float = 0.3,
                    interface_width: float = 0.02,
                    mu_matrix: float = 1.0, contrast: float = 20.0,
                    kappa_ratio: float = 9.8,
                    params: SolverParams | None = None,
                    policy=None, seed: int = 0, k_max: int = 2,
                    perturb_amplitude: float = 1e-3,
                    stability_tol: float = 1e-8,
                    callback=None) -> BifurcationStudy:
    """Equi-biaxial compression of the circular-inclusion composite.

    Tracks three branches per stretch value: the unit cell, the 2x2
    supercell continued from the tiled unit state, and the supercell
    with the dominant Bloch eigenmode added to the initial guess
    (amplitude ``perturb_amplitude`` times the cell edge). Also records
    the Bloch eigenvalue trace for every multiplicity up to ``k_max``.

    On solver failure the partial study is attached to the raised error
    as ``partial``. Local solves default to the dual-ratio inexact
    policy; pass another policy to override.
    """
    if params is None:
        params = SolverParams()
    if policy is None:
        policy = RatioToDual()
    phase = build_composite(grid, volume_fraction, interface_width)
    mu, kappa = composite_moduli(phase, mu_matrix, contrast, kappa_ratio)
    model = MooneyRivlin(mu, kappa, dim=grid.dim, mu_rep=mu_matrix)
    grid2 = grid.supercell(2)
    mu2 = _tile_points(grid, mu[:, None], 2)[:, 0]
    model2 = MooneyRivlin(mu2, kappa_ratio * mu2, dim=grid.dim,
                          mu_rep=mu_matrix)

    lams = protocol.schedule()
    ks = [tuple(x + 1 for x in flat)
          for flat in np.ndindex(*(k_max,) * grid.dim)]
    study = BifurcationStudy(
        lams=lams,
        stress_unit=np.full((len(lams), grid.dim, grid.dim), np.nan),
        stress_super=np.full((len(lams), grid.dim, grid.dim), np.nan),
        stress_pert=np.full((len(lams), grid.dim, grid.dim), np.nan),
        betas={k: np.full(len(lams), np.nan) for k in ks},
        completed=False,
    )

    s_unit = s_super = s_pert = None
    warm_modes = None
    try:
        for i, lam in enumerate(lams):
            bc = protocol.macro_bc(lam, grid.dim)
            s_unit = _solve_step(grid, model, bc, params, policy, s_unit,
                                 "unit-cell", lam)
            study.stress_unit[i] = macro_stress(grid, s_unit)

            sweep = stability_sweep(grid, model, s_unit, k_max=k_max,
                                    seed=seed, p0_map=warm_modes,
                                    tol_beta=stability_tol)
            warm_modes = {res.k: res.p for res in sweep}
            for res in sweep:
                study.betas[res.k][i] = res.beta

            if s_super is None:
                s_super = tile_state(grid, s_unit, 2)
            s_super = _solve_step(grid2, model2, bc, params, policy,
                                  s_super, "supercell", lam)
            study.stress_super[i] = macro_stress(grid2, s_super)

            if s_pert is None:
                s_pert = tile_state(grid, s_unit, 2)
            if perturb_amplitude > 0.0:
                # seed the branch with the period-doubling eigenmode;
                # fall back to the softest multi-cell mode
                k22 = (2,) * grid.dim
                multi = [rr for rr in sweep if max(rr.k) > 1]
                lead = next((rr for rr in multi if rr.k == k22),
                            min(multi, key=lambda rr: rr.beta))
                v = mode_to_perturbation(grid, lead, perturb_amplitude)
                if lead.k != k22:
                    v = np.tile(v, tuple(2 // kk for kk in lead.k) + (1,))
                perturb_state(grid2, s_pert, v)
            s_pert = _solve_step(grid2, model2, bc, params, policy,
                                 s_pert, "perturbed supercell", lam)
            study.stress_pert[i] = macro_stress(grid2, s_pert)

            if callback is not None:
                callback(i, lam, study)
    except ConvergenceError as err:
        err.partial = study
        raise
    study.completed = True
    return study


# =========================================================================
# LCE protocols
# =========================================================================

@dataclass
class StepRecord:
    """Macroscopic observables after one protocol step."""

    lam: float
    Fbar: np.ndarray             # (d, d) mean deformation
    nominal: np.ndarray          # (d, d) mean nominal stress
    true: np.ndarray             # (d, d) Cauchy stress
    S: np.ndarray                # (3, 3) orientation tensor
    outer_iters: int
    n_field: np.ndarray | None = None


@dataclass
class ProtocolStudy:
    """Record sequence of a loading run plus the final solver state."""

    records: list = field(default_factory=list)
    reference: np.ndarray | None = None
    state: ADMMState | None = None
    completed: bool = False

    @property
    def lams(self):
        return np.array([r.lam for r in self.records])

    @property
    def nominal(self):
        return np.array([r.nominal for r in self.records])

    @property
    def true(self):
        return np.array([r.true for r in self.records])

    @property
    def S(self):
        return np.array([r.S for r in self.records])


def relax_zero_stress(grid: Grid, model, params: SolverParams | None = None,
                      policy=None, dt: float = 0.0, max_steps: int = 200,
                      stress_tol: float = 1e-4,
                      state: ADMMState | None = None,
                      callback=None) -> ADMMState:
    """Relax to the stress-free state under all-stress-controlled zero.

    With viscosity and dt > 0 this takes implicit time steps until the
    mean stress norm falls below stress_tol * mu; without dissipation a
    single equilibrium solve settles it.
    """
    if params is None:
        params = SolverParams()
    if policy is None:
        policy = RatioToDual()
    if max_steps < 1:
        raise ParameterError("max_steps must be at least 1")
    d = grid.dim
    bc = MacroBC.stress(np.zeros((d, d)))
    if state is None:
        state = init_state(grid, model, bc, params)
    viscous = dt > 0.0 and (getattr(model, "nu_F", 0.0) > 0.0
                            or getattr(model, "nu_n", 0.0) > 0.0)
    level = np.inf
    for step in range(max_steps):
        if viscous:
            begin_time_step(state)
        state, ok = solve(grid, model, bc, params, policy=policy,
                          state=state, dt=dt if viscous else 0.0,
                          raise_on_max=False)
        if not ok:
            raise ConvergenceError(
                f"zero-stress relaxation stalled at step {step}",
                history=state.history)
        level = np.linalg.norm(macro_stress(grid, state)) / model.mu_rep
        if callback is not None:
            callback(step, level, state)
        if level < stress_tol:
            return state
        if not viscous:
            break
    if level >= stress_tol:
        raise ConvergenceError(
            f"mean stress {level:.3e} did not relax below {stress_tol}")
    return state


def run_lce_protocol(grid: Grid, model, protocol: ProtocolSpec,
                     params: SolverParams | None = None, policy=None,
                     relax: bool = True, seed: int = 0,
                     perturb: float = 1e-4,
                     store_fields_at=(), callback=None) -> ProtocolStudy:
    """Load a (relaxed) specimen through the protocol schedule.

    Each step warm-starts from the previous configuration with a small
    seeded perturbation of the local deformation field, takes one
    implicit time step of size protocol.dt (quasistatic when zero), and
    records mean nominal stress, Cauchy stress, and the orientation
    tensor. Stretch values are relative to the relaxed reference.
    ``store_fields_at`` lists stretch values whose director field is
    kept in the record.

    On solver failure the partial study is attached to the raised error
    as ``partial``. Local solves default to the dual-ratio inexact
    policy; pass another policy to override.
    """
    if params is None:
        params = SolverParams()
    if policy is None:
        policy = RatioToDual()
    if protocol.kind == "eb_compression":
        raise ConfigurationError(
            "the compression protocol belongs to the composite study")
    study = ProtocolStudy()
    state = relax_zero_stress(grid, model, params, policy=policy,
                              dt=protocol.dt) if relax else None
    if state is None:
        bc0 = protocol.macro_bc(protocol.lam_start, grid.dim)
        state = init_state(grid, model, bc0, params)
    ref = state.u_mean.copy()
    study.reference = ref
    viscous = protocol.dt > 0.0 and (model.nu_F > 0.0 or model.nu_n > 0.0)
    store = np.asarray(store_fields_at, dtype=float)

    try:
        for step, lam in enumerate(protocol.schedule()):
            bc = protocol.macro_bc(lam, grid.dim, reference=ref)
            if viscous:
                begin_time_step(state)
            if perturb > 0.0:
                rng = np.random.default_rng(
                    np.random.SeedSequence((seed, step)))
                state.F = state.F + perturb * rng.standard_normal(
                    state.F.shape)
            state, ok = solve(grid, model, bc, params, policy=policy,
                              state=state,
                              dt=protocol.dt if viscous else 0.0,
                              raise_on_max=False)
            if not ok:
                raise ConvergenceError(
                    f"protocol step at stretch {lam:.6g} did not converge",
                    history=state.history)
            nom = macro_stress(grid, state)
            n = (model.director(state.internal)
                 if hasattr(model, "director") else None)
            keep = store.size and np.any(
                np.isclose(store, lam, atol=1e-9 + 0.5 *
                           abs(protocol.lam_step)))
            rec = StepRecord(
                lam=float(lam), Fbar=state.u_mean.copy(), nominal=nom,
                true=true_stress(nom, state.u_mean),
                S=(orientation_tensor(n) if n is not None
                   else np.zeros((3, 3))),
                outer_iters=state.outer_iter,
                n_field=n.copy() if keep and n is not None else None)
            study.records.append(rec)
            if callback is not None:
                callback(step, lam, state, rec)
    except ConvergenceError as err:
        err.partial = study
        study.state = state
        raise
    study.state = state
    study.completed = True
    return study
