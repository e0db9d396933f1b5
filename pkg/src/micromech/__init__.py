"""micromech: operator-split spectral solver for periodic finite-strain
micromechanics with internal variables, plus Bloch-wave stability analysis.

The solver alternates pointwise constitutive updates, a global spectral
projection onto compatible deformation fields, and a multiplier ascent on
the compatibility constraint; penalty adaptation and inexact local policies
keep the two halves balanced. Scenario drivers reproduce a composite
bifurcation study and liquid-crystal-elastomer microstructure evolution.
"""

from __future__ import annotations

from .errors import (
    ConfigurationError,
    ConvergenceError,
    DivergenceError,
    InadmissibleStateError,
    MicromechError,
    ParameterError,
    SnapshotError,
)
from .grid import (
    FrequencySet,
    Grid,
    compat_residual,
    discrete_div,
    discrete_grad,
    forward_transform,
    inverse_transform,
    mean_field,
    modified_symbols,
    rms,
)
from .materials import (
    LiquidCrystalElastomer,
    LocalStats,
    MaterialModel,
    MooneyRivlin,
    QuadraticMaterial,
    step_length_sqrt,
    step_length_tensor,
)
from .projection import MacroBC, helmholtz_project
from .solver import (
    ADMMState,
    ExactAll,
    FractionConverged,
    LocalPolicy,
    RatioToDual,
    Residuals,
    SolverParams,
    equilibrium_residual,
    macro_stress,
    solve,
)
from .stability import (
    BlochResult,
    bloch_min_eigen,
    bloch_symbols,
    first_unstable,
    mode_to_perturbation,
    stability_sweep,
    tangent_field,
)
from .scenarios import (
    BifurcationStudy,
    CompatibilityResult,
    MicrostructureSpec,
    ProtocolSpec,
    ProtocolStudy,
    StepRecord,
    build_composite,
    check_stripe_compatibility,
    composite_moduli,
    generate_polydomain_n0,
    make_stripe_n0,
    orientation_tensor,
    perturb_state,
    relax_zero_stress,
    run_bifurcation,
    run_lce_protocol,
    tile_field,
    tile_state,
    true_stress,
)
from .threads import available_cores, get_workers, set_workers

__version__ = "0.1.0"
