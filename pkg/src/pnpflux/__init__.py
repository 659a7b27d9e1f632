"""Steady quasi-1D Poisson-Nernst-Planck solver with an adaptive moving mesh,
closed-form flux asymptotics, and (q0, V) flux-ratio bifurcation diagrams."""

from .model import (
    BoundaryConditions,
    ChannelGeometry,
    ExcessModel,
    IonSpecies,
    PermanentCharge,
    PhysicalParameters,
    PnpProblem,
    ValidationError,
    channel_area,
    cumulative_resistance,
    default_species,
    mu_hard_sphere,
    mu_ideal,
    nondimensionalize,
    packing_fraction,
    paper_problem,
    permanent_charge_density,
)
from .fem import (
    DiscreteSolution,
    FluxReport,
    Mesh,
    SolveError,
    SolverControls,
    assemble_residual,
    compute_fluxes,
    electrochemical_profile,
    initial_guess,
    solve_nonlinear,
    solve_with_continuation,
)
from .mmpde import (
    AdaptResult,
    MeshIterate,
    MonitorConfig,
    MonitorSamples,
    adapt_and_solve,
    energy_gradient,
    equidistribute,
    equidistribution_defect,
    evolve_computational_mesh,
    mesh_energy,
    monitor,
    recover_physical_mesh,
    second_derivative_estimate,
)
from .asymptotics import (
    GeometryMoments,
    LargeQExpansion,
    Regime,
    SmallQExpansion,
    beta1_root,
    classify_small_q,
    flux_ratio,
    gamma_threshold,
    large_q_critical_voltages,
    large_q_expansion,
    lambda2_large_q_limit,
    small_q_critical_voltages,
    small_q_expansion,
)
from .scan import (
    AxisSpec,
    BifurcationPoint,
    ContourSet,
    GridSpec,
    ProblemTemplate,
    RatioSurface,
    build_surface,
    classify_regions,
    detect_saddle_nodes,
    internal_profiles,
    lambda_unity_voltage,
    sweep_q,
    sweep_v,
    trace_unity_contours,
)

__version__ = "0.1.0"
