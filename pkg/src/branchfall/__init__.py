"""branchfall: open-system wave packet dynamics and stochastic branch selection.

The package simulates a single 1D degree of freedom under position
decoherence, decomposes the evolving state into phase-space branches with a
coherent-state window POVM, extracts Born-weighted collapse trajectories
(effective jumps, guidance-equation paths, or spontaneous localization hits),
and checks how long those trajectories shadow the classical flow.
"""

from .errors import (
    BoundaryViolation,
    BranchfallError,
    EmptyTree,
    EscapeMass,
    EscapeSampled,
    ExplosionGuard,
    NodeRegion,
    NonHermitianState,
    PositivityError,
    PositivityWarning,
    WindowTooSmall,
)
from .qstate import (
    DensityMatrix,
    GridSpec,
    PhasePoint,
    WaveFunction,
    check_positivity,
    coherent_state,
    expectation,
    mean_phase_point,
    purity_and_entropy,
    variance,
)
from .dynamics import (
    EvolutionRecord,
    Potential,
    Propagator,
    cl_step,
    double_well_potential,
    evolve,
    free_potential,
    harmonic_potential,
    unitary_step,
)
from .pointer import (
    PhasePartition,
    POVMSet,
    SieveResult,
    build_povm,
    predictability_sieve,
    pvm_quality,
)
from .branching import (
    BranchNode,
    BranchTree,
    DecoherenceReport,
    ExplicitModel,
    branch_step,
    decoherence_functional,
    evolve_explicit,
    mixture_consistency,
    sample_trajectory,
    suggested_branch_interval,
    superorthogonality_overlap,
)
from .mechanisms import (
    BohmEnsemble,
    BohmRun,
    GRWHit,
    GRWParams,
    GRWRun,
    bohm_evolve,
    bohm_velocity,
    compatibility_score,
    grw_evolve,
)
from .ehrenfest import (
    HorizonResult,
    ResidualSeries,
    WidthSeries,
    classicality_horizon,
    dephasing_force_trace,
    ehrenfest_residual,
    marginal_widths,
    operator_widths,
)
from .reduction import (
    ClassicalTrajectory,
    PointResult,
    ReductionReport,
    ReductionSpec,
    bridge,
    classical_evolve,
    verify_reduction,
    within_margin,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "BranchfallError",
    "BoundaryViolation",
    "NonHermitianState",
    "PositivityError",
    "PositivityWarning",
    "WindowTooSmall",
    "EscapeMass",
    "EscapeSampled",
    "ExplosionGuard",
    "EmptyTree",
    "NodeRegion",
    "GridSpec",
    "PhasePoint",
    "WaveFunction",
    "DensityMatrix",
    "coherent_state",
    "expectation",
    "variance",
    "mean_phase_point",
    "purity_and_entropy",
    "check_positivity",
    "Potential",
    "Propagator",
    "EvolutionRecord",
    "free_potential",
    "harmonic_potential",
    "double_well_potential",
    "evolve",
    "unitary_step",
    "cl_step",
    "PhasePartition",
    "POVMSet",
    "SieveResult",
    "build_povm",
    "pvm_quality",
    "predictability_sieve",
    "BranchNode",
    "BranchTree",
    "DecoherenceReport",
    "ExplicitModel",
    "branch_step",
    "sample_trajectory",
    "mixture_consistency",
    "suggested_branch_interval",
    "evolve_explicit",
    "decoherence_functional",
    "superorthogonality_overlap",
    "GRWParams",
    "GRWHit",
    "GRWRun",
    "grw_evolve",
    "compatibility_score",
    "BohmEnsemble",
    "BohmRun",
    "bohm_velocity",
    "bohm_evolve",
    "WidthSeries",
    "ResidualSeries",
    "HorizonResult",
    "marginal_widths",
    "operator_widths",
    "ehrenfest_residual",
    "classicality_horizon",
    "dephasing_force_trace",
    "ClassicalTrajectory",
    "ReductionSpec",
    "PointResult",
    "ReductionReport",
    "classical_evolve",
    "bridge",
    "within_margin",
    "verify_reduction",
]
