"""Explicit splitting scalar-auxiliary-variable (SSAV) integrator for kinetic
Langevin dynamics, with a benchmark harness for convergence, energy and
invariant-measure studies."""

from .model import (
    AnalyticDensity,
    ModelSpec,
    Potential,
    bimodal_density,
    builtin_bimodal,
    builtin_double_well,
    builtin_gaussian_mixture,
    grad_check,
    hamiltonian,
    load_model,
    model_from_dict,
    modified_energy,
    sav_floor_check,
    trace_norm,
)
from .sav_core import (
    AssumptionViolation,
    AugmentedState,
    StepScratch,
    i_factor,
    initial_state,
    q_vector,
    rho_init,
    sav_radicand,
    step_scratch,
)
from .integrators import (
    NoConvergence,
    StepNoise,
    TrajectoryRecord,
    direct_noise_stream,
    em_step,
    ou_substep,
    run_trajectory,
    ssav_deterministic_substep,
    ssav_implicit_oracle,
    ssav_step,
)
from .noise import (
    AlignmentError,
    NoisePlan,
    compose_increment,
    compose_ou,
    fine_pair_covariance,
    sample_fine_pairs,
)

__version__ = "0.1.0"
