"""Stochastic Cucker-Smale particles with multiplicative noise in a harmonic well."""

from .diagnostics import (
    FlockingReport,
    KineticRegimeReport,
    LyapunovParams,
    flocking_check,
    generator_lv,
    kinetic_regime,
    lyapunov_v,
    moment_ode_oracle,
    rate_fit,
    variance_functionals,
)
from .engine import SimulationFault, StepConfig, TrajectoryRecord, em_step, fan_out, init_uniform, simulate
from .experiments import ExperimentRefused, ExperimentSpec, Verdict, figure_preset, run_experiment
from .mckean import (
    CouplingRecord,
    FieldEstimate,
    McKeanConstants,
    McKeanEnsemble,
    coupled_run,
    coupled_runs,
    empirical_fields,
    mckean_constants,
    mckean_step,
    self_consistent_mckean,
)
from .model import (
    CenteredState,
    ContractViolation,
    KernelSpec,
    MacroState,
    ModelParams,
    ParticleState,
    diffusion,
    drift,
    kernel_eval,
    macro_closed_form,
    macro_decompose,
    parse_kernel,
    recompose,
)
from .rng import NoisePath, derive_seed

__version__ = "0.1.0"
