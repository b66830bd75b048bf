"""Pilot-wave trajectory simulator for crossing-path interference experiments.

The wave function is kept as a finite sum of spin-labeled Gaussian product
branches and evolved analytically between impulsive unitary events (beam
splitting, which-path detector couplings, pointer conversions).  Particle
configurations ride the velocity field derived from that state, and the
ensemble layer samples, integrates and scores whole distributions of them.
"""

from bohmsim.packets import (
    Branch,
    EventKind,
    GaussianPacket,
    Particle,
    ParticleRegistry,
    SpinLabel,
    UnitaryEvent,
    WaveFunction,
    apply_event,
    gradient_at,
    norm,
    packet_evolve,
    spinor_components_at,
)
from bohmsim.guidance import (
    LineSpec,
    Trajectory,
    VacuumRegionError,
    branch_weights_at,
    current_across_line,
    integrate_trajectory,
    min_pairwise_separation,
    velocity_at,
)
from bohmsim.scenarios import (
    CompiledScenario,
    OutcomeRecord,
    ScenarioGeometry,
    ScenarioSpec,
    ScenarioParseError,
    ScenarioValidationError,
    builtin_scenario,
    classify_outcome,
    compile_scenario,
    parse_scenario_file,
    render_scenario,
    verify_overlap_spin,
)
from bohmsim.ensemble import (
    EnsembleReport,
    SamplingPlan,
    delayed_choice_flip_test,
    equivariance_check,
    no_signaling_compare,
    run_ensemble,
    sample_initial,
)

__version__ = "0.1.0"

__all__ = [
    "Branch",
    "CompiledScenario",
    "EnsembleReport",
    "EventKind",
    "GaussianPacket",
    "LineSpec",
    "OutcomeRecord",
    "Particle",
    "ParticleRegistry",
    "SamplingPlan",
    "ScenarioGeometry",
    "ScenarioParseError",
    "ScenarioSpec",
    "ScenarioValidationError",
    "SpinLabel",
    "Trajectory",
    "UnitaryEvent",
    "VacuumRegionError",
    "WaveFunction",
    "apply_event",
    "branch_weights_at",
    "builtin_scenario",
    "classify_outcome",
    "compile_scenario",
    "current_across_line",
    "delayed_choice_flip_test",
    "equivariance_check",
    "gradient_at",
    "integrate_trajectory",
    "min_pairwise_separation",
    "no_signaling_compare",
    "norm",
    "packet_evolve",
    "parse_scenario_file",
    "render_scenario",
    "run_ensemble",
    "sample_initial",
    "spinor_components_at",
    "velocity_at",
    "verify_overlap_spin",
]
