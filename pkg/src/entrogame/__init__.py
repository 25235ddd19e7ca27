"""Grid transfer operators, entropy functionals and best-response games
for multi-channel linear feedback systems, plus a stochastic perturbation
layer for resilience studies.
"""

from .errors import (
    ConditioningError,
    ConfigurationError,
    DivergenceError,
    DomainEscapeError,
    EmptyStrategyError,
    NonConvergenceError,
    NumericalError,
    SupportError,
    ToolkitError,
    TrajectoryEscapeError,
)
from .system import (
    FeedbackGain,
    FeedbackProfile,
    MultiChannelSystem,
    ScheduleSegment,
    TransitionMatrix,
    closed_loop_matrix,
    decompose_transition,
    flow_map,
    integrate_transition,
)
from .transfer import (
    DensityVector,
    ObservableVector,
    Partition,
    StationaryResult,
    UlamMatrix,
    adjoint_residual,
    apply_fp,
    apply_koopman,
    birkhoff_average,
    build_ulam,
    invariance_check,
    l1_distance,
    stationary_density,
)
from .entropy import (
    EntropyReport,
    entropy,
    expectation,
    gibbs_gap,
    relative_entropy,
)
from .game import (
    ContractionEstimate,
    DecayTrace,
    EquilibriumResult,
    GameConfig,
    OperatorCache,
    StrategySpace,
    VerificationReport,
    best_response,
    contraction_estimate,
    criterion,
    entropy_decay_trace,
    find_equilibrium,
    sample_ball_pairs,
    verify_equilibrium,
)
from .perturb import (
    NoiseSpec,
    ResilienceReport,
    SdePathConfig,
    build_stochastic_ulam,
    ensemble_endpoints,
    perturbed_stationary,
    resilience_report,
    simulate_sde,
)

__version__ = "0.1.0"

__all__ = [
    "ToolkitError",
    "ConfigurationError",
    "NumericalError",
    "DivergenceError",
    "ConditioningError",
    "DomainEscapeError",
    "SupportError",
    "NonConvergenceError",
    "EmptyStrategyError",
    "TrajectoryEscapeError",
    "MultiChannelSystem",
    "ScheduleSegment",
    "FeedbackGain",
    "FeedbackProfile",
    "TransitionMatrix",
    "closed_loop_matrix",
    "integrate_transition",
    "decompose_transition",
    "flow_map",
    "Partition",
    "DensityVector",
    "ObservableVector",
    "UlamMatrix",
    "StationaryResult",
    "build_ulam",
    "apply_fp",
    "apply_koopman",
    "adjoint_residual",
    "invariance_check",
    "l1_distance",
    "stationary_density",
    "birkhoff_average",
    "EntropyReport",
    "entropy",
    "relative_entropy",
    "gibbs_gap",
    "expectation",
    "StrategySpace",
    "GameConfig",
    "OperatorCache",
    "criterion",
    "best_response",
    "find_equilibrium",
    "EquilibriumResult",
    "verify_equilibrium",
    "VerificationReport",
    "contraction_estimate",
    "ContractionEstimate",
    "sample_ball_pairs",
    "entropy_decay_trace",
    "DecayTrace",
    "NoiseSpec",
    "SdePathConfig",
    "simulate_sde",
    "ensemble_endpoints",
    "build_stochastic_ulam",
    "perturbed_stationary",
    "resilience_report",
    "ResilienceReport",
    "__version__",
]
