"""Mean value operators, dynamic programming solver and gambling-house game
for the non-homogeneous p-Laplace problem ``Δ_p u = f``."""

import types as _types

__version__ = "0.1.0"

from pmvlab.constants import (
    DomainError,
    IdentitySweep,
    Params,
    TruncationBounds,
    derive_params,
    gm_identity_sweep,
    gm_objective,
    gm_truncation_error_bound,
    jp,
    truncated_weighted_gm,
    truncation_bounds,
)
from pmvlab.dpp import (
    BracketViolationError,
    CalibrationError,
    DPPProblem,
    DPPSolution,
    MonotonicityError,
    NonConvergenceError,
    SweepOperator,
    barrier_sub,
    barrier_super,
    dpp_apply,
    exterior_ball_barrier,
    poisson_fd_1d,
    radial_solution,
    solve,
    solve_bracketed,
    sweep_operator,
    uniform_bound,
)
from pmvlab.expansion import (
    BatteryCase,
    DegenerateFitError,
    ExpansionReport,
    a_expansion_error,
    battery,
    fit_rate,
    lr_expansion_error,
    mr_expansion_error,
    run_ladder,
    sup_gradient_error,
)
from pmvlab.fields import (
    AnalyticField,
    BallSampler,
    BallStats,
    CompositeField,
    Domain,
    Grid,
    GridField,
    OutOfHullError,
    ball_stats,
    ball_stats_many,
    get_sampler,
    interpolate,
    read_gridfield_csv,
    write_gridfield_csv,
)
from pmvlab.game import (
    AllCappedError,
    GameConfig,
    GameState,
    GameTranscript,
    Strategy,
    StrategyViolation,
    ValueEstimate,
    estimate_value,
    play_game,
    play_round,
    push_strategy,
    quasi_optimal_strategies,
    random_strategy,
    replay_payoff,
    submartingale_increments,
    write_transcripts_jsonl,
)
from pmvlab.operators import (
    CSearchConfig,
    OperatorVariant,
    SingularGradientError,
    a_by_laplacian_sign,
    a_minus,
    a_minus_many,
    a_plus,
    a_plus_many,
    a_select,
    kappa,
    l_r,
    m_r,
    p_laplacian_exact,
    p_laplacian_normalized_exact,
)

__all__ = [name for name, obj in list(globals().items())
           if not name.startswith("_") and not isinstance(obj, _types.ModuleType)]
__all__.append("__version__")
