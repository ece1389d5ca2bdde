"""Stochastic optimization of distributionally robust objectives."""
from .core import (
    EstimatorOutput,
    InnerSolution,
    Kind,
    LossBatch,
    RobustSpec,
    Weights,
    chi2_divergence,
    kl_divergence,
)
from .inner import (
    solve,
    solve_chi2_con,
    solve_chi2_pen,
    solve_cvar,
    solve_kl_cvar,
)
from .estimators import MlmcConfig, make_estimator, minibatch_estimate, mlmc_estimate, stream
from .optim import SgmConfig, make_evaluator, project_ball, run_nesterov, run_sgm
from .doubling import DoublingConfig, doubling_minimize, lambda_intervals

__version__ = "0.1.0"

__all__ = [
    "EstimatorOutput", "InnerSolution", "Kind", "LossBatch", "RobustSpec", "Weights",
    "chi2_divergence", "kl_divergence", "solve", "solve_chi2_con", "solve_chi2_pen",
    "solve_cvar", "solve_kl_cvar", "MlmcConfig", "make_estimator", "minibatch_estimate",
    "mlmc_estimate", "stream", "SgmConfig", "make_evaluator", "run_nesterov", "run_sgm", "project_ball",
    "DoublingConfig", "doubling_minimize", "lambda_intervals",
]
