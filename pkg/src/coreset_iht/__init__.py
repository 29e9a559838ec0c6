"""Bayesian coreset construction by non-negative k-sparse least squares."""

from .baselines import uniform_coreset
from .evaluation import (
    EnumerationBudgetError,
    InvariantEntry,
    InvariantReport,
    RipConstants,
    brute_force_optimum,
    check_iterative_invariant,
    contraction_factor,
    coreset_kl,
    decay_rate,
    estimate_rip,
    gaussian_kl,
    make_planted_problem,
    map_l2_distance,
    nnls_on_support,
)
from .models import (
    BayesianModel,
    CurvatureError,
    Dataset,
    GaussianDist,
    LikelihoodError,
    NewtonConvergenceError,
    ProjectionSet,
    build_projection,
    conjugate_posterior,
    full_data_posterior,
    laplace_approximation,
    load_csv_dataset,
    log_likelihood,
    posterior_approximation,
    save_csv_dataset,
    synth_gaussian_dataset,
    synth_glm_dataset,
    synth_radial_basis_model,
)
from .problem import (
    SparseRegressionProblem,
    WeightVector,
    gradient,
    objective,
    project_topk_excluding,
    project_topk_nonneg,
    restrict,
)
from .solvers import (
    DivergenceError,
    SolverConfig,
    SolverTrace,
    Termination,
    TraceRecord,
    line_search_step,
    momentum_coefficient,
    solve_aiht,
    solve_aiht_batched,
    solve_aiht_debias,
    solve_vanilla_iht,
    stochastic_gradient,
)

__all__ = [
    "BayesianModel",
    "CurvatureError",
    "Dataset",
    "DivergenceError",
    "EnumerationBudgetError",
    "GaussianDist",
    "InvariantEntry",
    "InvariantReport",
    "LikelihoodError",
    "NewtonConvergenceError",
    "ProjectionSet",
    "RipConstants",
    "SolverConfig",
    "SolverTrace",
    "SparseRegressionProblem",
    "Termination",
    "TraceRecord",
    "WeightVector",
    "brute_force_optimum",
    "build_projection",
    "check_iterative_invariant",
    "conjugate_posterior",
    "contraction_factor",
    "coreset_kl",
    "decay_rate",
    "estimate_rip",
    "full_data_posterior",
    "gaussian_kl",
    "gradient",
    "laplace_approximation",
    "line_search_step",
    "load_csv_dataset",
    "log_likelihood",
    "make_planted_problem",
    "map_l2_distance",
    "momentum_coefficient",
    "nnls_on_support",
    "objective",
    "posterior_approximation",
    "project_topk_excluding",
    "project_topk_nonneg",
    "restrict",
    "save_csv_dataset",
    "solve_aiht",
    "solve_aiht_batched",
    "solve_aiht_debias",
    "solve_vanilla_iht",
    "stochastic_gradient",
    "synth_gaussian_dataset",
    "synth_glm_dataset",
    "synth_radial_basis_model",
    "uniform_coreset",
]

__version__ = "0.1.0"
