"""Kernel bilevel optimization: inner RKHS solves, hypergradients, bilevel
gradient descent, and population oracles for studying generalization on
instrumental variable regression."""

from kbo.errors import (
    ConfigError,
    ContractViolation,
    ConvergenceError,
    InputError,
    KboError,
    NumericInputError,
    SingularityError,
)
from kbo.kernels import GramSet, KernelSpec, RffMap, eval_kernel, gram, rff_features, sample_rff
from kbo.losses import (
    DerivativeRecord,
    HyperShiftProblem,
    IvProblem,
    LossBundle,
    loss_bundle_eval,
)
from kbo.inner_solver import InnerSolution, solve_inner_closed_form, solve_inner_newton
from kbo.hypergrad import (
    BilevelProblem,
    EstimatorWorkspace,
    HypergradResult,
    IvPluginQuadratic,
    adjoint_solve,
    grad_implicit,
    grad_plugin,
    value_hat,
)
from kbo.optimizer import (
    ConstraintSet,
    LineSearchParams,
    Trajectory,
    gd_run,
    gradient_mapping,
    project,
    projected_gd_run,
)
from kbo.population_oracle import (
    QuadratureOracle,
    RffOracle,
    build_oracle,
    build_quadrature_oracle,
    oracle_grad,
    oracle_value,
)
from kbo.experiments import (
    IvDatasetConfig,
    StudyConfig,
    StudyReport,
    fit_slope,
    generate_iv_data,
    run_generalization_study,
)
from kbo.config import RunConfig, load_config, parse_config

__version__ = "0.1.0"
