"""Fused multinomial logistic regression with summary-level external
machine-learning predictions, via empirical-likelihood moment constraints."""

from .errors import (
    BoundaryError,
    ConvergenceError,
    FusionError,
    SingularMatrixError,
    ValidationError,
)
from .types import (
    BasisSet,
    CoarseningMap,
    Constant,
    Coordinate,
    EstimateReport,
    ExternalPredictionSet,
    FusedParams,
    ParamLayout,
    PrimaryDataset,
    Spline,
    SplineColumn,
    build_phi_full,
    coarsen_label,
    eval_basis,
)
from .mnlogit import MleFit, class_probs, fit_mle, log_lik, probs_matrix, score_and_hessian
from .elfusion import (
    FmleFit,
    FusionProblem,
    MomentMatrix,
    el_weights,
    fit_fmle,
    moment_matrix,
    penalized_objective,
    profile_objective,
    solve_lambda,
)
from .inference import (
    BlockMatrices,
    BootstrapResult,
    CovDecomposition,
    EfficiencyDiagnostic,
    WaldCI,
    bootstrap_se,
    efficiency_diagnostic,
    empirical_blocks,
    normal_quantile,
    sigma_decomposition,
    sigma_sandwich,
    wald_ci,
)
from .simengine import (
    KnnPredictor,
    MarCheckResult,
    OraclePredictor,
    ReplicationTable,
    ScenarioConfig,
    class_prob_mse,
    gen_covariates,
    gen_labels,
    mar_moment_check,
    run_replications,
    train_knn_predictor,
)

__version__ = "0.1.0"
