"""Treatment-specific means and intraclass correlations for
cluster-randomized binary trials with informatively missing outcomes.

Estimation is by second-order generalized estimating equations, plain,
inverse-probability weighted, or doubly robust, solved with deterministic
or subsampled stochastic Fisher scoring; a stacked sandwich estimator
supplies standard errors, and a simulation engine plus a timing harness
round out the package.
"""

__version__ = "1.0.0"

from .errors import Sgee2Error
from .model import ClusterData, Dataset, ModelSpec, ParameterVector
from .estimators import (
    EstimatorChoice,
    FitResult,
    ScoringControls,
    fit_complete_case,
    fit_dr_gee2,
    fit_ipw_gee2,
    fit_omee,
    fit_pipeline,
    fit_psee,
)
from .stochastic import (
    SamplingPlan,
    par_sgee2,
    s_dr_gee2,
    s_ipw_gee2,
    s_omee,
    s_psee,
)
from .inference import sandwich_variance, wald
from .simgen import (
    EstimatorRequest,
    GenerationConfig,
    generate_covariates,
    marginal_truth,
    parzen_generate,
    random_intercept_generate,
    realized_truth,
    run_replicates,
)
from .bench import bench_grid, compare_backends

__all__ = [
    "__version__",
    "Sgee2Error",
    "ClusterData",
    "Dataset",
    "ModelSpec",
    "ParameterVector",
    "EstimatorChoice",
    "FitResult",
    "ScoringControls",
    "fit_complete_case",
    "fit_dr_gee2",
    "fit_ipw_gee2",
    "fit_omee",
    "fit_pipeline",
    "fit_psee",
    "SamplingPlan",
    "par_sgee2",
    "s_dr_gee2",
    "s_ipw_gee2",
    "s_omee",
    "s_psee",
    "sandwich_variance",
    "wald",
    "EstimatorRequest",
    "GenerationConfig",
    "generate_covariates",
    "marginal_truth",
    "parzen_generate",
    "random_intercept_generate",
    "realized_truth",
    "run_replicates",
    "bench_grid",
    "compare_backends",
]
