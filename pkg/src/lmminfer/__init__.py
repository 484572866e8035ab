"""Simultaneous inference for mixed parameters in linear mixed models.

Builds BLUP/EBLUP predictions of cluster-level mixed parameters,
estimates the joint covariance of their errors under the marginal and
the conditional law, and turns both into simultaneous confidence
ellipsoids, linear-hypothesis tests, Tukey all-pairs screens and a
reproducible Monte Carlo harness.
"""

from .covariance import AMatrix, CovEstimate, a_matrix, lambda_hat, sigma_conditional, sigma_marginal
from .estimation import (
    VarianceFit,
    fit_henderson3_ner,
    fit_reml,
    gls_beta,
    known_fit,
    restricted_loglik,
)
from .estimator import NestedErrorRegression
from .exceptions import (
    DegenerateCovarianceError,
    LmmError,
    NothingToDoError,
    NumericError,
    RankError,
    StructuralError,
)
from .inference import (
    ConditionalContext,
    EllipsoidTest,
    LinearHypothesis,
    ProjectionResult,
    TukeyResult,
    ellipsoid_contains,
    project_onto_ellipsoid,
    test_linear,
    tukey_all_pairs,
    tukey_interval,
)
from .model import (
    ClusterBlock,
    CovarianceStructure,
    LmmDataset,
    MixedTargets,
    NerSpec,
    VarianceParams,
    build_ner,
    check_tukey_conditions,
    icc,
    marginal_cov,
    ner_structure,
)
from .prediction import BlupComponents, Prediction, blup, blup_components, eblup
from .quantiles import (
    chi2_quantile,
    noncentral_chi2_quantile,
    range_quantile,
)
from .simulation import (
    CoverageReport,
    SimConfig,
    generate_population,
    run_clusterwise,
    run_coverage,
    run_marginal_table,
    run_power_linear,
    run_power_tukey,
)

__version__ = "0.1.0"

__all__ = [
    "AMatrix", "CovEstimate", "a_matrix", "lambda_hat", "sigma_conditional",
    "sigma_marginal", "VarianceFit", "fit_henderson3_ner", "fit_reml",
    "gls_beta", "known_fit", "restricted_loglik", "NestedErrorRegression",
    "DegenerateCovarianceError", "LmmError", "NothingToDoError", "NumericError",
    "RankError", "StructuralError", "ConditionalContext", "EllipsoidTest",
    "LinearHypothesis", "ProjectionResult", "TukeyResult", "ellipsoid_contains",
    "project_onto_ellipsoid", "test_linear", "tukey_all_pairs", "tukey_interval",
    "ClusterBlock", "CovarianceStructure", "LmmDataset", "MixedTargets",
    "NerSpec", "VarianceParams", "build_ner", "check_tukey_conditions", "icc",
    "marginal_cov", "ner_structure", "BlupComponents", "Prediction", "blup",
    "blup_components", "eblup", "chi2_quantile", "noncentral_chi2_quantile",
    "range_quantile", "CoverageReport", "SimConfig", "generate_population",
    "run_clusterwise", "run_coverage", "run_marginal_table", "run_power_linear",
    "run_power_tukey",
]
