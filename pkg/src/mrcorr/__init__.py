"""Mendelian randomization with many correlated genetic instruments."""

from .errors import (EmptyIntersection, InputError, MRError, NotPositiveDefinite,
                     NumericalError, SingularDesign, SingularWeightMatrix, UndefinedEstimate)
from .model import (CorrelationMatrix, SummarySet, VariantSummary, WeightKind, WeightMatrix,
                    align, build_omega, build_omega_x, build_psi, harmonize)
from .diagnostics import DiagnosticsReport, assess, ridge_adjust, ridge_sensitivity, variance_explained
from .selection import SelectionResult, pca_components, prune, stepwise_conditional
from .estimators import (CausalEstimate, IndividualData, allele_score_estimate, ivw_correlated,
                         ivw_correlated_cholesky, ivw_uncorrelated, multivariable_weights, pca_ivw,
                         summarize, two_stage_least_squares)

__version__ = "0.1.0"

__all__ = [
    "EmptyIntersection", "InputError", "MRError", "NotPositiveDefinite", "NumericalError",
    "SingularDesign", "SingularWeightMatrix", "UndefinedEstimate",
    "CorrelationMatrix", "SummarySet", "VariantSummary", "WeightKind", "WeightMatrix",
    "align", "build_omega", "build_omega_x", "build_psi", "harmonize",
    "DiagnosticsReport", "assess", "ridge_adjust", "ridge_sensitivity", "variance_explained",
    "SelectionResult", "pca_components", "prune", "stepwise_conditional",
    "CausalEstimate", "IndividualData", "allele_score_estimate", "ivw_correlated",
    "ivw_correlated_cholesky", "ivw_uncorrelated", "multivariable_weights", "pca_ivw",
    "summarize", "two_stage_least_squares",
]
