"""Numerical health checks for correlation and weighting matrices.

The warning codes below are part of the command-line report format and must
stay stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, MRError
from .model import CorrelationMatrix, SummarySet

NEAR_SINGULAR = "NEAR_SINGULAR"
UNRELIABLE = "UNRELIABLE"
SINGULAR = "SINGULAR"
NOT_PD = "NOT_POSITIVE_DEFINITE"
NEG_VARIANCE = "NEG_VARIANCE"
RIDGE_SENSITIVE = "RIDGE_SENSITIVE"
RIDGE_ADJUSTED = "RIDGE_ADJUSTED"

NEAR_SINGULAR_COND = 1e6
UNRELIABLE_COND = 1e12


@dataclass(frozen=True)
class DiagnosticsReport:
    determinant: float
    log_abs_determinant: float
    condition_number: float
    max_abs_inverse_element: float
    min_eigenvalue: float
    variance_valid: bool = True
    singular: bool = False
    warnings: tuple[str, ...] = ()

    def with_variance(self, valid: bool) -> "DiagnosticsReport":
        warnings = self.warnings
        if not valid and NEG_VARIANCE not in warnings:
            warnings = warnings + (NEG_VARIANCE,)
        return DiagnosticsReport(self.determinant, self.log_abs_determinant,
                                 self.condition_number, self.max_abs_inverse_element,
                                 self.min_eigenvalue, valid, self.singular, warnings)

    def add_warning(self, code: str) -> "DiagnosticsReport":
        if code in self.warnings:
            return self
        return DiagnosticsReport(self.determinant, self.log_abs_determinant,
                                 self.condition_number, self.max_abs_inverse_element,
                                 self.min_eigenvalue, self.variance_valid, self.singular,
                                 self.warnings + (code,))

    def to_dict(self) -> dict:
        return {
            "determinant": self.determinant,
            "log_abs_determinant": self.log_abs_determinant,
            "condition_number": self.condition_number,
            "max_abs_inverse_element": self.max_abs_inverse_element,
            "min_eigenvalue": self.min_eigenvalue,
            "variance_valid": self.variance_valid,
            "singular": self.singular,
            "warnings": list(self.warnings),
        }


def is_singular(singular_values: np.ndarray, dim: int | None = None) -> bool:
    """Rank test with the usual ``max(M, N) * eps * s_max`` tolerance."""
    s = np.asarray(singular_values)
    n = dim or s.size
    return not (s[-1] > s[0] * n * np.finfo(float).eps)


def assess(matrix) -> DiagnosticsReport:
    """Report determinant, conditioning and inverse size of a square matrix.

    Condition numbers above 1e6 raise ``NEAR_SINGULAR``; above 1e12 also
    ``UNRELIABLE``. The maximum absolute inverse element is only computed when
    the matrix is symmetric positive definite, and is NaN otherwise.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError(f"expected a square matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise InputError("matrix contains non-finite entries")
    symmetric = np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max()))
    s = np.linalg.svd(m, compute_uv=False)
    if symmetric:
        min_eig = float(np.linalg.eigvalsh((m + m.T) / 2)[0])
    else:
        min_eig = float(np.linalg.eigvals(m).real.min())
    warnings: list[str] = []
    if s[0] == 0 or is_singular(s):
        warnings += [NEAR_SINGULAR, UNRELIABLE, SINGULAR]
        if min_eig <= 0:
            warnings.append(NOT_PD)
        return DiagnosticsReport(0.0, -math.inf, math.inf, math.nan, min_eig,
                                 singular=True, warnings=tuple(warnings))
    sign, logdet = np.linalg.slogdet(m)
    cond = float(s[0] / s[-1])
    if cond > NEAR_SINGULAR_COND:
        warnings.append(NEAR_SINGULAR)
    if cond > UNRELIABLE_COND:
        warnings.append(UNRELIABLE)
    max_inv = math.nan
    if symmetric and min_eig > 0:
        max_inv = float(np.abs(np.linalg.inv(m)).max())
    elif min_eig <= 0:
        warnings.append(NOT_PD)
    return DiagnosticsReport(float(sign * math.exp(logdet)) if logdet < 700 else math.copysign(math.inf, sign),
                             float(logdet), cond, max_inv, min_eig, warnings=tuple(warnings))


def ridge_adjust(corr: CorrelationMatrix, epsilon: float) -> CorrelationMatrix:
    """Add ``epsilon`` to the diagonal. The result is marked as ridge-adjusted."""
    if not epsilon > 0:
        raise InputError("ridge epsilon must be positive")
    return CorrelationMatrix(corr.ids, corr.values, ridge=corr.ridge + epsilon)


@dataclass(frozen=True)
class RidgeSensitivity:
    epsilon: float
    estimate_before: float
    se_before: float
    estimate_after: float
    se_after: float
    shift_in_se: float
    flagged: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def ridge_sensitivity(summary: SummarySet, corr: CorrelationMatrix, epsilon: float,
                      estimator=None) -> RidgeSensitivity:
    """Compare the correlated IVW estimate before and after a ridge adjustment.

    The shift is measured in units of the unadjusted fixed-effect SE and is
    flagged when it exceeds 1. A failure of the unadjusted fit is always
    flagged.
    """
    if estimator is None:
        from .estimators import ivw_correlated as estimator
    after = estimator(summary, ridge_adjust(corr, epsilon))
    try:
        before = estimator(summary, corr)
    except MRError as exc:
        return RidgeSensitivity(epsilon, math.nan, math.nan, after.estimate, after.se_fixed,
                                math.inf, True, f"unadjusted fit failed: {exc.code}")
    if not math.isfinite(before.se_fixed):
        return RidgeSensitivity(epsilon, before.estimate, before.se_fixed, after.estimate,
                                after.se_fixed, math.inf, True, "unadjusted SE undefined")
    shift = abs(after.estimate - before.estimate) / before.se_fixed
    return RidgeSensitivity(epsilon, before.estimate, before.se_fixed, after.estimate,
                            after.se_fixed, shift, shift > 1.0)


def variance_explained(summary: SummarySet) -> np.ndarray:
    """Per-variant ``beta_x**2 * maf * (1 - maf)``.

    ``beta_x`` must be in standard-deviation units of the risk factor. Note
    the missing factor 2 relative to the binomial genotype variance
    ``2 * maf * (1 - maf)``; the formula is deliberately left without it.
    """
    maf = summary.maf
    if maf is None:
        raise InputError(f"maf missing for: {list(summary.ids)}")
    missing = [summary.ids[i] for i in np.flatnonzero(~np.isfinite(maf))]
    if missing:
        raise InputError(f"maf missing for: {missing}")
    return summary.beta_x ** 2 * maf * (1 - maf)
