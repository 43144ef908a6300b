"""Causal effect estimators.

Summary-data estimators work on :class:`~mrcorr.model.SummarySet` inputs;
the two-stage least squares and allele-score estimators take individual-level
data and serve as oracles for the summary-data methods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import diagnostics as diag
from .errors import (InputError, NotPositiveDefinite, SingularDesign,
                     SingularWeightMatrix, UndefinedEstimate)
from .model import CorrelationMatrix, SummarySet, build_omega, build_psi
from .selection import PCAResult, pca_components

Z_975 = 1.959964


@dataclass(frozen=True)
class CausalEstimate:
    """Point estimate with fixed- and random-effects standard errors.

    Undefined quantities are NaN: ``se_fixed``/``se_random`` when the
    weighted precision is not positive, ``residual_sigma`` with a single
    instrument.
    """

    estimate: float
    se_fixed: float
    se_random: float
    residual_sigma: float
    n_instruments: int
    method: str = ""
    variance_valid: bool = True
    diagnostics: diag.DiagnosticsReport | None = None

    @property
    def se_defined(self) -> bool:
        return math.isfinite(self.se_fixed)

    def se(self, effects: str = "fixed") -> float:
        if effects == "fixed":
            return self.se_fixed
        if effects == "random":
            return self.se_random
        raise ValueError(f"unknown effects model {effects!r}")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "estimate": self.estimate,
            "se_fixed": self.se_fixed,
            "se_random": self.se_random,
            "residual_sigma": self.residual_sigma,
            "n_instruments": self.n_instruments,
            "variance_valid": self.variance_valid,
            "diagnostics": None if self.diagnostics is None else self.diagnostics.to_dict(),
        }


@dataclass(frozen=True)
class IndividualData:
    """Genotypes (N x J allele counts), risk factor and outcome."""

    genotypes: np.ndarray
    risk_factor: np.ndarray
    outcome: np.ndarray
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        g = np.asarray(self.genotypes, dtype=float)
        if g.ndim == 1:
            g = g[:, None]
        x = np.asarray(self.risk_factor, dtype=float).ravel()
        y = np.asarray(self.outcome, dtype=float).ravel()
        n, j = g.shape
        if x.shape != (n,) or y.shape != (n,):
            raise InputError("risk factor and outcome must have one value per individual")
        if n <= j:
            raise InputError(f"need more individuals than variants (N={n}, J={j})")
        if not (np.isfinite(g).all() and np.isfinite(x).all() and np.isfinite(y).all()):
            raise InputError("individual-level data contain non-finite values")
        ids = tuple(self.ids) if self.ids else tuple(f"v{i + 1}" for i in range(j))
        if len(ids) != j:
            raise InputError("number of ids does not match genotype columns")
        const = [ids[i] for i in np.flatnonzero(np.ptp(g, axis=0) == 0)]
        if const:
            raise InputError(f"zero-variance genotype columns: {const}")
        for name, val in (("genotypes", g), ("risk_factor", x), ("outcome", y)):
            val = val.copy()
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.genotypes.shape[0]


# ---------------------------------------------------------------- summary data

def ivw_uncorrelated(summary: SummarySet) -> CausalEstimate:
    """IVW estimate treating variants as independent.

    Equivalent to weighted regression of ``beta_y`` on ``beta_x`` through the
    origin with weights ``se_y**-2``.
    """
    bx, by = summary.beta_x, summary.beta_y
    w = summary.se_y ** -2.0
    precision = float(np.sum(w * bx * bx))
    if precision == 0.0:
        raise UndefinedEstimate("all risk-factor associations are zero")
    est = float(np.sum(w * bx * by)) / precision
    se_fixed = precision ** -0.5
    J = len(summary)
    sigma = math.nan
    if J > 1:
        resid = by - est * bx
        sigma = math.sqrt(float(np.sum(w * resid * resid)) / (J - 1))
    return CausalEstimate(est, se_fixed, _random_se(se_fixed, sigma), sigma, J, "ivw")


def _random_se(se_fixed, sigma):
    if not math.isfinite(sigma):
        return se_fixed
    return se_fixed * max(sigma, 1.0)


def gls_ivw(bx, by, omega, method="ivw-corr") -> CausalEstimate:
    """Generalised least squares through the origin with covariance ``omega``.

    Works on raw arrays; used for both the correlated IVW estimate and the
    principal-components version. Raises :class:`SingularWeightMatrix` when
    ``omega`` is numerically rank deficient. A non-positive precision
    ``bx' omega^-1 bx`` leaves the point estimate in place but makes the
    standard errors NaN.
    """
    omega = np.asarray(omega, dtype=float)
    J = len(bx)
    s = np.linalg.svd(omega, compute_uv=False)
    if s[0] == 0 or diag.is_singular(s):
        raise SingularWeightMatrix(f"weighting matrix is singular (J={J})")
    a = np.linalg.solve(omega, np.column_stack([bx, by]))
    precision = float(bx @ a[:, 0])
    if precision == 0.0:
        raise UndefinedEstimate("risk-factor associations carry no weighted information")
    est = float(bx @ a[:, 1]) / precision
    valid = precision > 0
    se_fixed = precision ** -0.5 if valid else math.nan
    sigma = math.nan
    if J > 1:
        resid = by - est * bx
        q = float(resid @ (a[:, 1] - est * a[:, 0]))
        sigma = math.sqrt(q / (J - 1)) if q >= 0 else math.nan
    se_random = _random_se(se_fixed, sigma) if valid else math.nan
    if J > 1 and not math.isfinite(sigma):
        se_random = math.nan
    return CausalEstimate(est, se_fixed, se_random, sigma, J, method, valid)


def ivw_correlated(summary: SummarySet, corr: CorrelationMatrix, assess: bool = True) -> CausalEstimate:
    """IVW estimate accounting for correlation between variants.

    ``(bx' W bx)^-1 bx' W by`` with ``W`` the inverse of
    ``Omega = diag(se_y) rho diag(se_y)``. With ``assess`` the correlation
    matrix is run through :func:`mrcorr.diagnostics.assess` and the report
    attached.
    """
    omega = build_omega(summary, corr).values
    res = gls_ivw(summary.beta_x, summary.beta_y, omega, "ivw-corr")
    return _attach(res, corr, assess)


def _attach(res: CausalEstimate, corr: CorrelationMatrix, assess: bool) -> CausalEstimate:
    if not assess:
        return res
    report = diag.assess(corr.values).with_variance(res.variance_valid)
    if corr.ridge:
        report = report.add_warning(diag.RIDGE_ADJUSTED)
    return CausalEstimate(res.estimate, res.se_fixed, res.se_random, res.residual_sigma,
                          res.n_instruments, res.method, res.variance_valid, report)


def generalized_residual_sigma(summary: SummarySet, corr: CorrelationMatrix, estimate: float) -> float:
    """Residual scale ``sqrt(r' Omega^-1 r / (J - 1))`` from untransformed residuals."""
    omega = build_omega(summary, corr).values
    r = summary.beta_y - estimate * summary.beta_x
    return math.sqrt(float(r @ np.linalg.solve(omega, r)) / (len(r) - 1))


def ivw_correlated_cholesky(summary: SummarySet, corr: CorrelationMatrix,
                            assess: bool = True) -> CausalEstimate:
    """Correlated IVW via whitening by the lower Cholesky factor of Omega.

    After transforming both association vectors by ``L^-1`` the estimate is an
    ordinary regression through the origin. The residual scale comes from the
    whitened residuals.
    """
    omega = build_omega(summary, corr).values
    try:
        L = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("Omega is not positive definite; Cholesky factorisation failed") from exc
    xt = solve_triangular(L, summary.beta_x, lower=True)
    yt = solve_triangular(L, summary.beta_y, lower=True)
    sxx = float(xt @ xt)
    if sxx == 0.0:
        raise UndefinedEstimate("risk-factor associations carry no weighted information")
    est = float(xt @ yt) / sxx
    se_fixed = sxx ** -0.5
    J = len(summary)
    sigma = math.nan
    if J > 1:
        r = yt - est * xt
        sigma = math.sqrt(float(r @ r) / (J - 1))
    res = CausalEstimate(est, se_fixed, _random_se(se_fixed, sigma), sigma, J, "ivw-corr-chol")
    return _attach(res, corr, assess)


def pca_ivw(summary: SummarySet, corr: CorrelationMatrix, variance_threshold: float = 0.99,
            assess: bool = True) -> tuple[CausalEstimate, PCAResult]:
    """IVW on principal components of the weighted correlation matrix Psi.

    The leading ``k`` eigenvectors ``W_k`` of Psi project both association
    vectors and Omega (``W_k' Omega W_k``); correlated IVW is then applied to
    the ``k`` transformed instruments.
    """
    psi = build_psi(summary, corr)
    pcs = pca_components(psi, variance_threshold)
    W = pcs.loadings
    omega = build_omega(summary, corr).values
    res = gls_ivw(W.T @ summary.beta_x, W.T @ summary.beta_y, W.T @ omega @ W, "pca-ivw")
    if assess:
        report = diag.assess(corr.values).with_variance(res.variance_valid)
        res = CausalEstimate(res.estimate, res.se_fixed, res.se_random, res.residual_sigma,
                             res.n_instruments, res.method, res.variance_valid, report)
    return res, pcs


# ---------------------------------------------------------- individual data

def _centre(a):
    return a - a.mean(axis=0)


def _collinear_columns(Zc, ids):
    _, s, vt = np.linalg.svd(Zc, full_matrices=False)
    tol = s[0] * max(Zc.shape) * np.finfo(float).eps
    null = vt[s <= tol]
    if not null.size:
        return ()
    involved = np.flatnonzero((np.abs(null) > 1e-8).any(axis=0))
    return tuple(ids[i] for i in involved)


def two_stage_least_squares(data: IndividualData) -> CausalEstimate:
    """2SLS with intercepts in both stages, absorbed by mean-centring.

    ``beta = [x'Z(Z'Z)^-1 Z'x]^-1 x'Z(Z'Z)^-1 Z'y``. The standard error uses
    residuals ``y - beta x`` with ``N - 2`` degrees of freedom.
    """
    Z = _centre(data.genotypes)
    x = _centre(data.risk_factor)
    y = _centre(data.outcome)
    ztz = Z.T @ Z
    try:
        L = np.linalg.cholesky(ztz)
        s = np.linalg.svd(Z, compute_uv=False)
        if diag.is_singular(s, max(Z.shape)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        cols = _collinear_columns(Z, data.ids)
        raise SingularDesign(f"Z'Z is singular; collinear columns: {list(cols) or 'unknown'}", cols)
    coef = solve_triangular(L.T, solve_triangular(L, Z.T @ x, lower=True), lower=False)
    xhat = Z @ coef
    denom = float(xhat @ x)
    if denom == 0.0:
        raise UndefinedEstimate("instruments do not predict the risk factor")
    est = float(xhat @ y) / denom
    n = data.n
    resid = y - est * x
    sigma2 = float(resid @ resid) / (n - 2)
    se = math.sqrt(sigma2 / float(xhat @ xhat))
    return CausalEstimate(est, se, se, math.sqrt(sigma2), Z.shape[1], "2sls")


def summarize(data: IndividualData, pooled_residual: bool = True):
    """Univariable regressions of risk factor and outcome on each variant.

    Returns ``(SummarySet, CorrelationMatrix)``. Slopes come from simple
    regression with an intercept; the correlation matrix holds Pearson
    correlations of the genotype columns.

    By default every variant's standard error uses one common residual scale
    (the trait's sample SD), so ``se_j`` is proportional to
    ``1 / ||g_j - mean(g_j)||``. Under that convention correlated IVW on the
    output reproduces 2SLS exactly. ``pooled_residual=False`` gives the usual
    per-regression residual SEs, for which the equality is only approximate.
    """
    G = _centre(data.genotypes)
    x = _centre(data.risk_factor)
    y = _centre(data.outcome)
    n = data.n
    sxx = np.einsum("ij,ij->j", G, G)
    bx = (G.T @ x) / sxx
    by = (G.T @ y) / sxx
    if pooled_residual:
        se_x = math.sqrt(float(x @ x) / (n - 1)) / np.sqrt(sxx)
        se_y = math.sqrt(float(y @ y) / (n - 1)) / np.sqrt(sxx)
    else:
        se_x = np.sqrt(np.maximum(float(x @ x) - bx * bx * sxx, 0.0) / (n - 2) / sxx)
        se_y = np.sqrt(np.maximum(float(y @ y) - by * by * sxx, 0.0) / (n - 2) / sxx)
    raw = data.genotypes
    freq = raw.mean(axis=0) / 2
    maf = np.minimum(freq, 1 - freq)
    maf = np.where(maf > 0, maf, np.nan)
    J = G.shape[1]
    summary = SummarySet(data.ids, ["A"] * J, ["G"] * J, bx, se_x, by, se_y, maf=maf,
                         n_x=np.full(J, float(n)), n_y=np.full(J, float(n)),
                         source_meta={"source": "summarize", "n": n})
    return summary, CorrelationMatrix(data.ids, correlation_from_centred(G))


def correlation_from_centred(G: np.ndarray) -> np.ndarray:
    c = G.T @ G
    c = (c + c.T) / 2
    d = np.diag(c)
    # sqrt(a * a) == a in IEEE arithmetic, so duplicated columns give exactly 1
    r = c / np.sqrt(np.outer(d, d))
    np.clip(r, -1.0, 1.0, out=r)
    np.fill_diagonal(r, 1.0)
    return r


def multivariable_weights(data: IndividualData) -> np.ndarray:
    """Risk-factor coefficients from joint regression on all variants."""
    Z = _centre(data.genotypes)
    x = _centre(data.risk_factor)
    coef, *_ = np.linalg.lstsq(Z, x, rcond=None)
    return coef


def allele_score_estimate(data: IndividualData, weights) -> CausalEstimate:
    """2SLS using the weighted allele score ``genotypes @ weights`` as sole instrument."""
    w = np.asarray(weights, dtype=float).ravel()
    if w.shape != (data.genotypes.shape[1],):
        raise InputError("one weight per variant is required")
    if not np.isfinite(w).all() or not w.any():
        raise InputError("weights must be finite and not all zero")
    score = data.genotypes @ w
    if np.ptp(score) == 0:
        raise InputError("allele score has zero variance")
    res = two_stage_least_squares(IndividualData(score[:, None], data.risk_factor, data.outcome,
                                                 ids=("score",)))
    return CausalEstimate(res.estimate, res.se_fixed, res.se_random, res.residual_sigma, 1,
                          "allele-score")
