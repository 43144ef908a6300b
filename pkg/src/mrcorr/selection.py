"""Instrument selection: correlation pruning, stepwise conditional analysis
and principal-component counts."""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import InputError, NumericalError
from .model import CorrelationMatrix, SummarySet, WeightKind, WeightMatrix, _check_aligned

logger = logging.getLogger(__name__)

CONDITION_GATE = 1e8
RESIDUAL_FLOOR = 1e-6
NEG_EIGEN_TOL = 1e-8


class Method(str, enum.Enum):
    PRUNING = "prune"
    CONDITIONAL = "conditional"
    PCA = "pca"


@dataclass(frozen=True)
class TraceStep:
    step: int
    chosen: str | None
    statistic: float
    removed: tuple[str, ...] = ()
    note: str = ""


@dataclass(frozen=True)
class SelectionResult:
    method: Method
    selected_ids: tuple[str, ...]
    parameters: dict = field(default_factory=dict)
    trace: tuple[TraceStep, ...] = ()

    def __post_init__(self):
        if len(set(self.selected_ids)) != len(self.selected_ids):
            raise InputError("selection contains duplicate variants")


def marginal_pvalues(summary: SummarySet) -> np.ndarray:
    """Two-sided normal p-values of ``beta_x / se_x``."""
    return 2 * norm.sf(np.abs(summary.beta_x / summary.se_x))


def _rank_order(z: np.ndarray, ids) -> list[int]:
    # |z| descending is p ascending, without underflow; ties by id
    return sorted(range(len(ids)), key=lambda i: (-abs(z[i]), ids[i]))


def prune(summary: SummarySet, corr: CorrelationMatrix, rho_threshold: float) -> SelectionResult:
    """Greedy pruning by marginal significance.

    Repeatedly takes the most significant remaining variant and discards every
    remaining variant whose |rho| with it is strictly above ``rho_threshold``.
    Variants with non-finite p-values are never selected.
    """
    _check_aligned(summary, corr)
    if not 0 < rho_threshold < 1:
        raise InputError("rho_threshold must lie in (0, 1)")
    z = summary.beta_x / summary.se_x
    p = 2 * norm.sf(np.abs(z))
    ids = summary.ids
    order = [i for i in _rank_order(z, ids) if np.isfinite(z[i])]
    alive = np.zeros(len(ids), dtype=bool)
    alive[order] = True
    absr = np.abs(corr.values)
    selected, trace = [], []
    for i in order:
        if not alive[i]:
            continue
        alive[i] = False
        drop = np.flatnonzero(alive & (absr[i] > rho_threshold))
        alive[drop] = False
        selected.append(ids[i])
        trace.append(TraceStep(len(trace) + 1, ids[i], float(p[i]),
                               tuple(ids[j] for j in sorted(drop, key=lambda j: ids[j]))))
    return SelectionResult(Method.PRUNING, tuple(selected), {"rho_threshold": rho_threshold},
                           tuple(trace))


def standardized_marginals(summary: SummarySet, n: float) -> np.ndarray:
    """Marginal correlations with the trait implied by the z-statistics."""
    z = summary.beta_x / summary.se_x
    return z / np.sqrt(n - 2 + z * z)


def joint_z(r_marg: np.ndarray, R: np.ndarray, n: float) -> np.ndarray:
    """Joint-model z-statistics from standardized marginals and LD.

    Solves ``R gamma = r`` for standardized joint coefficients; the residual
    variance ``1 - r' gamma`` is floored at ``RESIDUAL_FLOOR``.
    """
    k = len(r_marg)
    Rinv = np.linalg.inv(R)
    gamma = Rinv @ r_marg
    resid = max(1.0 - float(r_marg @ gamma), RESIDUAL_FLOOR)
    var = resid * np.diag(Rinv) / (n - k - 1)
    return gamma / np.sqrt(var)


def stepwise_conditional(summary: SummarySet, corr: CorrelationMatrix, p_threshold: float,
                         n: float | None = None) -> SelectionResult:
    """Forward selection on conditional p-values computed from summary data.

    ``n`` is the risk-factor GWAS sample size; it defaults to the median of
    ``summary.n_x``. At each step every unselected candidate is added in turn
    to the selected set, its joint z-statistic computed, and the candidate
    with the smallest p-value kept. Candidates whose joint LD block has
    condition number >= 1e8 are skipped. Selection stops when the smallest
    conditional p-value is not below ``p_threshold``.
    """
    _check_aligned(summary, corr)
    if n is None:
        if summary.n_x is None or not np.isfinite(summary.n_x).any():
            raise InputError("sample size required for conditional analysis (pass n or supply n_x)")
        n = float(np.nanmedian(summary.n_x))
    ids = summary.ids
    J = len(ids)
    if n <= J + 2:
        raise InputError(f"sample size {n} too small for {J} variants")
    r = standardized_marginals(summary, n)
    R = corr.values
    selected: list[int] = []
    trace: list[TraceStep] = []
    remaining = [i for i in sorted(range(J), key=lambda i: ids[i]) if np.isfinite(r[i])]
    while remaining:
        best, best_p, best_z = None, math.inf, 0.0
        skipped = []
        for j in remaining:
            idx = selected + [j]
            block = R[np.ix_(idx, idx)]
            if len(idx) > 1 and np.linalg.cond(block) >= CONDITION_GATE:
                skipped.append(ids[j])
                continue
            zj = joint_z(r[idx], block, n)[-1]
            pj = 2 * norm.sf(abs(zj))
            if abs(zj) > abs(best_z) or best is None:
                best, best_p, best_z = j, pj, zj
        note = f"skipped (ill-conditioned): {','.join(skipped)}" if skipped else ""
        if best is None or not best_p < p_threshold:
            if not selected:
                note = (note + "; " if note else "") + f"no variant reaches p < {p_threshold:g}"
            trace.append(TraceStep(len(trace) + 1, None, float(best_p), tuple(skipped), note))
            break
        selected.append(best)
        remaining.remove(best)
        trace.append(TraceStep(len(trace) + 1, ids[best], float(best_p), tuple(skipped), note))
    return SelectionResult(Method.CONDITIONAL, tuple(ids[i] for i in selected),
                           {"p_threshold": p_threshold, "n": n}, tuple(trace))


@dataclass(frozen=True)
class PCAResult:
    k: int
    loadings: np.ndarray
    eigenvalues: np.ndarray
    cumulative_share: np.ndarray
    variance_threshold: float
    ids: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def as_selection(self) -> SelectionResult:
        return SelectionResult(Method.PCA, self.ids,
                               {"variance_threshold": self.variance_threshold, "k": self.k})

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "variance_threshold": self.variance_threshold,
            "eigenvalues": self.eigenvalues.tolist(),
            "cumulative_share": self.cumulative_share.tolist(),
            "ids": list(self.ids),
            "loadings": self.loadings.tolist(),
            "warnings": list(self.warnings),
        }


def components_for_threshold(cumulative_share, variance_threshold: float) -> int:
    """Smallest k whose cumulative share strictly exceeds the threshold.

    A threshold of 1 (or one never exceeded) keeps every component.
    """
    cs = np.asarray(cumulative_share)
    if variance_threshold >= 1.0:
        return cs.size
    hits = np.flatnonzero(cs > variance_threshold)
    return int(hits[0]) + 1 if hits.size else cs.size


def pca_components(psi: WeightMatrix | np.ndarray, variance_threshold: float = 0.99) -> PCAResult:
    """Unscaled eigendecomposition of Psi with components sorted by eigenvalue."""
    if not 0 < variance_threshold <= 1:
        raise InputError("variance_threshold must lie in (0, 1]")
    if isinstance(psi, WeightMatrix):
        values, ids = psi.values, psi.ids
        if psi.kind is not WeightKind.PSI:
            raise InputError(f"expected a Psi matrix, got {psi.kind.value}")
    else:
        values, ids = np.asarray(psi, dtype=float), ()
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise InputError("Psi must be square")
    if not np.allclose(values, values.T, rtol=0, atol=1e-10 * max(1.0, np.abs(values).max())):
        raise InputError("Psi must be symmetric")
    if not np.isfinite(values).all():
        raise NumericalError("Psi has non-finite entries")
    lam, V = np.linalg.eigh((values + values.T) / 2)
    if not np.isfinite(lam).all():
        raise NumericalError("non-finite eigenvalues")
    order = np.argsort(-lam, kind="stable")
    lam, V = lam[order], V[:, order]
    # fix eigenvector signs: largest-magnitude loading positive
    pivot = np.argmax(np.abs(V), axis=0)
    V = V * np.where(V[pivot, np.arange(V.shape[1])] < 0, -1.0, 1.0)
    notes = ()
    if lam[-1] < -NEG_EIGEN_TOL * lam[0]:
        msg = f"Psi has negative eigenvalue {lam[-1]:.3g} (largest {lam[0]:.3g})"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes = ("NEGATIVE_EIGENVALUE",)
    total = lam.sum()
    if not total > 0:
        raise NumericalError("Psi has no positive variance")
    cum = np.cumsum(lam) / total
    k = components_for_threshold(cum, variance_threshold)
    return PCAResult(k, V[:, :k], lam, cum, variance_threshold, tuple(ids), notes)
