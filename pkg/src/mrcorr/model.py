"""Shared data model: summary statistics, correlation and weighting matrices.

Containers are immutable. Arrays held by them are flagged read-only so that
they can be shared freely between threads in the simulation harness.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyIntersection, InputError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
PALINDROMIC = {frozenset("AT"), frozenset("CG")}


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VariantSummary:
    """Marginal associations of one variant with the risk factor and outcome."""

    variant_id: str
    effect_allele: str
    other_allele: str
    beta_x: float
    se_x: float
    beta_y: float
    se_y: float
    maf: float | None = None
    n_x: float | None = None
    n_y: float | None = None

    def __post_init__(self):
        if not (self.se_x > 0 and self.se_y > 0):
            raise InputError(f"{self.variant_id}: standard errors must be positive")
        if self.effect_allele.upper() == self.other_allele.upper():
            raise InputError(f"{self.variant_id}: effect and other allele are identical")
        if self.maf is not None and not (0 < self.maf <= 0.5):
            raise InputError(f"{self.variant_id}: maf must lie in (0, 0.5]")


class SummarySet:
    """Aligned per-variant association vectors.

    Stored column-wise; :attr:`variants` materialises the row view on demand.
    ``source_meta`` is a free-form provenance mapping.
    """

    __slots__ = ("ids", "effect_allele", "other_allele", "beta_x", "se_x",
                 "beta_y", "se_y", "maf", "n_x", "n_y", "source_meta", "_index")

    def __init__(self, ids, effect_allele, other_allele, beta_x, se_x, beta_y, se_y,
                 maf=None, n_x=None, n_y=None, source_meta: Mapping | None = None):
        ids = tuple(str(v) for v in ids)
        if not ids:
            raise InputError("a summary set needs at least one variant")
        if len(set(ids)) != len(ids):
            dup = sorted({v for v in ids if ids.count(v) > 1})
            raise InputError(f"duplicate variant ids: {dup}")
        J = len(ids)
        cols = {}
        for name, val in (("beta_x", beta_x), ("se_x", se_x),
                          ("beta_y", beta_y), ("se_y", se_y)):
            arr = _frozen(val)
            if arr.shape != (J,):
                raise InputError(f"{name} has shape {arr.shape}, expected ({J},)")
            cols[name] = arr
        for name in ("se_x", "se_y"):
            bad = ~(cols[name] > 0)
            if bad.any():
                raise InputError(f"non-positive {name} for: {[ids[i] for i in np.flatnonzero(bad)]}")
        ea = tuple(str(a).upper() for a in effect_allele)
        oa = tuple(str(a).upper() for a in other_allele)
        if len(ea) != J or len(oa) != J:
            raise InputError("allele columns do not match the number of variants")
        same = [ids[i] for i in range(J) if ea[i] == oa[i]]
        if same:
            raise InputError(f"effect allele equals other allele for: {same}")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "effect_allele", ea)
        object.__setattr__(self, "other_allele", oa)
        for name, arr in cols.items():
            object.__setattr__(self, name, arr)
        for name, val in (("maf", maf), ("n_x", n_x), ("n_y", n_y)):
            arr = None if val is None else _frozen(val)
            if arr is not None and arr.shape != (J,):
                raise InputError(f"{name} has shape {arr.shape}, expected ({J},)")
            object.__setattr__(self, name, arr)
        if self.maf is not None:
            m = self.maf
            bad = np.isfinite(m) & ~((m > 0) & (m <= 0.5))
            if bad.any():
                raise InputError(f"maf outside (0, 0.5] for: {[ids[i] for i in np.flatnonzero(bad)]}")
        object.__setattr__(self, "source_meta", dict(source_meta or {}))
        object.__setattr__(self, "_index", {v: i for i, v in enumerate(ids)})

    def __setattr__(self, name, value):
        raise AttributeError("SummarySet is immutable")

    @classmethod
    def from_variants(cls, variants: Iterable[VariantSummary], source_meta=None) -> "SummarySet":
        vs = list(variants)

        def opt(attr):
            vals = [getattr(v, attr) for v in vs]
            if all(x is None for x in vals):
                return None
            return [np.nan if x is None else x for x in vals]

        return cls([v.variant_id for v in vs], [v.effect_allele for v in vs],
                   [v.other_allele for v in vs], [v.beta_x for v in vs],
                   [v.se_x for v in vs], [v.beta_y for v in vs], [v.se_y for v in vs],
                   maf=opt("maf"), n_x=opt("n_x"), n_y=opt("n_y"), source_meta=source_meta)

    @property
    def variants(self) -> tuple[VariantSummary, ...]:
        def get(arr, i):
            if arr is None or not np.isfinite(arr[i]):
                return None
            return float(arr[i])

        return tuple(
            VariantSummary(self.ids[i], self.effect_allele[i], self.other_allele[i],
                           float(self.beta_x[i]), float(self.se_x[i]),
                           float(self.beta_y[i]), float(self.se_y[i]),
                           get(self.maf, i), get(self.n_x, i), get(self.n_y, i))
            for i in range(len(self)))

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, SummarySet):
            return NotImplemented
        return self.variants == other.variants

    def __repr__(self):
        return f"SummarySet(n_variants={len(self)})"

    def index_of(self, variant_id: str) -> int:
        return self._index[variant_id]

    def take(self, indices: Sequence[int], **meta) -> "SummarySet":
        """Return the variants at ``indices`` in the given order."""
        idx = np.asarray(indices, dtype=int)

        def pick(arr):
            return None if arr is None else arr[idx]

        return SummarySet([self.ids[i] for i in idx], [self.effect_allele[i] for i in idx],
                          [self.other_allele[i] for i in idx], self.beta_x[idx],
                          self.se_x[idx], self.beta_y[idx], self.se_y[idx],
                          maf=pick(self.maf), n_x=pick(self.n_x), n_y=pick(self.n_y),
                          source_meta={**self.source_meta, **meta})

    def subset(self, ids: Iterable[str]) -> "SummarySet":
        return self.take([self._index[v] for v in ids])

    def replace(self, **arrays) -> "SummarySet":
        """Copy with some columns replaced (e.g. ``beta_y=...``)."""
        kw = dict(ids=self.ids, effect_allele=self.effect_allele,
                  other_allele=self.other_allele, beta_x=self.beta_x, se_x=self.se_x,
                  beta_y=self.beta_y, se_y=self.se_y, maf=self.maf, n_x=self.n_x,
                  n_y=self.n_y, source_meta=self.source_meta)
        kw.update(arrays)
        return SummarySet(**kw)


class CorrelationMatrix:
    """Signed pairwise variant correlations.

    The matrix is symmetrised and its diagonal set to ``1 + ridge``. A
    nonzero ``ridge`` marks a matrix produced by
    :func:`mrcorr.diagnostics.ridge_adjust`; ordinary matrices have unit
    diagonal.
    """

    __slots__ = ("ids", "values", "ridge", "_index")

    def __init__(self, ids, values, ridge: float = 0.0, symmetry_tol: float = SYMMETRY_TOL):
        ids = tuple(str(v) for v in ids)
        m = np.array(values, dtype=float, copy=True)
        J = len(ids)
        if J == 0:
            raise InputError("empty correlation matrix")
        if len(set(ids)) != J:
            raise InputError("duplicate variant ids in correlation matrix")
        if m.shape != (J, J):
            raise InputError(f"correlation matrix has shape {m.shape}, expected ({J}, {J})")
        if not np.isfinite(m).all():
            raise InputError("correlation matrix contains non-finite values")
        asym = np.abs(m - m.T).max()
        if asym > symmetry_tol:
            raise InputError(f"correlation matrix is not symmetric (max |M - M^T| = {asym:.3g})")
        m = (m + m.T) / 2
        off = ~np.eye(J, dtype=bool)
        if (np.abs(m[off]) > 1 + 1e-12).any():
            raise InputError("correlation entries must lie in [-1, 1]")
        np.clip(m, -1.0, 1.0, out=m)
        if ridge < 0:
            raise InputError("ridge must be nonnegative")
        np.fill_diagonal(m, 1.0 + ridge)
        m.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", m)
        object.__setattr__(self, "ridge", float(ridge))
        object.__setattr__(self, "_index", {v: i for i, v in enumerate(ids)})

    def __setattr__(self, name, value):
        raise AttributeError("CorrelationMatrix is immutable")

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, CorrelationMatrix):
            return NotImplemented
        return (self.ids == other.ids and self.ridge == other.ridge
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"CorrelationMatrix(n_variants={len(self)}, ridge={self.ridge})"

    @classmethod
    def identity(cls, ids) -> "CorrelationMatrix":
        ids = list(ids)
        return cls(ids, np.eye(len(ids)))

    def index_of(self, variant_id: str) -> int:
        return self._index[variant_id]

    def take(self, indices: Sequence[int]) -> "CorrelationMatrix":
        idx = np.asarray(indices, dtype=int)
        return CorrelationMatrix([self.ids[i] for i in idx], self.values[np.ix_(idx, idx)],
                                 ridge=self.ridge)

    def subset(self, ids: Iterable[str]) -> "CorrelationMatrix":
        return self.take([self._index[v] for v in ids])


class WeightKind(str, enum.Enum):
    OMEGA = "Omega"
    OMEGA_X = "OmegaX"
    PSI = "Psi"


@dataclass(frozen=True)
class WeightMatrix:
    values: np.ndarray
    kind: WeightKind
    ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class AlignmentRecord:
    dropped_from_summary: tuple[str, ...] = ()
    dropped_from_corr: tuple[str, ...] = ()

    @property
    def dropped(self) -> tuple[str, ...]:
        return tuple(sorted(self.dropped_from_summary + self.dropped_from_corr))

    def message(self) -> str:
        return "dropped: " + ", ".join(self.dropped) if self.dropped else ""


@dataclass(frozen=True)
class HarmonizationRecord:
    flipped: tuple[str, ...] = ()
    ambiguous: tuple[str, ...] = ()
    mismatched: tuple[str, ...] = ()
    missing: tuple[str, ...] = ()

    @property
    def dropped(self) -> tuple[str, ...]:
        return self.ambiguous + self.mismatched + self.missing


def align(summary: SummarySet, corr: CorrelationMatrix):
    """Restrict both inputs to their shared variants, in summary order.

    Returns ``(summary, corr, record)``. Variants present on one side only
    are dropped and listed in the record.
    """
    shared = [v for v in summary.ids if v in corr._index]
    if not shared:
        raise EmptyIntersection("summary statistics and correlation matrix share no variants")
    in_corr = set(corr.ids)
    in_summary = set(summary.ids)
    record = AlignmentRecord(
        dropped_from_summary=tuple(v for v in summary.ids if v not in in_corr),
        dropped_from_corr=tuple(v for v in corr.ids if v not in in_summary),
    )
    if record.dropped:
        logger.warning(record.message())
    if len(shared) == len(summary):
        s = summary
    else:
        s = summary.subset(shared)
    c = corr if tuple(shared) == corr.ids else corr.subset(shared)
    return s, c, record


def is_palindromic(a1: str, a2: str) -> bool:
    return frozenset((a1.upper(), a2.upper())) in PALINDROMIC


def harmonize(summary: SummarySet, panel_alleles: Mapping[str, tuple[str, str]],
              drop_palindromic: bool = True):
    """Orient summary statistics to the reference panel's counted allele.

    ``panel_alleles`` maps variant id to ``(effect_allele, other_allele)`` as
    counted in the panel. Where the summary alleles are swapped, both betas
    are negated and the alleles exchanged. Returns ``(summary, record)``.
    """
    keep, flip = [], []
    ambiguous, mismatched, missing = [], [], []
    for i, vid in enumerate(summary.ids):
        ea, oa = summary.effect_allele[i], summary.other_allele[i]
        if vid not in panel_alleles:
            missing.append(vid)
            continue
        pa, po = (a.upper() for a in panel_alleles[vid])
        if drop_palindromic and is_palindromic(ea, oa):
            ambiguous.append(vid)
            continue
        if (ea, oa) == (pa, po):
            keep.append(i)
        elif (ea, oa) == (po, pa):
            keep.append(i)
            flip.append(i)
        else:
            mismatched.append(vid)
    record = HarmonizationRecord(tuple(summary.ids[i] for i in flip), tuple(ambiguous),
                                 tuple(mismatched), tuple(missing))
    if record.dropped:
        logger.warning("harmonization dropped: %s", ", ".join(record.dropped))
    if not keep:
        raise EmptyIntersection("no variants survived allele harmonization")
    sign = np.ones(len(summary))
    sign[flip] = -1.0
    flipped = set(flip)
    ea = [summary.other_allele[i] if i in flipped else summary.effect_allele[i]
          for i in range(len(summary))]
    oa = [summary.effect_allele[i] if i in flipped else summary.other_allele[i]
          for i in range(len(summary))]
    out = summary.replace(beta_x=summary.beta_x * sign, beta_y=summary.beta_y * sign,
                          effect_allele=ea, other_allele=oa)
    if len(keep) < len(summary):
        out = out.take(keep)
    return out, record


def _check_aligned(summary: SummarySet, corr: CorrelationMatrix):
    if summary.ids != corr.ids:
        raise InputError("summary statistics and correlation matrix are not aligned; call align() first")


def build_omega(summary: SummarySet, corr: CorrelationMatrix) -> WeightMatrix:
    """Outcome-association covariance: ``se_y[i] * se_y[j] * rho[i, j]``."""
    _check_aligned(summary, corr)
    s = summary.se_y
    return WeightMatrix(_frozen(np.outer(s, s) * corr.values), WeightKind.OMEGA, summary.ids)


def build_omega_x(summary: SummarySet, corr: CorrelationMatrix) -> WeightMatrix:
    """Risk-factor-association covariance: ``se_x[i] * se_x[j] * rho[i, j]``."""
    _check_aligned(summary, corr)
    s = summary.se_x
    return WeightMatrix(_frozen(np.outer(s, s) * corr.values), WeightKind.OMEGA_X, summary.ids)


def build_psi(summary: SummarySet, corr: CorrelationMatrix) -> WeightMatrix:
    """Correlation matrix weighted by ``beta_x / se_y``.

    The diagonal holds each variant's single-instrument IVW precision.
    """
    _check_aligned(summary, corr)
    d = summary.beta_x / summary.se_y
    return WeightMatrix(_frozen(np.outer(d, d) * corr.values), WeightKind.PSI, summary.ids)
