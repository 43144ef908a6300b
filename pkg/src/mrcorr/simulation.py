"""Monte-Carlo experiments on summarized association data.

Three designs are supported:

``SubsetResample``
    repeatedly analyse a random subset of the variants;
``BootstrapCorrelation``
    re-estimate the correlation matrix from a bootstrap sample of a
    reference panel;
``DirectMVN``
    draw association estimates from their sampling distribution, optionally
    rounding them before analysis.

Random streams: iteration ``i`` of an experiment with seed ``s`` uses
``PCG64(SeedSequence(s, spawn_key=(i,)))``. Streams therefore do not depend
on how iterations are scheduled across threads, and per-iteration results are
written to fixed slots before being aggregated with ``math.fsum``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import InputError, MRError, NumericalError
from .estimators import Z_975, correlation_from_centred, gls_ivw, pca_ivw
from .model import CorrelationMatrix, SummarySet
from .selection import prune, stepwise_conditional

logger = logging.getLogger(__name__)

THREADS_ENV = "MRCORR_THREADS"
EIGEN_FLOOR = 1e-10
PSD_TOL = 1e-8


class Design(str, enum.Enum):
    SUBSET = "SubsetResample"
    BOOTSTRAP = "BootstrapCorrelation"
    DIRECT = "DirectMVN"


@dataclass(frozen=True)
class SelectionSpec:
    """One analysis applied in every iteration.

    ``method`` is ``prune`` (value: rho threshold), ``pca`` (value: variance
    threshold), ``conditional`` (value: p-value threshold) or ``all`` (every
    variant, correlated IVW).
    """

    method: str
    value: float | None = None

    def __post_init__(self):
        if self.method not in ("prune", "pca", "conditional", "all"):
            raise InputError(f"unknown selection method {self.method!r}")
        if self.method != "all" and self.value is None:
            raise InputError(f"{self.method} needs a threshold value")

    @property
    def label(self) -> str:
        if self.method == "prune":
            return f"Pruning at rho = {self.value:g}"
        if self.method == "pca":
            return f"PCA at {100 * self.value:g}% of variance"
        if self.method == "conditional":
            return f"Conditional at p < {self.value:g}"
        return "All variants"

    def to_dict(self) -> dict:
        return {"method": self.method, "value": self.value}


STANDARD_SPECS = (
    SelectionSpec("prune", 0.2), SelectionSpec("prune", 0.4),
    SelectionSpec("prune", 0.6), SelectionSpec("prune", 0.8),
    SelectionSpec("pca", 0.99), SelectionSpec("pca", 0.999),
)


@dataclass(frozen=True)
class ExperimentConfig:
    design: Design
    iterations: int
    seed: int
    base_summary: SummarySet
    base_corr: CorrelationMatrix
    selection_specs: tuple[SelectionSpec, ...] = STANDARD_SPECS
    causal_effect: float = 0.0
    rounding_decimals: int | None = None
    reference_panel: np.ndarray | None = None
    subset_size: int | None = None
    effects: str = "fixed"
    sample_size: float | None = None
    keep_iterations: bool = True

    def __post_init__(self):
        object.__setattr__(self, "design", Design(self.design))
        object.__setattr__(self, "selection_specs", tuple(self.selection_specs))
        if self.iterations < 1:
            raise InputError("iterations must be at least 1")
        if self.base_summary.ids != self.base_corr.ids:
            raise InputError("base summary and correlation matrix must be aligned")
        if self.rounding_decimals is not None and self.rounding_decimals < 0:
            raise InputError("rounding_decimals must be nonnegative")
        if self.effects not in ("fixed", "random"):
            raise InputError("effects must be 'fixed' or 'random'")
        if self.design is Design.SUBSET:
            size = self.subset_size if self.subset_size is not None else len(self.base_summary) // 2
            if not 1 <= size <= len(self.base_summary):
                raise InputError("subset_size must be between 1 and the number of variants")
            object.__setattr__(self, "subset_size", size)
        if self.design is Design.BOOTSTRAP:
            if self.reference_panel is None:
                raise InputError("bootstrap design needs a reference panel")
            panel = np.asarray(self.reference_panel, dtype=float)
            if panel.ndim != 2 or panel.shape[1] != len(self.base_summary):
                raise InputError("reference panel must have one column per variant")
            panel.setflags(write=False)
            object.__setattr__(self, "reference_panel", panel)

    def digest(self) -> str:
        """SHA-256 over every setting and the base data, excluding thread count."""
        h = hashlib.sha256()
        s = self.base_summary
        meta = {
            "design": self.design.value, "iterations": self.iterations, "seed": self.seed,
            "specs": [sp.to_dict() for sp in self.selection_specs],
            "causal_effect": self.causal_effect, "rounding_decimals": self.rounding_decimals,
            "subset_size": self.subset_size, "effects": self.effects,
            "sample_size": self.sample_size, "ids": list(s.ids),
        }
        h.update(json.dumps(meta, sort_keys=True).encode())
        for arr in (s.beta_x, s.se_x, s.beta_y, s.se_y, self.base_corr.values):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if s.n_x is not None:
            h.update(np.ascontiguousarray(s.n_x, dtype="<f8").tobytes())
        if self.reference_panel is not None:
            h.update(np.ascontiguousarray(self.reference_panel, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SpecResult:
    label: str
    method: str
    value: float | None
    mean_estimate: float
    sd_estimate: float
    mean_se: float
    empirical_power: float
    undefined_se_count: int
    n_estimates: int

    COLUMNS = ("selection", "method", "value", "mean_estimate", "sd_estimate", "mean_se",
               "empirical_power", "undefined_se_count", "n_estimates")


@dataclass(frozen=True)
class ExperimentResult:
    design: Design
    iterations: int
    seed: int
    config_hash: str
    rows: tuple[SpecResult, ...]
    failed_iterations: int = 0
    failure_codes: dict = field(default_factory=dict)
    estimates: np.ndarray | None = None
    standard_errors: np.ndarray | None = None

    def row(self, label_or_index) -> SpecResult:
        if isinstance(label_or_index, int):
            return self.rows[label_or_index]
        for r in self.rows:
            if r.label == label_or_index:
                return r
        raise KeyError(label_or_index)


# ------------------------------------------------------------------ helpers

def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(iteration,))))


def round_half_away(values, decimals: int) -> np.ndarray:
    """Round half away from zero on the shortest decimal representation."""
    q = Decimal(1).scaleb(-decimals)
    out = [float(Decimal(repr(float(v))).quantize(q, rounding=ROUND_HALF_UP)) for v in np.ravel(values)]
    return np.asarray(out, dtype=float).reshape(np.shape(values))


def round_summaries(summary: SummarySet, decimals: int) -> SummarySet:
    """Round betas and standard errors to ``decimals`` places.

    Variants whose standard error rounds to zero are excluded (logged and
    listed under ``source_meta['rounding_excluded']``). Raises
    :class:`InputError` if nothing survives.
    """
    if decimals < 0:
        raise InputError("decimals must be nonnegative")
    bx = round_half_away(summary.beta_x, decimals)
    sx = round_half_away(summary.se_x, decimals)
    by = round_half_away(summary.beta_y, decimals)
    sy = round_half_away(summary.se_y, decimals)
    ok = (sx > 0) & (sy > 0)
    excluded = tuple(summary.ids[i] for i in np.flatnonzero(~ok))
    if excluded:
        logger.warning("standard error rounds to zero; excluded: %s", ", ".join(excluded))
    if not ok.any():
        raise InputError("every variant has a standard error that rounds to zero")
    keep = np.flatnonzero(ok)
    sx = np.where(ok, sx, 1.0)
    sy = np.where(ok, sy, 1.0)
    meta = {**summary.source_meta, "rounded_decimals": decimals, "rounding_excluded": excluded}
    out = summary.replace(beta_x=bx, se_x=sx, beta_y=by, se_y=sy, source_meta=meta)
    return out if ok.all() else out.take(keep)


def simulate_genotypes(n: int, haplotypes, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Genotypes as sums of two haplotypes drawn independently by frequency.

    ``haplotypes`` is a sequence of ``(binary vector, frequency)`` pairs.
    Returns an ``n x J`` integer matrix with entries in {0, 1, 2}.
    """
    rng = np.random.default_rng(rng)
    vecs = np.array([np.asarray(h, dtype=int) for h, _ in haplotypes])
    freqs = np.array([f for _, f in haplotypes], dtype=float)
    if vecs.ndim != 2:
        raise InputError("haplotype vectors must all have the same length")
    if not np.isin(vecs, (0, 1)).all():
        raise InputError("haplotypes must be binary")
    if (freqs <= 0).any() or abs(freqs.sum() - 1) > 1e-9:
        raise InputError("haplotype frequencies must be positive and sum to 1")
    a = rng.choice(len(freqs), size=n, p=freqs / freqs.sum())
    b = rng.choice(len(freqs), size=n, p=freqs / freqs.sum())
    return vecs[a] + vecs[b]


def panel_correlation(panel: np.ndarray, ids):
    """Correlation of the polymorphic columns of a genotype panel.

    Returns ``(CorrelationMatrix, kept_indices, monomorphic_ids)``.
    """
    panel = np.asarray(panel, dtype=float)
    poly = np.ptp(panel, axis=0) > 0
    kept = np.flatnonzero(poly)
    mono = tuple(ids[i] for i in np.flatnonzero(~poly))
    if kept.size == 0:
        raise NumericalError("every variant is monomorphic in the panel")
    G = panel[:, kept]
    G = G - G.mean(axis=0)
    return CorrelationMatrix([ids[i] for i in kept], correlation_from_centred(G)), kept, mono


class _MVN:
    """Sampler for N(0, cov) via eigendecomposition with an eigenvalue floor."""

    def __init__(self, cov):
        cov = np.asarray(cov, dtype=float)
        lam, V = np.linalg.eigh((cov + cov.T) / 2)
        top = lam[-1]
        if lam[0] < -PSD_TOL * top:
            raise NumericalError(f"covariance is not positive semi-definite (min eigenvalue {lam[0]:.3g})")
        floor = EIGEN_FLOOR * top
        self.floored = int((lam < floor).sum())
        if self.floored:
            warnings.warn(f"{self.floored} eigenvalues raised to the floor {floor:.3g}",
                          RuntimeWarning, stacklevel=3)
        self.factor = V * np.sqrt(np.maximum(lam, floor))

    def draw(self, rng):
        return self.factor @ rng.standard_normal(self.factor.shape[0])


def draw_associations(summary: SummarySet, corr: CorrelationMatrix, rng, causal_effect: float = 0.0,
                      _samplers=None) -> SummarySet:
    """One draw of ``beta_x ~ N(beta_x, Omega_X)`` and ``beta_y ~ N(theta beta_x, Omega)``."""
    if _samplers is None:
        rho = corr.values
        _samplers = (_MVN(np.outer(summary.se_x, summary.se_x) * rho),
                     _MVN(np.outer(summary.se_y, summary.se_y) * rho))
    sx, sy = _samplers
    bx = summary.beta_x + sx.draw(rng)
    by = causal_effect * summary.beta_x + sy.draw(rng)
    return summary.replace(beta_x=bx, beta_y=by)


def evaluate(spec: SelectionSpec, summary: SummarySet, corr: CorrelationMatrix,
             effects: str = "fixed", sample_size: float | None = None) -> tuple[float, float, str]:
    """Run one selection + estimation; returns ``(estimate, se, code)``.

    Failures give NaN estimate and SE and the error code; an undefined
    standard error alone gives a NaN SE with code ``NEG_VARIANCE``.
    """
    try:
        if spec.method == "pca":
            res, _ = pca_ivw(summary, corr, spec.value, assess=False)
        else:
            if spec.method == "prune":
                ids = prune(summary, corr, spec.value).selected_ids
            elif spec.method == "conditional":
                ids = stepwise_conditional(summary, corr, spec.value, n=sample_size).selected_ids
                if not ids:
                    return math.nan, math.nan, "EMPTY_SELECTION"
            else:
                ids = summary.ids
            idx = [summary.index_of(v) for v in ids]
            s = summary.take(idx) if len(idx) < len(summary) else summary
            rho = corr.values[np.ix_(idx, idx)]
            res = gls_ivw(s.beta_x, s.beta_y, np.outer(s.se_y, s.se_y) * rho)
    except MRError as exc:
        return math.nan, math.nan, exc.code
    se = res.se(effects)
    return res.estimate, se, "" if math.isfinite(se) else "NEG_VARIANCE"


def _fsum_mean(x):
    return math.fsum(x) / len(x) if len(x) else math.nan


def _fsum_sd(x):
    if len(x) < 2:
        return math.nan if len(x) == 0 else 0.0
    m = _fsum_mean(x)
    return math.sqrt(math.fsum((v - m) ** 2 for v in x) / (len(x) - 1))


def aggregate(config: ExperimentConfig, est: np.ndarray, se: np.ndarray, failures: dict) -> ExperimentResult:
    rows = []
    n = est.shape[0]
    for k, spec in enumerate(config.selection_specs):
        e = [float(v) for v in est[:, k] if math.isfinite(v)]
        s_col = se[:, k]
        defined = np.isfinite(s_col)
        s = [float(v) for v in s_col[defined]]
        reject = int(np.sum(defined & (np.abs(np.nan_to_num(est[:, k])) > Z_975 * np.where(defined, s_col, 1.0))))
        rows.append(SpecResult(spec.label, spec.method, spec.value, _fsum_mean(e), _fsum_sd(e),
                               _fsum_mean(s), reject / n, int(n - defined.sum()), len(e)))
    return ExperimentResult(config.design, config.iterations, config.seed, config.digest(),
                            tuple(rows), sum(failures.values()), dict(sorted(failures.items())),
                            est if config.keep_iterations else None,
                            se if config.keep_iterations else None)


def _n_threads(n_threads):
    if n_threads is None:
        n_threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(n_threads))


def _run(config: ExperimentConfig, one_iteration, n_threads=None) -> ExperimentResult:
    n_specs = len(config.selection_specs)
    est = np.full((config.iterations, n_specs), np.nan)
    se = np.full((config.iterations, n_specs), np.nan)
    codes = [""] * config.iterations

    def work(i):
        rng = iteration_rng(config.seed, i)
        try:
            data = one_iteration(rng)
        except MRError as exc:
            codes[i] = exc.code
            return
        summary, corr = data
        for k, spec in enumerate(config.selection_specs):
            est[i, k], se[i, k], _ = evaluate(spec, summary, corr, config.effects, config.sample_size)

    threads = _n_threads(n_threads)
    if threads == 1:
        for i in range(config.iterations):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(config.iterations)))
    failures: dict[str, int] = {}
    for c in codes:
        if c:
            failures[c] = failures.get(c, 0) + 1
    return aggregate(config, est, se, failures)


# ------------------------------------------------------------------ designs

def subset_resample(config: ExperimentConfig, n_threads=None) -> ExperimentResult:
    """Analyse ``subset_size`` variants drawn without replacement each iteration."""
    base_s, base_c = config.base_summary, config.base_corr
    J, size = len(base_s), config.subset_size

    def one(rng):
        idx = np.sort(rng.choice(J, size=size, replace=False))
        s, c = base_s.take(idx), base_c.take(idx)
        if config.rounding_decimals is not None:
            s = round_summaries(s, config.rounding_decimals)
            c = c.subset(s.ids)
        return s, c

    return _run(config, one, n_threads)


def bootstrap_correlation(config: ExperimentConfig, n_threads=None) -> ExperimentResult:
    """Recompute the correlation matrix from a bootstrap sample of the panel.

    Variants monomorphic in a bootstrap sample are dropped for that
    iteration; an iteration where all are monomorphic fails with code
    ``MONOMORPHIC_PANEL``.
    """
    panel = config.reference_panel
    base_s = config.base_summary
    n = panel.shape[0]

    def one(rng):
        rows = rng.integers(0, n, size=n)
        try:
            corr, kept, _ = panel_correlation(panel[rows], base_s.ids)
        except NumericalError as exc:
            exc.code = "MONOMORPHIC_PANEL"
            raise
        s = base_s if kept.size == len(base_s) else base_s.take(kept)
        if config.rounding_decimals is not None:
            s = round_summaries(s, config.rounding_decimals)
            corr = corr.subset(s.ids)
        return s, corr

    return _run(config, one, n_threads)


def direct_mvn(config: ExperimentConfig, n_threads=None) -> ExperimentResult:
    """Draw association estimates from their sampling distribution.

    Risk-factor associations come from ``N(beta_x, Omega_X)`` and outcome
    associations from ``N(theta * beta_x, Omega)``, using the base summary's
    ``beta_x``, standard errors and correlation matrix. With
    ``rounding_decimals`` all betas and SEs are rounded before analysis.
    """
    base_s, base_c = config.base_summary, config.base_corr
    rho = base_c.values
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        samplers = (_MVN(np.outer(base_s.se_x, base_s.se_x) * rho),
                    _MVN(np.outer(base_s.se_y, base_s.se_y) * rho))
    if samplers[0].floored or samplers[1].floored:
        logger.warning("degenerate covariance: %d eigenvalues floored at %.0e x largest",
                       max(samplers[0].floored, samplers[1].floored), EIGEN_FLOOR)

    def one(rng):
        s = draw_associations(base_s, base_c, rng, config.causal_effect, samplers)
        c = base_c
        if config.rounding_decimals is not None:
            s = round_summaries(s, config.rounding_decimals)
            if len(s) < len(c):
                c = c.subset(s.ids)
        return s, c

    return _run(config, one, n_threads)


def run_experiment(config: ExperimentConfig, n_threads=None) -> ExperimentResult:
    runner = {Design.SUBSET: subset_resample, Design.BOOTSTRAP: bootstrap_correlation,
              Design.DIRECT: direct_mvn}[config.design]
    return runner(config, n_threads)


# ---------------------------------------------------------- synthetic bases

def chain_haplotypes(n_variants: int, n_haplotypes: int, switch_prob: float, rng) -> np.ndarray:
    """Binary haplotypes where each variant copies its neighbour with random switches.

    Low ``switch_prob`` yields long runs of nearly identical variants, i.e.
    strong linkage disequilibrium.
    """
    H = np.empty((n_haplotypes, n_variants), dtype=int)
    H[:, 0] = rng.integers(0, 2, n_haplotypes)
    for j in range(1, n_variants):
        flip = rng.random(n_haplotypes) < switch_prob
        H[:, j] = np.where(flip, 1 - H[:, j - 1], H[:, j - 1])
    return H


@dataclass(frozen=True)
class SyntheticBase:
    summary: SummarySet
    corr: CorrelationMatrix
    panel: np.ndarray


def haplotype_base(n_variants: int = 40, n_haplotypes: int = 12, panel_size: int = 503,
                   switch_prob: float = 0.1, dosage_jitter: float = 0.0,
                   causal=None, n_x: float = 10_000, n_y: float = 10_000,
                   seed: int = 0) -> SyntheticBase:
    """Reference panel and true associations generated from a haplotype pool.

    With fewer haplotypes than variants the genotype correlation matrix is
    rank deficient; ``dosage_jitter`` perturbs each dosage uniformly by up to
    that amount, which makes it nonsingular but near-singular. ``causal``
    maps variant index to a per-allele effect on the risk factor (in
    risk-factor SD units); the returned ``beta_x`` are the implied marginal
    associations and ``beta_y = 0``.
    """
    rng = np.random.default_rng(seed)
    haps = chain_haplotypes(n_variants, n_haplotypes, switch_prob, rng)
    freqs = rng.dirichlet(np.full(n_haplotypes, 2.0))
    panel = simulate_genotypes(panel_size, list(zip(haps, freqs)), rng).astype(float)
    if dosage_jitter:
        panel = np.clip(panel + rng.uniform(-dosage_jitter, dosage_jitter, panel.shape), 0.0, 2.0)
    ids = [f"rs{j + 1}" for j in range(n_variants)]
    corr, kept, _ = panel_correlation(panel, ids)
    panel = panel[:, kept]
    cov = np.cov(panel, rowvar=False)
    if causal is None:
        causal = {0: 0.15}
    gamma = np.zeros(n_variants)
    for j, eff in causal.items():
        gamma[j] = eff
    gamma = gamma[kept]
    var = np.diag(cov)
    beta_x = cov @ gamma / var
    se_x = 1.0 / np.sqrt(n_x * var)
    se_y = 1.0 / np.sqrt(n_y * var)
    freq = panel.mean(axis=0) / 2
    maf = np.minimum(freq, 1 - freq)
    J = kept.size
    summary = SummarySet(corr.ids, ["A"] * J, ["G"] * J, beta_x, se_x, np.zeros(J), se_y,
                         maf=np.where(maf > 0, maf, np.nan), n_x=np.full(J, float(n_x)),
                         n_y=np.full(J, float(n_y)), source_meta={"synthetic": "haplotype", "seed": seed})
    panel.setflags(write=False)
    return SyntheticBase(summary, corr, panel)


def ar1_base(n_variants: int = 30, rho: float = 0.5, beta_x: float = 0.1, se_x: float = 0.01,
             se_y: float = 0.03, n: float = 10_000) -> SyntheticBase:
    """Well-conditioned base: ``corr[i, j] = rho**|i - j|`` and equal effects."""
    J = n_variants
    i = np.arange(J)
    R = rho ** np.abs(i[:, None] - i[None, :])
    ids = [f"rs{j + 1}" for j in range(J)]
    # decaying effects so that marginal significance orders the variants
    bx = beta_x * (1 + 0.5 * np.cos(i))
    summary = SummarySet(ids, ["A"] * J, ["G"] * J, bx, np.full(J, se_x), np.zeros(J),
                         np.full(J, se_y), n_x=np.full(J, n), n_y=np.full(J, n),
                         source_meta={"synthetic": "ar1"})
    return SyntheticBase(summary, CorrelationMatrix(ids, R), np.empty((0, J)))
