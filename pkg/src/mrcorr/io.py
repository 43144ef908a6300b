"""Tab-separated file formats.

Floats are written with ``repr`` (shortest round-trip form) so that every
write/read cycle is lossless. Missing values are written as ``NA``.

Summary statistics
    header ``variant_id effect_allele other_allele beta_x se_x beta_y se_y``
    plus optional ``maf n_x n_y``.
Correlation matrix
    full square matrix of *signed* correlations r (not r^2); the first row
    and first column hold variant ids.
Genotype panel
    one row per individual, one column per variant, header cells
    ``variant_id:effect_allele:other_allele``; entries are allele counts of
    the effect allele or dosages in [0, 2].
Individual data
    columns ``risk_factor``, ``outcome``, then one genotype column per variant.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import math
from pathlib import Path

import numpy as np

from .errors import InputError
from .estimators import IndividualData
from .model import CorrelationMatrix, SummarySet
from .selection import Method, SelectionResult, TraceStep
from .simulation import Design, ExperimentResult, SpecResult

REQUIRED = ("variant_id", "effect_allele", "other_allele", "beta_x", "se_x", "beta_y", "se_y")
OPTIONAL = ("maf", "n_x", "n_y")
MISSING = {"", "NA", "na", "NaN", "nan", "."}


def fmt(x) -> str:
    if x is None:
        return "NA"
    x = float(x)
    if math.isnan(x):
        return "NA"
    return repr(x)


def parse_float(s: str, where: str = "") -> float:
    s = s.strip()
    if s in MISSING:
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise InputError(f"{where}: cannot parse number {s!r}") from None


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@contextlib.contextmanager
def open_output(target):
    """Yield a text handle for a path or pass an open handle through."""
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, "w", newline="") as fh:
            yield fh


def _rows(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
    if not rows:
        raise InputError(f"{path}: empty file")
    return rows


def _comments(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                out.append(line[1:].rstrip("\n").split("\t"))
    return out


def read_summary(path) -> SummarySet:
    rows = _rows(path)
    header = [h.strip() for h in rows[0]]
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise InputError(f"{path}: missing required columns {missing}")
    col = {h: i for i, h in enumerate(header)}
    data = {h: [] for h in REQUIRED + OPTIONAL if h in col}
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")
        for h in data:
            v = r[col[h]].strip()
            if h in ("variant_id", "effect_allele", "other_allele"):
                data[h].append(v)
            else:
                data[h].append(parse_float(v, f"{path}:{lineno}"))
    opt = {}
    for h in OPTIONAL:
        if h in data and not all(math.isnan(v) for v in data[h]):
            opt[h] = data[h]
    return SummarySet(data["variant_id"], data["effect_allele"], data["other_allele"],
                      data["beta_x"], data["se_x"], data["beta_y"], data["se_y"],
                      source_meta={"path": str(path)}, **opt)


def write_summary(summary: SummarySet, path) -> None:
    extra = [h for h in OPTIONAL if getattr(summary, h) is not None]
    with open_output(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(list(REQUIRED) + extra)
        for i, vid in enumerate(summary.ids):
            w.writerow([vid, summary.effect_allele[i], summary.other_allele[i],
                        fmt(summary.beta_x[i]), fmt(summary.se_x[i]),
                        fmt(summary.beta_y[i]), fmt(summary.se_y[i])]
                       + [fmt(getattr(summary, h)[i]) for h in extra])


def read_correlation(path) -> CorrelationMatrix:
    rows = _rows(path)
    ids = [c.strip() for c in rows[0][1:]]
    body = rows[1:]
    if len(body) != len(ids):
        raise InputError(f"{path}: {len(ids)} columns but {len(body)} rows")
    values = np.empty((len(ids), len(ids)))
    for i, r in enumerate(body):
        if r[0].strip() != ids[i]:
            raise InputError(f"{path}: row {i + 1} id {r[0]!r} does not match column id {ids[i]!r}")
        if len(r) != len(ids) + 1:
            raise InputError(f"{path}: row {r[0]} has {len(r) - 1} values, expected {len(ids)}")
        values[i] = [parse_float(v, f"{path}:{r[0]}") for v in r[1:]]
    return CorrelationMatrix(ids, values)


def write_correlation(corr: CorrelationMatrix, path) -> None:
    with open_output(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["variant_id"] + list(corr.ids))
        for i, vid in enumerate(corr.ids):
            w.writerow([vid] + [fmt(v) for v in corr.values[i]])


def read_panel(path):
    """Returns ``(ids, alleles, genotypes)`` with ``alleles[id] = (effect, other)``."""
    rows = _rows(path)
    ids, alleles = [], {}
    for cell in rows[0]:
        parts = cell.strip().split(":")
        if len(parts) != 3:
            raise InputError(f"{path}: panel header cell {cell!r} is not variant_id:effect:other")
        ids.append(parts[0])
        alleles[parts[0]] = (parts[1].upper(), parts[2].upper())
    G = np.array([[parse_float(v, f"{path}:{n + 2}") for v in r] for n, r in enumerate(rows[1:])])
    if G.ndim != 2 or G.shape[1] != len(ids):
        raise InputError(f"{path}: ragged genotype panel")
    if not np.isfinite(G).all() or (G < 0).any() or (G > 2).any():
        raise InputError(f"{path}: genotype entries must be dosages in [0, 2]")
    return ids, alleles, G


def write_panel(ids, alleles, genotypes, path) -> None:
    with open_output(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow([f"{v}:{alleles[v][0]}:{alleles[v][1]}" for v in ids])
        for r in np.asarray(genotypes):
            w.writerow([fmt(v) for v in r])


def read_individual(path) -> IndividualData:
    rows = _rows(path)
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["risk_factor", "outcome"]:
        raise InputError(f"{path}: first columns must be risk_factor, outcome")
    M = np.array([[parse_float(v, str(path)) for v in r] for r in rows[1:]])
    return IndividualData(M[:, 2:], M[:, 0], M[:, 1], ids=tuple(header[2:]))


def write_individual(data: IndividualData, path) -> None:
    with open_output(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["risk_factor", "outcome"] + list(data.ids))
        for i in range(data.n):
            w.writerow([fmt(data.risk_factor[i]), fmt(data.outcome[i])]
                       + [fmt(v) for v in data.genotypes[i]])


# --------------------------------------------------------------- selections

SELECTION_COLUMNS = ("step", "chosen_id", "statistic", "removed_ids", "note")


def write_selection(sel: SelectionResult, path) -> None:
    with open_output(path) as fh:
        fh.write(f"#method\t{sel.method.value}\n")
        for k in sorted(sel.parameters):
            v = sel.parameters[k]
            fh.write(f"#param\t{k}\t{fmt(v) if isinstance(v, float) else v}\n")
        fh.write("#selected\t" + "\t".join(sel.selected_ids) + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SELECTION_COLUMNS)
        for t in sel.trace:
            w.writerow([t.step, t.chosen or "", fmt(t.statistic), ",".join(t.removed), t.note])


def read_selection(path) -> SelectionResult:
    method, params, selected = None, {}, ()
    for parts in _comments(path):
        if parts[0] == "method":
            method = Method(parts[1])
        elif parts[0] == "param":
            try:
                params[parts[1]] = int(parts[2]) if parts[2].lstrip("-").isdigit() else float(parts[2])
            except ValueError:
                params[parts[1]] = parts[2]
        elif parts[0] == "selected":
            selected = tuple(p for p in parts[1:] if p)
    if method is None:
        raise InputError(f"{path}: missing #method line")
    trace = []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
    for r in rows[1:]:
        r = r + [""] * (5 - len(r))
        trace.append(TraceStep(int(r[0]), r[1] or None, parse_float(r[2]),
                               tuple(x for x in r[3].split(",") if x), r[4]))
    return SelectionResult(method, selected, params, tuple(trace))


# ------------------------------------------------------------- experiments

def write_experiment(result: ExperimentResult, path) -> None:
    with open_output(path) as fh:
        fh.write(f"#design\t{result.design.value}\n#iterations\t{result.iterations}\n"
                 f"#seed\t{result.seed}\n#config_hash\t{result.config_hash}\n"
                 f"#failed_iterations\t{result.failed_iterations}\n")
        for code, n in result.failure_codes.items():
            fh.write(f"#failure\t{code}\t{n}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SpecResult.COLUMNS + ("seed", "config_hash"))
        for r in result.rows:
            w.writerow([r.label, r.method, fmt(r.value), fmt(r.mean_estimate), fmt(r.sd_estimate),
                        fmt(r.mean_se), fmt(r.empirical_power), r.undefined_se_count,
                        r.n_estimates, result.seed, result.config_hash])


def read_experiment(path) -> ExperimentResult:
    meta, failures = {}, {}
    for parts in _comments(path):
        if parts[0] == "failure":
            failures[parts[1]] = int(parts[2])
        else:
            meta[parts[0]] = parts[1]
    rows = _rows(path)
    out = []
    for r in rows[1:]:
        value = parse_float(r[2])
        out.append(SpecResult(r[0], r[1], None if math.isnan(value) else value,
                              parse_float(r[3]), parse_float(r[4]), parse_float(r[5]),
                              parse_float(r[6]), int(r[7]), int(r[8])))
    return ExperimentResult(Design(meta["design"]), int(meta["iterations"]), int(meta["seed"]),
                            meta["config_hash"], tuple(out), int(meta["failed_iterations"]), failures)


def write_iterations(result: ExperimentResult, path) -> None:
    """Per-iteration estimates and SEs, one column pair per selection spec."""
    if result.estimates is None:
        raise InputError("experiment was run without keeping iteration records")
    with open_output(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        header = ["iteration"]
        for r in result.rows:
            header += [f"{r.label}|estimate", f"{r.label}|se"]
        w.writerow(header)
        for i in range(result.estimates.shape[0]):
            row = [i]
            for k in range(len(result.rows)):
                row += [fmt(result.estimates[i, k]), fmt(result.standard_errors[i, k])]
            w.writerow(row)


def resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p
