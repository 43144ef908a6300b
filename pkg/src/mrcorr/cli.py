"""Command-line interface.

Exit status: 0 on success, 1 for usage or input errors, 2 for numerical
failures. On failure a one-line JSON object ``{"error": CODE, "message": ...}``
is written to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .diagnostics import assess, ridge_adjust, ridge_sensitivity
from .errors import InputError, MRError, NumericalError
from .estimators import (Z_975, ivw_correlated, ivw_uncorrelated, pca_ivw,
                         two_stage_least_squares)
from .model import align, build_omega, harmonize
from .selection import prune, stepwise_conditional
from .simulation import (Design, ExperimentConfig, SelectionSpec, draw_associations,
                         haplotype_base, ar1_base, panel_correlation, run_experiment)

logger = logging.getLogger("mrcorr")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_json(obj, path):
    text = dumps(obj)
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def num(x, digits=3) -> str:
    if x is None or not math.isfinite(x):
        return "-"
    return f"{x:.{digits}f}"


# ------------------------------------------------------------------ loading

def _load(args, need_corr=True):
    """Read summary statistics and a correlation matrix (file or panel), aligned."""
    inputs = {"summary": io.file_digest(args.summary)}
    summary = io.read_summary(args.summary)
    corr = None
    notes = []
    if getattr(args, "panel", None):
        inputs["panel"] = io.file_digest(args.panel)
        ids, alleles, G = io.read_panel(args.panel)
        summary, hrec = harmonize(summary, alleles, drop_palindromic=not args.keep_palindromic)
        if hrec.flipped:
            notes.append("flipped: " + ",".join(hrec.flipped))
        if hrec.dropped:
            notes.append("dropped in harmonization: " + ",".join(hrec.dropped))
        corr, _, mono = panel_correlation(G, ids)
        if mono:
            notes.append("monomorphic in the reference data: " + ",".join(mono))
    elif getattr(args, "corr", None):
        inputs["corr"] = io.file_digest(args.corr)
        corr = io.read_correlation(args.corr)
    elif need_corr:
        raise InputError("a correlation matrix (--corr) or reference panel (--panel) is required")
    if corr is not None:
        summary, corr, rec = align(summary, corr)
        if rec.dropped:
            notes.append(rec.message())
    if getattr(args, "selection", None):
        inputs["selection"] = io.file_digest(args.selection)
        sel = io.read_selection(args.selection)
        keep = [v for v in sel.selected_ids if v in summary._index]
        if not keep:
            raise InputError("none of the selected variants are present in the summary data")
        summary = summary.subset(keep)
        if corr is not None:
            corr = corr.subset(keep)
    for n in notes:
        logger.warning(n)
    return summary, corr, inputs, notes


def _estimate(args, summary, corr):
    pcs = None
    if args.method == "ivw":
        res = ivw_uncorrelated(summary)
    elif args.method == "ivw-corr":
        res = ivw_correlated(summary, corr)
    elif args.method == "pca-ivw":
        res, pcs = pca_ivw(summary, corr, args.variance)
    else:
        raise InputError(f"method {args.method} needs summary data")
    return res, pcs


def _se_entry(value, res):
    if value is None or not math.isfinite(value):
        code = "NEG_VARIANCE" if not res.variance_valid else "SINGULAR"
        return "-", code
    return value, None


# ---------------------------------------------------------------- commands

def cmd_estimate(args):
    report = {"tool": "mrcorr", "version": __version__, "command": "estimate",
              "method": args.method, "effects": args.effects}
    if args.method == "2sls":
        if not args.individual:
            raise InputError("--method 2sls requires --individual")
        data = io.read_individual(args.individual)
        inputs = {"individual": io.file_digest(args.individual)}
        res = two_stage_least_squares(data)
        notes, pcs, sens = [], None, None
    else:
        summary, corr, inputs, notes = _load(args, need_corr=args.method != "ivw")
        sens = None
        if args.ridge is not None:
            if corr is None:
                raise InputError("--ridge needs a correlation matrix")
            sens = ridge_sensitivity(summary, corr, args.ridge)
            corr = ridge_adjust(corr, args.ridge)
            if sens.flagged:
                notes.append("RIDGE_SENSITIVE")
        res, pcs = _estimate(args, summary, corr)
        report["n_variants"] = len(summary)
        report["variants"] = list(summary.ids)
    se_value = res.se(args.effects)
    se_out, se_code = _se_entry(se_value, res)
    warnings = list(notes)
    if res.diagnostics is not None:
        warnings += [w for w in res.diagnostics.warnings if w not in warnings]
    if se_code and se_code not in warnings:
        warnings.append(se_code)
    report["estimate"] = {"estimate": res.estimate, "se": se_out, "se_code": se_code,
                          "se_fixed": _se_entry(res.se_fixed, res)[0],
                          "se_random": _se_entry(res.se_random, res)[0],
                          "residual_sigma": res.residual_sigma,
                          "n_instruments": res.n_instruments,
                          "variance_valid": res.variance_valid}
    report["diagnostics"] = None if res.diagnostics is None else res.diagnostics.to_dict()
    if pcs is not None:
        report["pca"] = {"k": pcs.k, "variance_threshold": pcs.variance_threshold,
                         "eigenvalues": pcs.eigenvalues.tolist(),
                         "cumulative_share": pcs.cumulative_share.tolist()}
    if sens is not None:
        report["ridge"] = sens.to_dict()
    report["warnings"] = warnings
    report["provenance"] = {"inputs": inputs, "seed": None, "version": __version__}
    _write_json(report, args.out)
    if args.out not in (None, "-"):
        se_txt = num(se_value) if se_code is None else f"- [{se_code}]"
        print(f"method      {args.method} ({args.effects} effects)")
        print(f"instruments {res.n_instruments}")
        print(f"estimate    {num(res.estimate)} ({se_txt})")
        if res.diagnostics is not None:
            d = res.diagnostics
            print(f"condition   {d.condition_number:.3g}   max|inv| {d.max_abs_inverse_element:.3g}")
        for w in warnings:
            print(f"warning     {w}")
    return 0


def cmd_select(args):
    summary, corr, inputs, _ = _load(args)
    if args.method == "prune":
        if args.rho is None:
            raise InputError("--rho is required for pruning")
        sel = prune(summary, corr, args.rho)
    else:
        if args.pvalue is None:
            raise InputError("--pvalue is required for conditional selection")
        sel = stepwise_conditional(summary, corr, args.pvalue, n=args.n)
    if args.out in (None, "-"):
        io.write_selection(sel, sys.stdout)
    else:
        io.write_selection(sel, args.out)
        print(f"{len(sel.selected_ids)} variants selected: {', '.join(sel.selected_ids)}")
    return 0


def cmd_pca(args):
    summary, corr, inputs, _ = _load(args)
    from .model import build_psi
    from .selection import pca_components
    pcs = pca_components(build_psi(summary, corr), args.variance)
    out = {"tool": "mrcorr", "version": __version__, "command": "pca", **pcs.to_dict(),
           "provenance": {"inputs": inputs}}
    _write_json(out, args.out)
    if args.out not in (None, "-"):
        print(f"k = {pcs.k} components at threshold {args.variance:g}")
        for i, (lam, cs) in enumerate(zip(pcs.eigenvalues, pcs.cumulative_share), 1):
            print(f"PC{i:<4d} {lam:12.4g} {cs:8.4f}")
            if i >= max(pcs.k, 10):
                break
    return 0


def cmd_diagnose(args):
    summary, corr, inputs, notes = _load(args)
    out = {"tool": "mrcorr", "version": __version__, "command": "diagnose",
           "correlation": assess(corr.values).to_dict(),
           "omega": assess(build_omega(summary, corr).values).to_dict(),
           "warnings": notes, "provenance": {"inputs": inputs}}
    _write_json(out, args.out)
    if args.out not in (None, "-"):
        for name in ("correlation", "omega"):
            d = out[name]
            print(f"{name:12s} cond {d['condition_number'] if d['condition_number'] is not None else 'inf'}"
                  f"  det {d['determinant']}  warnings {','.join(d['warnings']) or '-'}")
    return 0


def cmd_correlate(args):
    ids, _, G = io.read_panel(args.panel)
    corr, _, mono = panel_correlation(G, ids)
    if mono:
        print("warning: monomorphic in the reference data: " + ",".join(mono), file=sys.stderr)
    io.write_correlation(corr, args.out if args.out not in (None, "-") else sys.stdout)
    return 0


def load_config(path, seed=None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a JSON file.

    The ``base`` section either names files (``summary`` plus ``corr`` or
    ``panel``) or a ``synthetic`` generator (``kind``: ``haplotype`` or
    ``ar1`` with its keyword arguments). ``observed_seed`` replaces the base
    associations by one draw from their sampling distribution.
    """
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    here = path.parent
    base = cfg.get("base") or {}
    panel = None
    if "synthetic" in base:
        syn = dict(base["synthetic"])
        kind = syn.pop("kind", "haplotype")
        if "causal" in syn:
            syn["causal"] = {int(k): v for k, v in syn["causal"].items()}
        b = haplotype_base(**syn) if kind == "haplotype" else ar1_base(**syn)
        summary, corr, panel = b.summary, b.corr, (b.panel if b.panel.size else None)
    else:
        summary = io.read_summary(io.resolve(here, base["summary"]))
        if "panel" in base:
            ids, alleles, G = io.read_panel(io.resolve(here, base["panel"]))
            summary, _ = harmonize(summary, alleles)
            corr, kept, _ = panel_correlation(G, ids)
            panel = G[:, kept]
        else:
            corr = io.read_correlation(io.resolve(here, base["corr"]))
        summary, corr, _ = align(summary, corr)
        if panel is not None:
            order = [corr.index_of(v) for v in summary.ids]
            panel = panel[:, order]
    if base.get("observed_seed") is not None:
        summary = draw_associations(summary, corr, np.random.default_rng(int(base["observed_seed"])),
                                    float(base.get("observed_effect", 0.0)))
    if cfg.get("reference_panel"):
        ids, alleles, G = io.read_panel(io.resolve(here, cfg["reference_panel"]))
        col = {v: i for i, v in enumerate(ids)}
        panel = G[:, [col[v] for v in summary.ids]]
    specs = [SelectionSpec(s["method"], s.get("value")) for s in cfg.get("selection_specs", [])]
    kwargs = {}
    if specs:
        kwargs["selection_specs"] = tuple(specs)
    return ExperimentConfig(
        design=Design(cfg["design"]), iterations=int(cfg["iterations"]),
        seed=int(seed if seed is not None else cfg.get("seed", 0)),
        base_summary=summary, base_corr=corr,
        causal_effect=float(cfg.get("causal_effect", 0.0)),
        rounding_decimals=cfg.get("rounding_decimals"),
        reference_panel=panel if Design(cfg["design"]) is Design.BOOTSTRAP else None,
        subset_size=cfg.get("subset_size"), effects=cfg.get("effects", "fixed"),
        sample_size=cfg.get("sample_size"), **kwargs)


def cmd_simulate(args):
    config = load_config(args.config, seed=args.seed)
    result = run_experiment(config, n_threads=args.threads)
    target = args.out if args.out not in (None, "-") else sys.stdout
    io.write_experiment(result, target)
    if args.iterations_out:
        io.write_iterations(result, args.iterations_out)
    if args.out not in (None, "-"):
        print(f"{'Selection approach':28s} {'Mean est':>9s} {'SD':>7s} {'Mean SE':>8s} {'Power%':>7s} {'undef':>6s}")
        for r in result.rows:
            print(f"{r.label:28s} {num(r.mean_estimate):>9s} {num(r.sd_estimate):>7s} "
                  f"{num(r.mean_se):>8s} {num(100 * r.empirical_power, 1):>7s} {r.undefined_se_count:>6d}")
        print(f"seed {result.seed}  config {result.config_hash[:12]}")
    return 0


def cmd_plotdata(args):
    summary, corr, inputs, _ = _load(args, need_corr=args.method != "ivw")
    selected = set(summary.ids)
    full = summary
    if args.selection:
        # plot every variant, flag the selected ones
        saved = args.selection
        args.selection = None
        full, _, _, _ = _load(args, need_corr=args.method != "ivw")
        args.selection = saved
    res, _ = _estimate(args, summary, corr)
    target = args.out if args.out not in (None, "-") else sys.stdout
    with io.open_output(target) as fh:
        fh.write(f"#method\t{args.method}\n#slope\t{io.fmt(res.estimate)}\n")
        fh.write("variant_id\tbeta_x\tse_x\tbeta_y\tse_y\tci_halfwidth_x\tci_halfwidth_y\tselected\n")
        for i, v in enumerate(full.ids):
            fh.write("\t".join([v, io.fmt(full.beta_x[i]), io.fmt(full.se_x[i]),
                                io.fmt(full.beta_y[i]), io.fmt(full.se_y[i]),
                                io.fmt(Z_975 * full.se_x[i]), io.fmt(Z_975 * full.se_y[i]),
                                "1" if v in selected else "0"]) + "\n")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> Parser:
    p = Parser(prog="mrcorr", description="Mendelian randomization with correlated variants")
    p.add_argument("--version", action="version", version=f"mrcorr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    def inputs(sp, corr=True):
        sp.add_argument("--summary", required=True, help="summary statistics TSV")
        if corr:
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--corr", help="signed correlation matrix TSV")
            g.add_argument("--panel", help="reference genotype panel TSV")
            sp.add_argument("--keep-palindromic", action="store_true",
                            help="keep A/T and C/G variants when harmonizing to a panel")
        sp.add_argument("--out", help="output path (default: standard output)")

    e = sub.add_parser("estimate", help="causal estimate")
    e.add_argument("--summary")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--corr")
    g.add_argument("--panel")
    e.add_argument("--keep-palindromic", action="store_true")
    e.add_argument("--individual", help="individual-level TSV for --method 2sls")
    e.add_argument("--selection", help="selection TSV restricting the variants")
    e.add_argument("--method", choices=["ivw", "ivw-corr", "pca-ivw", "2sls"], default="ivw-corr")
    e.add_argument("--effects", choices=["fixed", "random"], default="fixed")
    e.add_argument("--ridge", type=float, help="add this value to the correlation diagonal")
    e.add_argument("--variance", type=float, default=0.99, help="PCA variance threshold")
    e.add_argument("--out")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("select", help="instrument selection")
    inputs(s)
    s.add_argument("--method", choices=["prune", "conditional"], default="prune")
    s.add_argument("--rho", type=float)
    s.add_argument("--pvalue", type=float)
    s.add_argument("--n", type=float, help="risk-factor sample size for conditional analysis")
    s.set_defaults(func=cmd_select)

    c = sub.add_parser("pca", help="principal components of the weighted correlation matrix")
    inputs(c)
    c.add_argument("--variance", type=float, default=0.99)
    c.set_defaults(func=cmd_pca)

    d = sub.add_parser("diagnose", help="conditioning report for Omega and rho")
    inputs(d)
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("correlate", help="correlation matrix from a genotype panel")
    r.add_argument("--panel", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_correlate)

    m = sub.add_parser("simulate", help="run a simulation experiment")
    m.add_argument("--config", required=True, help="experiment config (JSON)")
    m.add_argument("--seed", type=int, help="override the config seed")
    m.add_argument("--threads", type=int, help="worker threads (default: $MRCORR_THREADS or 1)")
    m.add_argument("--out")
    m.add_argument("--iterations-out", help="write per-iteration records here")
    m.set_defaults(func=cmd_simulate)

    pl = sub.add_parser("plotdata", help="per-variant records and fitted slope for plotting")
    inputs(pl)
    pl.add_argument("--selection")
    pl.add_argument("--method", choices=["ivw", "ivw-corr", "pca-ivw"], default="ivw-corr")
    pl.add_argument("--variance", type=float, default=0.99)
    pl.set_defaults(func=cmd_plotdata)
    return p


def _fail(code, message, status):
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("USAGE", str(exc), 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if not getattr(args, "func", None):
        return _fail("USAGE", "a subcommand is required", 1)
    if args.command == "estimate" and args.method != "2sls" and not args.summary:
        return _fail("USAGE", "--summary is required", 1)
    try:
        return args.func(args)
    except NumericalError as exc:
        return _fail(exc.code, str(exc), 2)
    except MRError as exc:
        return _fail(exc.code, str(exc), 1)
    except np.linalg.LinAlgError as exc:
        return _fail("NUMERICAL_ERROR", str(exc), 2)
    except (OSError, KeyError, ValueError) as exc:
        return _fail("INPUT_ERROR", f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
