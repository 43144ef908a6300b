import json
import subprocess
import sys

import numpy as np
import pytest

from mrcorr import CorrelationMatrix, SummarySet, align, ivw_correlated, prune
from mrcorr import io
from mrcorr.cli import main
from mrcorr.selection import stepwise_conditional
from mrcorr.simulation import (STANDARD_SPECS, Design, ExperimentConfig, direct_mvn, haplotype_base,
                               panel_correlation)

from conftest import individual_data, make_pair, make_summary


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def dataset(tmp_path):
    """Haplotype panel plus summary statistics for its polymorphic variants."""
    b = haplotype_base(n_variants=12, n_haplotypes=8, panel_size=300, switch_prob=0.2, seed=6)
    s = b.summary.replace(beta_y=b.summary.beta_x * 0.2 + 0.002 * np.sin(np.arange(len(b.summary))))
    alleles = {v: ("A", "G") for v in s.ids}
    io.write_summary(s, tmp_path / "sum.tsv")
    io.write_panel(list(s.ids), alleles, b.panel, tmp_path / "panel.tsv")
    io.write_correlation(b.corr, tmp_path / "corr.tsv")
    return tmp_path, s, b


class TestRoundTrip:
    def test_summary(self, tmp_path, rng):
        s = make_summary(rng, 7, maf=True, n=1234)
        io.write_summary(s, tmp_path / "s.tsv")
        back = io.read_summary(tmp_path / "s.tsv")
        assert back == s

    def test_summary_missing_optional(self, tmp_path, rng):
        s = make_summary(rng, 3, maf=True).replace(maf=np.array([0.2, np.nan, 0.3]))
        io.write_summary(s, tmp_path / "s.tsv")
        assert "NA" in (tmp_path / "s.tsv").read_text()
        back = io.read_summary(tmp_path / "s.tsv")
        assert np.isnan(back.maf[1]) and back.maf[0] == 0.2

    def test_correlation(self, tmp_path, rng):
        _, c = make_pair(rng, 6)
        io.write_correlation(c, tmp_path / "c.tsv")
        assert io.read_correlation(tmp_path / "c.tsv") == c

    def test_selection(self, tmp_path, rng):
        s, c = make_pair(rng, 10)
        for sel in (prune(s, c, 0.3), stepwise_conditional(s, c, 0.05, n=5000)):
            io.write_selection(sel, tmp_path / "sel.tsv")
            assert io.read_selection(tmp_path / "sel.tsv") == sel

    def test_experiment(self, tmp_path):
        b = haplotype_base(n_variants=10, seed=1, dosage_jitter=2e-5)
        res = direct_mvn(ExperimentConfig(Design.DIRECT, 25, 3, b.summary, b.corr, STANDARD_SPECS,
                                          rounding_decimals=2))
        io.write_experiment(res, tmp_path / "e.tsv")
        back = io.read_experiment(tmp_path / "e.tsv")
        assert back.rows == res.rows and back.config_hash == res.config_hash
        assert back.failure_codes == res.failure_codes and back.seed == 3

    def test_individual(self, tmp_path, rng):
        d = individual_data(rng, 50, 3, False)
        io.write_individual(d, tmp_path / "i.tsv")
        back = io.read_individual(tmp_path / "i.tsv")
        np.testing.assert_array_equal(back.genotypes, d.genotypes)
        np.testing.assert_array_equal(back.outcome, d.outcome)

    def test_seventeen_digits(self, tmp_path):
        x = 0.1 + 0.2
        s = SummarySet(["a"], "A", "G", [x], [1 / 3], [np.pi], [np.nextafter(1.0, 2.0)])
        io.write_summary(s, tmp_path / "s.tsv")
        back = io.read_summary(tmp_path / "s.tsv")
        assert back.beta_x[0] == x and back.se_y[0] == np.nextafter(1.0, 2.0)

    def test_parse_errors(self, tmp_path):
        (tmp_path / "bad.tsv").write_text("variant_id\tbeta_x\nv1\t0.1\n")
        with pytest.raises(Exception, match="missing required columns"):
            io.read_summary(tmp_path / "bad.tsv")


class TestCLI:
    def test_single_variant_ivw(self, tmp_path, capsys):
        s = SummarySet(["v1"], "A", "G", [2.0], [0.1], [1.0], [0.5])
        io.write_summary(s, tmp_path / "one.tsv")
        code, out, _ = run(["estimate", "--summary", tmp_path / "one.tsv", "--method", "ivw"], capsys)
        rep = json.loads(out)
        assert code == 0
        assert rep["estimate"]["estimate"] == 0.5 and rep["estimate"]["se"] == 0.25
        assert "summary" in rep["provenance"]["inputs"]

    def test_correlate_excludes_monomorphic(self, tmp_path, capsys):
        G = np.array([[0, 1, 2], [1, 1, 0], [2, 1, 1], [0, 1, 1]], dtype=float)
        io.write_panel(["a", "b", "c"], {v: ("A", "G") for v in "abc"}, G, tmp_path / "p.tsv")
        code, out, err = run(["correlate", "--panel", tmp_path / "p.tsv", "--out", tmp_path / "c.tsv"], capsys)
        assert code == 0 and "b" in err and "monomorphic" in err
        assert io.read_correlation(tmp_path / "c.tsv").ids == ("a", "c")

    def test_pipeline_matches_library(self, dataset, capsys):
        d, s, b = dataset
        assert run(["correlate", "--panel", d / "panel.tsv", "--out", d / "pc.tsv"], capsys)[0] == 0
        assert run(["select", "--summary", d / "sum.tsv", "--corr", d / "pc.tsv", "--method", "prune",
                    "--rho", 0.2, "--out", d / "sel.tsv"], capsys)[0] == 0
        code, out, _ = run(["estimate", "--summary", d / "sum.tsv", "--corr", d / "pc.tsv",
                            "--selection", d / "sel.tsv", "--method", "ivw-corr"], capsys)
        assert code == 0
        rep = json.loads(out)

        ids, alleles, G = io.read_panel(d / "panel.tsv")
        corr, _, _ = panel_correlation(G, ids)
        summ, corr, _ = align(io.read_summary(d / "sum.tsv"), corr)
        sel = prune(summ, corr, 0.2)
        lib = ivw_correlated(summ.subset(sel.selected_ids), corr.subset(sel.selected_ids))
        assert rep["variants"] == list(sel.selected_ids)
        assert rep["estimate"]["estimate"] == lib.estimate
        assert rep["estimate"]["se"] == lib.se_fixed

    def test_estimate_with_panel_and_pca(self, dataset, capsys):
        d, s, _ = dataset
        code, out, _ = run(["estimate", "--summary", d / "sum.tsv", "--panel", d / "panel.tsv",
                            "--method", "pca-ivw", "--variance", 0.99, "--effects", "random"], capsys)
        rep = json.loads(out)
        assert code == 0 and rep["pca"]["k"] >= 1 and rep["effects"] == "random"

    def test_ridge_report(self, dataset, capsys):
        d, _, _ = dataset
        code, out, _ = run(["estimate", "--summary", d / "sum.tsv", "--corr", d / "corr.tsv",
                            "--ridge", 0.01], capsys)
        rep = json.loads(out)
        assert code == 0 and "RIDGE_ADJUSTED" in rep["warnings"] and "shift_in_se" in rep["ridge"]

    def test_undefined_se_rendered_as_dash(self, tmp_path, capsys):
        s = SummarySet(["v1", "v2", "v3"], "AAA", "GGG", [1.0, -1.0, 1.0], [0.1] * 3, [0.3, 0.5, 0.2], [1.0] * 3)
        c = CorrelationMatrix(s.ids, [[1, .9, -.9], [.9, 1, .9], [-.9, .9, 1]])
        io.write_summary(s, tmp_path / "s.tsv")
        io.write_correlation(c, tmp_path / "c.tsv")
        code, out, _ = run(["estimate", "--summary", tmp_path / "s.tsv", "--corr", tmp_path / "c.tsv"], capsys)
        rep = json.loads(out)
        assert code == 0 and rep["estimate"]["se"] == "-" and rep["estimate"]["se_code"] == "NEG_VARIANCE"
        code, out, _ = run(["estimate", "--summary", tmp_path / "s.tsv", "--corr", tmp_path / "c.tsv",
                            "--out", tmp_path / "r.json"], capsys)
        assert "(- [NEG_VARIANCE])" in out

    def test_singular_exit_code(self, tmp_path, capsys):
        s = SummarySet(["v1", "v2"], "AA", "GG", [0.1, 0.1], [0.1] * 2, [0.05, 0.05], [0.1] * 2)
        io.write_summary(s, tmp_path / "s.tsv")
        io.write_correlation(CorrelationMatrix(s.ids, np.ones((2, 2))), tmp_path / "c.tsv")
        code, _, err = run(["estimate", "--summary", tmp_path / "s.tsv", "--corr", tmp_path / "c.tsv"], capsys)
        assert code == 2 and json.loads(err)["error"] == "SINGULAR"

    def test_usage_errors(self, tmp_path, capsys):
        assert run(["frobnicate"], capsys)[0] == 1
        assert run([], capsys)[0] == 1
        assert run(["estimate", "--summary", tmp_path / "missing.tsv", "--method", "ivw"], capsys)[0] == 1
        code, _, err = run(["select", "--summary", tmp_path / "missing.tsv"], capsys)
        assert code == 1 and "error" in json.loads(err)

    def test_conditional_select(self, dataset, capsys):
        d, s, _ = dataset
        code, out, _ = run(["select", "--summary", d / "sum.tsv", "--corr", d / "corr.tsv",
                            "--method", "conditional", "--pvalue", 1e-4], capsys)
        assert code == 0 and out.startswith("#method\tconditional")

    def test_pca_and_diagnose(self, dataset, capsys):
        d, _, _ = dataset
        code, out, _ = run(["pca", "--summary", d / "sum.tsv", "--corr", d / "corr.tsv", "--variance", 0.9], capsys)
        assert code == 0 and json.loads(out)["k"] >= 1
        code, out, _ = run(["diagnose", "--summary", d / "sum.tsv", "--corr", d / "corr.tsv"], capsys)
        rep = json.loads(out)
        assert code == 0 and {"correlation", "omega"} <= rep.keys()

    def test_plotdata(self, dataset, capsys):
        d, s, _ = dataset
        run(["select", "--summary", d / "sum.tsv", "--corr", d / "corr.tsv", "--rho", 0.3,
             "--out", d / "sel.tsv"], capsys)
        code, _, _ = run(["plotdata", "--summary", d / "sum.tsv", "--corr", d / "corr.tsv",
                          "--selection", d / "sel.tsv", "--out", d / "plot.tsv"], capsys)
        assert code == 0
        lines = (d / "plot.tsv").read_text().splitlines()
        assert lines[1].startswith("#slope") and len(lines) == 3 + len(s)
        row = lines[3].split("\t")
        assert float(row[5]) == pytest.approx(1.959964 * float(row[2]))
        code, out, _ = run(["plotdata", "--summary", d / "sum.tsv", "--method", "ivw"], capsys)
        assert code == 0 and out.startswith("#method")

    def test_simulate_config(self, tmp_path, capsys):
        cfg = {"design": "DirectMVN", "iterations": 30, "seed": 4, "rounding_decimals": 3,
               "base": {"synthetic": {"kind": "haplotype", "n_variants": 12, "dosage_jitter": 2e-5,
                                      "causal": {"0": 0.15}, "seed": 3}},
               "selection_specs": [{"method": "prune", "value": 0.4}, {"method": "pca", "value": 0.99}]}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        code, _, _ = run(["simulate", "--config", tmp_path / "cfg.json", "--out", tmp_path / "r.tsv",
                          "--iterations-out", tmp_path / "it.tsv"], capsys)
        assert code == 0
        res = io.read_experiment(tmp_path / "r.tsv")
        assert [r.label for r in res.rows] == ["Pruning at rho = 0.4", "PCA at 99% of variance"]
        assert len((tmp_path / "it.tsv").read_text().splitlines()) == 31

    def test_simulate_from_files(self, dataset, capsys):
        d, _, _ = dataset
        cfg = {"design": "BootstrapCorrelation", "iterations": 10, "seed": 1,
               "base": {"summary": "sum.tsv", "panel": "panel.tsv"},
               "selection_specs": [{"method": "prune", "value": 0.5}]}
        (d / "boot.json").write_text(json.dumps(cfg))
        code, out, _ = run(["simulate", "--config", d / "boot.json"], capsys)
        assert code == 0 and "#design\tBootstrapCorrelation" in out

    def test_module_entry_point(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "mrcorr", "--version"], capture_output=True, text=True)
        assert r.returncode == 0 and "mrcorr" in r.stdout
