import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrcorr import (CorrelationMatrix, IndividualData, InputError, NotPositiveDefinite, SingularDesign,
                    SingularWeightMatrix, SummarySet, UndefinedEstimate, allele_score_estimate,
                    ivw_correlated, ivw_correlated_cholesky, ivw_uncorrelated, multivariable_weights,
                    pca_ivw, summarize, two_stage_least_squares)
from mrcorr.estimators import generalized_residual_sigma, gls_ivw

from conftest import individual_data, make_pair, make_summary, orthogonal_genotypes


def simple(bx, by, se_y, se_x=None):
    J = len(bx)
    ids = [f"v{i + 1}" for i in range(J)]
    return SummarySet(ids, ["A"] * J, ["G"] * J, bx, se_x or [0.1] * J, by, se_y)


def meta_analysis(bx, by, se_y):
    """Fixed-effect meta-analysis of ratio estimates, written as a plain loop."""
    num = den = 0.0
    for x, y, s in zip(bx, by, se_y):
        ratio, w = y / x, (x / s) ** 2
        num += w * ratio
        den += w
    return num / den, den ** -0.5


class TestUncorrelated:
    def test_single_variant_ratio(self):
        r = ivw_uncorrelated(simple([2.0], [1.0], [0.5]))
        assert r.estimate == 0.5 and r.se_fixed == 0.25
        assert r.se_random == r.se_fixed and math.isnan(r.residual_sigma)

    def test_equal_weight_mean(self):
        assert ivw_uncorrelated(simple([1.0, 1.0], [1.0, 3.0], [1.0, 1.0])).estimate == 2.0

    def test_matches_meta_analysis_loop(self, rng):
        for _ in range(20):
            s = make_summary(rng, 5)
            est, se = meta_analysis(s.beta_x, s.beta_y, s.se_y)
            r = ivw_uncorrelated(s)
            assert r.estimate == pytest.approx(est, rel=1e-12)
            assert r.se_fixed == pytest.approx(se, rel=1e-12)

    def test_random_effects_floor(self, rng):
        s = make_summary(rng, 6)
        r = ivw_uncorrelated(s)
        resid = (s.beta_y - r.estimate * s.beta_x) / s.se_y
        sigma = math.sqrt(np.sum(resid ** 2) / 5)
        assert r.residual_sigma == pytest.approx(sigma, rel=1e-12)
        assert r.se_random == pytest.approx(r.se_fixed * max(sigma, 1), rel=1e-12)
        assert r.se_random >= r.se_fixed

    def test_all_zero_beta_x(self):
        with pytest.raises(UndefinedEstimate):
            ivw_uncorrelated(simple([0.0, 0.0], [1.0, 1.0], [1.0, 1.0]))


class TestCorrelated:
    def test_identity_equals_uncorrelated(self, rng):
        s = make_summary(rng, 7)
        a = ivw_correlated(s, CorrelationMatrix.identity(s.ids))
        b = ivw_uncorrelated(s)
        for f in ("estimate", "se_fixed", "se_random", "residual_sigma"):
            assert getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-12)

    def test_duplicated_variants_singular(self):
        s = simple([0.1, 0.1], [0.05, 0.05], [0.1, 0.1])
        with pytest.raises(SingularWeightMatrix):
            ivw_correlated(s, CorrelationMatrix(s.ids, np.ones((2, 2))))

    def test_matches_gls_formula(self, rng):
        s, c = make_pair(rng, 6)
        om = np.outer(s.se_y, s.se_y) * c.values
        W = np.linalg.inv(om)
        prec = s.beta_x @ W @ s.beta_x
        r = ivw_correlated(s, c)
        assert r.estimate == pytest.approx((s.beta_x @ W @ s.beta_y) / prec, rel=1e-10)
        assert r.se_fixed == pytest.approx(prec ** -0.5, rel=1e-10)
        assert r.residual_sigma == pytest.approx(
            generalized_residual_sigma(s, c, r.estimate), rel=1e-10)
        assert r.diagnostics is not None and r.variance_valid

    def test_negative_precision_flagged(self):
        # an indefinite "correlation" matrix can make bx' Omega^-1 bx negative
        s = simple([1.0, -1.0, 1.0], [0.3, 0.5, 0.2], [1.0, 1.0, 1.0])
        c = CorrelationMatrix(s.ids, [[1, .9, -.9], [.9, 1, .9], [-.9, .9, 1]])
        assert s.beta_x @ np.linalg.solve(c.values, s.beta_x) < 0
        r = ivw_correlated(s, c)
        assert not r.variance_valid and math.isnan(r.se_fixed) and math.isnan(r.se_random)
        assert math.isfinite(r.estimate)
        assert {"NEG_VARIANCE", "NOT_POSITIVE_DEFINITE"} <= set(r.diagnostics.warnings)

    def test_permutation_invariance(self, rng):
        s, c = make_pair(rng, 8)
        perm = rng.permutation(8)
        s2 = s.take(perm)
        c2 = CorrelationMatrix([s.ids[i] for i in perm], c.values[np.ix_(perm, perm)])
        assert ivw_correlated(s2, c2).estimate == pytest.approx(ivw_correlated(s, c).estimate, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
    def test_se_scaling(self, J, factor, seed):
        r = np.random.default_rng(seed)
        s, c = make_pair(r, J)
        a = ivw_correlated(s, c, assess=False)
        b = ivw_correlated(s.replace(se_y=s.se_y * factor), c, assess=False)
        assert b.estimate == pytest.approx(a.estimate, rel=1e-12, abs=1e-300)
        assert b.se_fixed == pytest.approx(a.se_fixed * factor, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_random_se_not_below_fixed(self, J, seed):
        s, c = make_pair(np.random.default_rng(seed), J)
        r = ivw_correlated(s, c)
        assert r.se_random >= r.se_fixed and r.n_instruments == J


class TestCholesky:
    def test_identity_is_through_origin_ols(self, rng):
        s = make_summary(rng, 5).replace(se_y=np.ones(5))
        r = ivw_correlated_cholesky(s, CorrelationMatrix.identity(s.ids))
        slope, *_ = np.linalg.lstsq(s.beta_x[:, None], s.beta_y, rcond=None)
        assert r.estimate == pytest.approx(slope[0], rel=1e-12)

    def test_matches_solve_path(self, rng):
        for _ in range(50):
            s, c = make_pair(rng, int(rng.integers(1, 10)))
            a, b = ivw_correlated_cholesky(s, c), ivw_correlated(s, c)
            assert a.estimate == pytest.approx(b.estimate, rel=1e-10)
            assert a.se_fixed == pytest.approx(b.se_fixed, rel=1e-10)
            if len(s) > 1:
                # whitened and generalised residual scales agree
                assert a.residual_sigma == pytest.approx(b.residual_sigma, rel=1e-8)

    def test_near_singular_pair_flagged(self):
        s = simple([0.1, 0.12], [0.05, 0.05], [0.1, 0.1])
        c = CorrelationMatrix(s.ids, [[1, 0.999999], [0.999999, 1]])
        try:
            r = ivw_correlated_cholesky(s, c)
        except NotPositiveDefinite:
            return
        assert "NEAR_SINGULAR" in r.diagnostics.warnings

    def test_not_positive_definite(self):
        s = simple([0.1, 0.12, 0.2], [0.05, 0.05, 0.1], [0.1, 0.1, 0.1])
        m = np.array([[1, 0.9, -0.9], [0.9, 1, 0.9], [-0.9, 0.9, 1]])
        with pytest.raises(NotPositiveDefinite):
            ivw_correlated_cholesky(s, CorrelationMatrix(s.ids, m))


class TestPCA:
    def test_full_threshold_equals_correlated(self, rng):
        s, c = make_pair(rng, 6)
        r, pcs = pca_ivw(s, c, 1.0)
        assert pcs.k == 6
        assert r.estimate == pytest.approx(ivw_correlated(s, c).estimate, rel=1e-8)
        assert r.se_fixed == pytest.approx(ivw_correlated(s, c).se_fixed, rel=1e-8)

    def test_rank_one_psi_one_component(self):
        s = simple([0.1, 0.2, 0.3], [0.01, 0.02, 0.03], [0.1, 0.1, 0.1])
        r, pcs = pca_ivw(s, CorrelationMatrix(s.ids, np.ones((3, 3))), 0.999)
        assert pcs.k == 1 and pcs.cumulative_share[0] == pytest.approx(1.0)
        assert r.estimate == pytest.approx(0.1, rel=1e-10)

    def test_report_contents(self, rng):
        s, c = make_pair(rng, 5)
        _, pcs = pca_ivw(s, c, 0.9)
        assert pcs.loadings.shape == (5, pcs.k)
        assert np.all(np.diff(pcs.eigenvalues) <= 0)


def two_sls_with_ones(G, x, y):
    """Textbook 2SLS with an explicit intercept column in both stages."""
    n = len(x)
    Z = np.column_stack([np.ones(n), G])
    P = Z @ np.linalg.solve(Z.T @ Z, Z.T)
    X = np.column_stack([np.ones(n), x])
    Xh = P @ X
    coef = np.linalg.solve(Xh.T @ X, Xh.T @ y)
    return coef[1]


class TestTwoStage:
    def test_matches_textbook_formula(self, rng):
        for correlated in (False, True):
            d = individual_data(rng, 800, 4, correlated)
            r = two_stage_least_squares(d)
            assert r.estimate == pytest.approx(
                two_sls_with_ones(d.genotypes, d.risk_factor, d.outcome), rel=1e-9)

    def test_single_binary_instrument_is_wald_ratio(self, rng):
        g = rng.binomial(1, 0.4, 500).astype(float)
        x = 0.5 * g + rng.normal(size=500)
        y = 0.2 * x + rng.normal(size=500)
        r = two_stage_least_squares(IndividualData(g, x, y))
        wald = (y[g == 1].mean() - y[g == 0].mean()) / (x[g == 1].mean() - x[g == 0].mean())
        assert r.estimate == pytest.approx(wald, rel=1e-10)

    def test_null_model_calibrated(self):
        covered = 0
        for seed in range(200):
            r_ = np.random.default_rng(seed)
            d = individual_data(r_, 3000, 3, False, theta=0.0)
            y = r_.normal(size=d.n)
            r = two_stage_least_squares(IndividualData(d.genotypes, d.risk_factor, y))
            covered += abs(r.estimate) < 4 * r.se_fixed
        assert covered / 200 >= 0.99

    def test_singular_design_names_columns(self, rng):
        G = rng.binomial(2, 0.3, size=(200, 3)).astype(float)
        G = np.column_stack([G, G[:, 0] + G[:, 1]])
        x, y = rng.normal(size=200), rng.normal(size=200)
        with pytest.raises(SingularDesign) as exc:
            two_stage_least_squares(IndividualData(G, x, y, ids=("a", "b", "c", "d")))
        assert set(exc.value.collinear_columns) == {"a", "b", "d"}

    def test_individual_data_validation(self, rng):
        with pytest.raises(InputError):
            IndividualData(np.ones((5, 1)) * [[0], [1], [2], [1], [0]] @ np.ones((1, 5)), np.zeros(5), np.zeros(5))
        G = rng.binomial(2, 0.3, size=(20, 2)).astype(float)
        G[:, 1] = 1.0
        with pytest.raises(InputError):
            IndividualData(G, np.zeros(20), np.zeros(20))


class TestSummarize:
    def test_matches_per_variant_lstsq(self, rng):
        d = individual_data(rng, 500, 5, True)
        for pooled in (True, False):
            s, c = summarize(d, pooled_residual=pooled)
            for j in range(5):
                A = np.column_stack([np.ones(d.n), d.genotypes[:, j]])
                (ax, bx), rss, *_ = np.linalg.lstsq(A, d.risk_factor, rcond=None)
                assert s.beta_x[j] == pytest.approx(bx, rel=1e-12)
                (_, by), rss_y, *_ = np.linalg.lstsq(A, d.outcome, rcond=None)
                assert s.beta_y[j] == pytest.approx(by, rel=1e-12)
                if not pooled:
                    sxx = np.sum((d.genotypes[:, j] - d.genotypes[:, j].mean()) ** 2)
                    assert s.se_x[j] == pytest.approx(math.sqrt(rss[0] / (d.n - 2) / sxx), rel=1e-10)
            np.testing.assert_allclose(c.values, np.corrcoef(d.genotypes.T), rtol=1e-12, atol=1e-14)

    def test_standardized_genotype_slope_is_covariance(self, rng):
        g = rng.normal(size=300)
        g = (g - g.mean()) / g.std()
        x = rng.normal(size=300)
        s, _ = summarize(IndividualData(g, x, rng.normal(size=300)))
        assert s.beta_x[0] == pytest.approx(np.mean(g * (x - x.mean())), rel=1e-12)

    def test_identical_columns_exact_unit_correlation(self, rng):
        g = rng.binomial(2, 0.3, 100).astype(float)
        _, c = summarize(IndividualData(np.column_stack([g, g]), rng.normal(size=100), rng.normal(size=100)))
        assert c.values[0, 1] == 1.0

    def test_correlated_ivw_equals_2sls(self, rng):
        d = individual_data(rng, 2000, 4, True)
        s, c = summarize(d)
        assert ivw_correlated(s, c).estimate == pytest.approx(two_stage_least_squares(d).estimate, rel=1e-6)

    def test_se_correspondence_up_to_sigma(self, rng):
        # pooled-scale SE equals 2SLS SE after swapping the residual scale
        d = individual_data(rng, 2000, 4, True)
        s, c = summarize(d)
        a, b = ivw_correlated(s, c), two_stage_least_squares(d)
        sd_y = np.std(d.outcome, ddof=1)
        assert a.se_fixed / sd_y == pytest.approx(b.se_fixed / b.residual_sigma, rel=1e-6)


class TestAlleleScore:
    def test_unit_weight_is_single_instrument(self, rng):
        d = individual_data(rng, 600, 3, True)
        w = np.array([1.0, 0.0, 0.0])
        single = two_stage_least_squares(IndividualData(d.genotypes[:, :1], d.risk_factor, d.outcome))
        assert allele_score_estimate(d, w).estimate == pytest.approx(single.estimate, rel=1e-12)

    def test_orthogonal_univariable_weights(self, rng):
        G = orthogonal_genotypes(4, 40)
        n = len(G)
        u = rng.normal(size=n)
        x = G @ [0.3, 0.2, 0.1, 0.25] + u + rng.normal(size=n)
        d = IndividualData(G, x, 0.2 * x + u + rng.normal(size=n))
        s, _ = summarize(d)
        assert allele_score_estimate(d, s.beta_x).estimate == pytest.approx(
            two_stage_least_squares(d).estimate, rel=1e-8)

    def test_correlated_multivariable_weights(self, rng):
        d = individual_data(rng, 2000, 5, True)
        assert allele_score_estimate(d, multivariable_weights(d)).estimate == pytest.approx(
            two_stage_least_squares(d).estimate, rel=1e-8)

    @pytest.mark.parametrize("w", [[0.0, 0.0], [np.nan, 1.0], [1.0]])
    def test_bad_weights(self, rng, w):
        d = individual_data(rng, 100, 2, False)
        with pytest.raises(InputError):
            allele_score_estimate(d, w)

    def test_zero_variance_score(self):
        G = np.array([[0, 1], [1, 0], [2, 1], [1, 2], [0, 1]] * 4, dtype=float)
        G[:, 1] = 2 - G[:, 0]
        d = IndividualData(G, np.arange(20.0), np.arange(20.0) % 3)
        with pytest.raises(InputError):
            allele_score_estimate(d, [1.0, 1.0])


def test_gls_rejects_singular():
    with pytest.raises(SingularWeightMatrix):
        gls_ivw(np.array([1.0, 1.0]), np.array([1.0, 2.0]), np.ones((2, 2)))
