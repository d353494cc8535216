import math

import numpy as np
import pytest

from spatialcomp.basis import (
    FRKPrior,
    LKPrior,
    build_basis,
    eval_bisquare,
    eval_wendland,
    frk_blocks,
    frk_fit,
    frk_loglik,
    knot_grid,
    lk_alpha,
    lk_fit,
    lk_loglik,
    lk_marginal_variance,
    lowrank_fit,
    lowrank_predict,
    LowRankFit,
    pp_build,
    pp_fit,
    pp_fit_predict,
    pp_loglik,
    sar_matrix,
)
from spatialcomp.gpcore import CovarianceSpec, GridGeometry, Points, TrendSpec, krige, loglik, simulate_gp
from spatialcomp.numerics import pairwise_distances


def naive_loglik(y, X, S):
    Si = np.linalg.inv(S)
    beta = np.linalg.solve(X.T @ Si @ X, X.T @ Si @ y)
    r = y - X @ beta
    sign, logdet = np.linalg.slogdet(S)
    return -0.5 * (len(y) * math.log(2 * math.pi) + logdet + r @ Si @ r)


def naive_predict(y, X, S, C0, V0, X0):
    """Conditional Gaussian of new observations given cov S, cross C0, prior var V0."""
    Si = np.linalg.inv(S)
    V = np.linalg.inv(X.T @ Si @ X)
    beta = V @ X.T @ Si @ y
    mean = X0 @ beta + C0.T @ Si @ (y - X @ beta)
    g = X0 - C0.T @ Si @ X
    var = V0 - np.einsum("ij,ij->j", C0, Si @ C0) + np.einsum("ij,jk,ik->i", g, V, g)
    return mean, var


def lk_dense_cov(basis, prior, a, b=None):
    """Dense Sigma_w via explicit Q_r inverses and normalization."""
    b = a if b is None else b
    alpha = lk_alpha(basis.R, prior.nu)
    out = 0.0
    for r, res in enumerate(basis.resolutions):
        B = sar_matrix(res, prior.kappa).toarray()
        Qi = np.linalg.inv(B @ B)
        Ha = res.evaluate(a).toarray()
        Hb = res.evaluate(b).toarray()
        na = np.sqrt(np.einsum("ij,jk,ik->i", Ha, Qi, Ha))
        nb = np.sqrt(np.einsum("ij,jk,ik->i", Hb, Qi, Hb))
        out = out + alpha[r] * (Ha / na[:, None]) @ Qi @ (Hb / nb[:, None]).T
    return prior.sigma2 * out


@pytest.fixture(scope="module")
def field400():
    rng = np.random.default_rng(0)
    coords = rng.uniform([0, 0], [3, 2], size=(400, 2))
    y = 5 + np.sin(2 * coords[:, 0]) + np.cos(3 * coords[:, 1]) + 0.3 * rng.normal(size=400)
    return Points(coords, y, TrendSpec("linear"))


class TestBasisFunctions:
    def test_bisquare(self):
        assert eval_bisquare(0.0, 2.0) == 1.0
        assert eval_bisquare(2.0, 2.0) == 0.0
        assert eval_bisquare(2.0 - 1e-9, 2.0) < 1e-16
        assert eval_bisquare(1.0, 2.0) == pytest.approx(0.5625)
        assert eval_bisquare(3.0, 2.0) == 0.0

    def test_wendland(self):
        assert eval_wendland(0.0) == pytest.approx(1.0)
        assert eval_wendland(1.0) == 0.0
        assert eval_wendland(0.5) == pytest.approx(0.5 ** 6 * 20.75 / 3, rel=1e-12)
        assert eval_wendland(0.5) == pytest.approx(0.108073, abs=1e-6)
        assert eval_wendland(1.5) == 0.0
        d = np.linspace(0, 1, 101)
        assert np.all(np.diff(eval_wendland(d)) <= 0)


class TestBuildBasis:
    def test_unit_square_coverage(self):
        b = build_basis([[0, 1], [0, 1]], R=1, family="wendland", coarsest_spacing=0.5, overlap=2.0)
        assert b.K == 4
        np.testing.assert_allclose(np.sort(b.resolutions[0].centers[:, 0]), [0.25, 0.25, 0.75, 0.75])
        pts = np.random.default_rng(1).uniform(0.05, 0.95, size=(200, 2))
        assert np.all(np.asarray(b.evaluate(pts).sum(axis=1)).ravel() > 0)

    def test_quadrupling_and_halving(self):
        b = build_basis(GridGeometry(60, 100), R=4, family="bisquare", margin=1)
        for lo, hi in zip(b.resolutions[:-1], b.resolutions[1:]):
            assert hi.K == 4 * lo.K
            assert hi.spacing == pytest.approx(lo.spacing / 2)
            assert hi.support == pytest.approx(1.5 * hi.spacing)

    def test_centers_cover_domain_with_margin(self):
        g = GridGeometry(60, 100)
        b = build_basis(g, R=2, margin=1)
        c = b.resolutions[0].centers
        assert c[:, 0].min() < g.lon_range[0] and c[:, 0].max() > g.lon_range[1]
        assert c[:, 1].min() < g.lat_range[0] and c[:, 1].max() > g.lat_range[1]

    def test_evaluation_matches_dense(self):
        b = build_basis([[0, 2], [0, 1]], R=2, family="wendland", n_coarse=4)
        pts = np.random.default_rng(2).uniform([0, 0], [2, 1], size=(50, 2))
        pts[0] = b.resolutions[0].centers[3]  # exact hit on a center
        H = b.evaluate(pts).toarray()
        dense = np.hstack([eval_wendland(pairwise_distances(pts, r.centers) / r.support) for r in b.resolutions])
        np.testing.assert_allclose(H, dense, atol=1e-15)
        assert H[0, 3] == pytest.approx(1.0)

    def test_sparsity_matches_support_area(self):
        b = build_basis([[0, 10], [0, 10]], R=1, family="wendland", coarsest_spacing=1.0)
        res = b.resolutions[0]
        pts = np.random.default_rng(3).uniform(0, 10, size=(20000, 2))
        H = res.evaluate(pts).tocsc()
        counts = np.diff(H.indptr)
        inner = np.all((res.centers > res.support) & (res.centers < 10 - res.support), axis=1)
        frac = counts[inner].mean() / len(pts)
        expect = math.pi * res.support ** 2 / 100.0
        assert abs(frac - expect) / expect < 0.10

    def test_lk_normalization_constant_variance(self):
        b = build_basis([[0, 3], [0, 2]], R=2, family="wendland", n_coarse=4, margin=1)
        prior = LKPrior(kappa=0.7, nu=1.0, lam=0.1, sigma2=2.5)
        g = np.stack(np.meshgrid(np.linspace(0, 3, 31), np.linspace(0, 2, 21)), -1).reshape(-1, 2)
        var = lk_marginal_variance(b, prior, g)
        alpha = lk_alpha(2, 1.0)
        for r in range(2):
            np.testing.assert_allclose(var[r], 2.5 * alpha[r], rtol=1e-8)
        # oracle: diagonal of the dense normalized covariance
        np.testing.assert_allclose(np.diag(lk_dense_cov(b, prior, g[:60])), 2.5, rtol=1e-8)


class TestAlpha:
    def test_sum_and_order(self):
        a = lk_alpha(3, 1.0)
        assert a.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(a, np.array([1, 1 / 2, 1 / 3]) / (11 / 6))
        assert np.all(lk_alpha(4, 0.5) > 0)


class TestWoodburyOracles:
    def test_frk_loglik_dense(self, field400):
        basis = build_basis(field400.coords, R=2, family="bisquare", n_coarse=2)
        assert basis.K == 4 + 16  # (2 x 2) + (4 x 4)
        prior = FRKPrior((1.2, 0.6), (0.8, 0.4), 0.05)
        H = basis.evaluate(field400.coords).toarray()
        S = np.zeros((basis.K, basis.K))
        for res, sl, phi, v in zip(basis.resolutions, basis.blocks(), prior.phi, prior.variances):
            S[sl, sl] = v * np.exp(-pairwise_distances(res.centers) / phi)
        Sig = H @ S @ H.T + (0.05 + 0.1) * np.eye(400)
        expect = naive_loglik(field400.values, field400.X, Sig)
        got = frk_loglik(field400, basis, prior, nugget=0.1)
        assert got == pytest.approx(expect, rel=1e-10)
        np.testing.assert_allclose(frk_blocks(basis, prior), S)

    def test_lk_loglik_dense_k25(self, field400):
        basis = build_basis(field400.coords, R=1, family="wendland", n_coarse=4, margin=1)
        assert basis.K <= 40
        prior = LKPrior(kappa=0.5, nu=1.0, lam=0.2, sigma2=1.3)
        Sig = lk_dense_cov(basis, prior, field400.coords) + 0.2 * 1.3 * np.eye(400)
        expect = naive_loglik(field400.values, field400.X, Sig)
        assert lk_loglik(field400, basis, prior) == pytest.approx(expect, rel=1e-10)

    def test_lk_loglik_dense_multires(self, field400):
        basis = build_basis(field400.coords, R=2, family="wendland", n_coarse=3, margin=1)
        prior = LKPrior(kappa=1.1, nu=0.7, lam=0.15, sigma2=0.9)
        Sig = lk_dense_cov(basis, prior, field400.coords) + 0.15 * 0.9 * np.eye(400)
        expect = naive_loglik(field400.values, field400.X, Sig)
        assert lk_loglik(field400, basis, prior) == pytest.approx(expect, rel=1e-10)
        # profiling sigma2 can only raise the likelihood
        assert lk_loglik(field400, basis, prior, profile=True) >= expect - 1e-9

    def test_lk_predict_dense(self, field400):
        basis = build_basis(field400.coords, R=2, family="wendland", n_coarse=3, margin=1)
        prior = LKPrior(kappa=1.1, nu=0.7, lam=0.15, sigma2=0.9)
        fit = LowRankFit("lattice-krig", basis, prior, None, 0.0, 0.15 * 0.9, 0.0, trend=field400.trend,
                         train=field400)
        test = np.random.default_rng(4).uniform([0, 0], [3, 2], size=(30, 2))
        res = lowrank_predict(fit, test)
        Sig = lk_dense_cov(basis, prior, field400.coords) + 0.135 * np.eye(400)
        C0 = lk_dense_cov(basis, prior, field400.coords, test)
        m, v = naive_predict(field400.values, field400.X, Sig, C0, prior.sigma2 + 0.135,
                             field400.trend.design(test))
        np.testing.assert_allclose(res.mean, m, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(res.se ** 2, v, rtol=1e-7)

    def test_frk_predict_dense(self, field400):
        basis = build_basis(field400.coords, R=2, family="bisquare", n_coarse=2)
        prior = FRKPrior((1.2, 0.6), (0.8, 0.4), 0.05)
        fit = LowRankFit("frk", basis, prior, None, 0.05, 0.1, 0.0, trend=field400.trend, train=field400)
        test = np.random.default_rng(5).uniform([0, 0], [3, 2], size=(25, 2))
        res = lowrank_predict(fit, test)
        H = basis.evaluate(field400.coords).toarray()
        H0 = basis.evaluate(test).toarray()
        S = frk_blocks(basis, prior)
        Sig = H @ S @ H.T + 0.15 * np.eye(400)
        m, v = naive_predict(field400.values, field400.X, Sig, H @ S @ H0.T,
                             np.einsum("ij,jk,ik->i", H0, S, H0) + 0.15, field400.trend.design(test))
        np.testing.assert_allclose(res.mean, m, rtol=1e-8)
        np.testing.assert_allclose(res.se ** 2, v, rtol=1e-7)

    def test_far_field_reverts_to_trend(self, field400):
        basis = build_basis(field400.coords, R=2, family="bisquare", n_coarse=2)
        prior = FRKPrior((1.2, 0.6), (0.8, 0.4), 0.05)
        pts = Points(field400.coords, field400.values)
        fit = LowRankFit("frk", basis, prior, None, 0.05, 0.1, 0.0, trend=pts.trend, train=pts)
        res = lowrank_predict(fit, [[100.0, 100.0]])
        Sig = basis.evaluate(pts.coords).toarray()
        Sig = Sig @ frk_blocks(basis, prior) @ Sig.T + 0.15 * np.eye(400)
        Si = np.linalg.inv(Sig)
        one = np.ones(400)
        beta = one @ Si @ pts.values / (one @ Si @ one)
        assert res.mean[0] == pytest.approx(beta, rel=1e-10)
        # no basis support out here: only iid variance plus trend uncertainty
        assert res.se[0] ** 2 == pytest.approx(0.15 + 1 / (one @ Si @ one), rel=1e-8)


class TestLKBehaviour:
    def test_zero_signal_collapses_to_trend(self, field400):
        basis = build_basis(field400.coords, R=1, family="wendland", n_coarse=4, margin=1)
        prior = LKPrior(kappa=0.5, nu=1.0, lam=1.0, sigma2=0.0)
        fit = LowRankFit("lattice-krig", basis, prior, None, 0.0, 0.3, 0.0, trend=field400.trend,
                         train=field400)
        test = np.random.default_rng(6).uniform([0, 0], [3, 2], size=(10, 2))
        res = lowrank_predict(fit, test)
        X = field400.X
        beta = np.linalg.lstsq(X, field400.values, rcond=None)[0]
        np.testing.assert_allclose(res.mean, field400.trend.design(test) @ beta, rtol=1e-12)

    def test_lk_fit_improves_likelihood(self, field400):
        basis = build_basis(field400.coords, R=2, family="wendland", n_coarse=3, margin=1)
        init = LKPrior(kappa=1.0, nu=1.0, lam=0.5)
        fit = lk_fit(field400, basis, init, maxfev=300)
        assert fit.loglik >= lk_loglik(field400, basis, init, profile=True) - 1e-9
        assert fit.loglik == pytest.approx(lk_loglik(field400, basis, fit.prior), rel=1e-9)
        assert fit.nugget > 0 and fit.prior.sigma2 > 0
        res = lowrank_predict(fit, field400.coords[:50])
        assert np.sqrt(np.mean((res.mean - field400.values[:50]) ** 2)) < np.std(field400.values)


class TestPredictiveProcess:
    def test_single_knot_bump(self):
        spec = CovarianceSpec(2.0, 0.5, 0.0)
        s = np.column_stack([np.linspace(-2, 2, 81), np.zeros(81)])
        b = pp_build([[0.0, 0.0]], spec, s)[:, 0]
        np.testing.assert_allclose(b, np.exp(-np.abs(s[:, 0]) / 0.5), rtol=1e-12)
        assert np.argmax(b) == 40

    def test_variance_underestimation(self):
        rng = np.random.default_rng(7)
        spec = CovarianceSpec(1.7, 0.4, 0.0)
        knots = knot_grid(rng.uniform(0, 3, size=(100, 2)), 25)
        s = rng.uniform(0, 3, size=(1000, 2))
        q = np.sum(pp_build(knots, spec, s) * spec.cross(s, knots), axis=1)
        assert np.all(spec.sill - q >= -1e-10)
        # modified PP restores the parent variance exactly
        from spatialcomp.basis import _pp_factor, pp_noise
        B = _pp_factor(knots, spec, s)
        total = np.sum(B * B, axis=1) + pp_noise(CovarianceSpec(1.7, 0.4, 0.0), B)
        np.testing.assert_allclose(total - spec.sill, 0.0, atol=1e-10)

    def test_knot_grid(self):
        k = knot_grid(np.array([[0, 0], [5, 3]]), 25)
        assert k.shape == (25, 2) and len(np.unique(k, axis=0)) == 25
        assert knot_grid(np.array([[0, 0], [5, 3]]), 24).shape == (24, 2)
        km = knot_grid(np.random.default_rng(0).uniform(size=(300, 2)), 10, method="kmeans")
        assert km.shape == (10, 2)

    def test_saturated_knots_equal_exact_loglik(self):
        rng = np.random.default_rng(8)
        pts = Points(rng.uniform(0, 3, size=(300, 2)), rng.normal(size=300))
        spec = CovarianceSpec(1.2, 0.6, 0.3)
        assert pp_loglik(pts, pts.coords, spec) == pytest.approx(loglik(pts, spec), rel=1e-8)

    def test_saturated_knots_equal_exact_kriging(self):
        rng = np.random.default_rng(9)
        pts = Points(rng.uniform(0, 3, size=(150, 2)), rng.normal(size=150))
        spec = CovarianceSpec(1.0, 0.5, 1e-6)
        fit = LowRankFit("pred-proc", pts.coords, spec, None, 0.0, spec.nugget, 0.0, trend=pts.trend,
                         train=pts)
        test = rng.uniform(0, 3, size=(20, 2))
        a = lowrank_predict(fit, test)
        b = krige(pts, test, spec)
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-8)
        np.testing.assert_allclose(a.se, b.se, atol=1e-8)

    def test_pp_predict_dense(self):
        rng = np.random.default_rng(10)
        pts = Points(rng.uniform(0, 3, size=(200, 2)), rng.normal(size=200))
        spec = CovarianceSpec(1.3, 0.7, 0.2)
        knots = knot_grid(pts.coords, 16)
        fit = LowRankFit("pred-proc", knots, spec, None, 0.0, 0.2, 0.0, trend=pts.trend, train=pts)
        test = rng.uniform(0, 3, size=(15, 2))
        res = lowrank_predict(fit, test)
        Ck = spec.cross(knots, knots)
        Ci = np.linalg.inv(Ck)
        C = spec.cross(pts.coords, knots)
        C0 = spec.cross(test, knots)
        low = C @ Ci @ C.T
        Sig = low + np.diag(1.3 - np.diag(low) + 0.2)
        cross = C @ Ci @ C0.T
        m, v = naive_predict(pts.values, pts.X, Sig, cross, 1.5, np.ones((15, 1)))
        np.testing.assert_allclose(res.mean, m, rtol=1e-8)
        np.testing.assert_allclose(res.se ** 2, v, rtol=1e-7)

    @pytest.mark.slow
    def test_k25_within_twice_exact_rmse(self):
        g = GridGeometry(40, 60)
        truth = CovarianceSpec(9.0, 0.5, 0.25)
        full = simulate_gp(g, truth, TrendSpec("constant", (44.0,)), seed=3)
        rng = np.random.default_rng(11)
        idx = rng.permutation(g.n_cells)
        train = full.points().subset(np.sort(idx[:2000]))
        test = full.points().subset(np.sort(idx[2000:2400]))
        fit, res = pp_fit_predict(train, test.coords, 25, truth)
        exact = krige(train, test.coords, truth)
        r_pp = np.sqrt(np.mean((res.mean - test.values) ** 2))
        r_ex = np.sqrt(np.mean((exact.mean - test.values) ** 2))
        assert r_pp < 2 * r_ex


class TestFRKFit:
    def test_fit_improves_likelihood(self, field400):
        basis = build_basis(field400.coords, R=2, family="bisquare", n_coarse=2)
        init = FRKPrior((1.0, 0.5), (0.5, 0.5), 0.0)
        fit = lowrank_fit(field400, init, basis, maxfev=400)
        assert fit.method == "frk"
        # the starting iid variance is 0.1 * sum of the prior variances
        assert fit.loglik >= frk_loglik(field400, basis, init, nugget=0.1) - 1e-9
        assert fit.loglik == pytest.approx(frk_loglik(field400, basis, fit.prior, fit.nugget), rel=1e-10)
        assert fit.nugget > 0

    def test_fixed_nugget_estimates_fine_scale(self, field400):
        basis = build_basis(field400.coords, R=2, family="bisquare", n_coarse=2)
        fit = frk_fit(field400, basis, nugget=0.01, maxfev=300)
        assert fit.nugget == 0.01 and fit.fine_var >= 0

    @staticmethod
    def _simulate_and_fit():
        """Simulate exactly from the FRK model (K ~ 90, N = 5000) and refit."""
        g = GridGeometry(50, 100)
        basis = build_basis(g, R=3, family="bisquare")
        assert 80 <= basis.K <= 100
        truth = FRKPrior(tuple(2.0 * r.spacing for r in basis.resolutions), (4.0, 2.0, 1.0), 0.0)
        rng = np.random.default_rng(20160804)
        S = frk_blocks(basis, truth)
        theta = np.linalg.cholesky(S) @ rng.normal(size=basis.K)
        coords = g.coords()
        y = 44 + basis.evaluate(coords) @ theta + 0.5 * rng.normal(size=len(coords))
        init = FRKPrior(tuple(r.spacing for r in basis.resolutions), (1.0, 1.0, 1.0), 0.0)
        return truth, frk_fit(Points(coords, y), basis, init=init)

    @pytest.mark.slow
    def test_recovers_finest_range(self):
        truth, fit = self._simulate_and_fit()
        assert abs(fit.prior.phi[-1] - truth.phi[-1]) / truth.phi[-1] < 0.30
        assert fit.nugget == pytest.approx(0.25, rel=0.1)

    @pytest.mark.slow
    @pytest.mark.xfail(reason="coarse resolutions carry 4 and 16 coefficients: one realization "
                              "cannot identify their ranges", strict=False)
    def test_recovers_all_ranges(self):
        truth, fit = self._simulate_and_fit()
        for est, tr in zip(fit.prior.phi, truth.phi):
            assert abs(est - tr) / tr < 0.30
