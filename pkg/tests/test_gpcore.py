import math

import numpy as np
import pytest

from spatialcomp.errors import NotPositiveDefinite, TooLarge
from spatialcomp.gpcore import (
    CovarianceSpec,
    GridGeometry,
    Points,
    SpatialDataset,
    TrendSpec,
    cov_value,
    fit_ml,
    krige,
    loglik,
    simulate_gp,
)
from spatialcomp.numerics import pairwise_distances


def naive_loglik(coords, y, X, spec):
    """Literal Gaussian density: explicit inverse and determinant, GLS beta."""
    S = spec.sill * np.exp(-pairwise_distances(coords) / spec.range) + spec.nugget * np.eye(len(y))
    Si = np.linalg.inv(S)
    beta = np.linalg.solve(X.T @ Si @ X, X.T @ Si @ y)
    r = y - X @ beta
    n = len(y)
    return -0.5 * n * math.log(2 * math.pi) - 0.5 * math.log(np.linalg.det(S)) - 0.5 * r @ Si @ r


def conditional_oracle(coords, y, X, spec, s0, x0):
    """Brute-force conditional Gaussian with GLS trend correction."""
    S = spec.sill * np.exp(-pairwise_distances(coords) / spec.range) + spec.nugget * np.eye(len(y))
    c = spec.sill * np.exp(-pairwise_distances(coords, s0[None]) / spec.range)[:, 0]
    Si = np.linalg.inv(S)
    V = np.linalg.inv(X.T @ Si @ X)
    beta = V @ X.T @ Si @ y
    mean = x0 @ beta + c @ Si @ (y - X @ beta)
    g = x0 - X.T @ Si @ c
    var = spec.sill + spec.nugget - c @ Si @ c + g @ V @ g
    return mean, var


def random_points(n, rng, trend=TrendSpec()):
    coords = rng.uniform(0, 3, size=(n, 2))
    y = rng.normal(size=n) + 2.0
    return Points(coords, y, trend)


class TestCovValue:
    def test_zero_distance(self):
        spec = CovarianceSpec(2.0, 0.5, 0.3)
        assert cov_value(spec, 0.0, same_point=True) == pytest.approx(2.3)
        assert cov_value(spec, 0.0) == pytest.approx(2.0)

    def test_at_range(self):
        spec = CovarianceSpec(3.0, 0.7, 0.1)
        assert cov_value(spec, 0.7) == pytest.approx(0.367879441 * 3.0, rel=1e-9)

    def test_monotone(self):
        spec = CovarianceSpec(1.0, 0.5, 0.0)
        d = np.linspace(0, 5, 50)
        v = cov_value(spec, d)
        assert np.all(np.diff(v) < 0)
        assert cov_value(spec, 5.0) == pytest.approx(math.exp(-10))


class TestLoglik:
    def test_single_point(self):
        pts = Points([[0.0, 0.0]], [3.0])
        # one observation, constant trend: GLS beta equals y
        assert loglik(pts, CovarianceSpec(0.4, 1.0, 0.6)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_independent_pair(self):
        pts = Points([[0.0, 0.0], [1.0, 0.0]], [1.0, 3.0])
        spec = CovarianceSpec(0.0, 1.0, 2.0)
        # beta = mean = 2, residuals +-1, var 2
        expect = 2 * (-0.5 * math.log(2 * math.pi * 2.0) - 0.25)
        assert loglik(pts, spec) == pytest.approx(expect, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_against_literal_density(self, seed):
        rng = np.random.default_rng(seed)
        kind = "constant" if seed % 2 else "linear"
        pts = random_points(50 + 30 * seed, rng, TrendSpec(kind))
        spec = CovarianceSpec(rng.uniform(0.5, 3), rng.uniform(0.1, 1.0), rng.uniform(0.05, 0.5))
        expect = naive_loglik(pts.coords, pts.values, pts.X, spec)
        assert loglik(pts, spec) == pytest.approx(expect, rel=1e-8)

    def test_not_pd_propagates(self):
        pts = Points([[0.0, 0.0], [0.0, 0.0]], [1.0, 2.0])
        with pytest.raises(NotPositiveDefinite):
            loglik(pts, CovarianceSpec(1.0, 1.0, 0.0))


class TestKrige:
    def test_interpolation(self):
        rng = np.random.default_rng(0)
        pts = random_points(30, rng)
        spec = CovarianceSpec(1.0, 0.5, 0.0)
        res = krige(pts, pts.coords[:5], spec)
        np.testing.assert_allclose(res.mean, pts.values[:5], atol=1e-8)
        np.testing.assert_allclose(res.se, 0.0, atol=1e-6)

    def test_far_field(self):
        rng = np.random.default_rng(1)
        pts = random_points(30, rng)
        spec = CovarianceSpec(1.0, 0.1, 0.2)
        res = krige(pts, [[1000.0, 1000.0]], spec)
        beta = res.info["beta"]
        assert res.mean[0] == pytest.approx(beta[0], abs=1e-12)
        m, v = conditional_oracle(pts.coords, pts.values, pts.X, spec, np.array([1000.0, 1000.0]), np.ones(1))
        assert res.se[0] ** 2 == pytest.approx(v, rel=1e-12)
        assert res.se[0] ** 2 > spec.total

    @pytest.mark.parametrize("kind", ["constant", "linear"])
    def test_five_point_oracle(self, kind):
        rng = np.random.default_rng(2)
        pts = random_points(5, rng, TrendSpec(kind))
        spec = CovarianceSpec(1.5, 0.8, 0.1)
        s0 = np.array([1.2, 0.7])
        res = krige(pts, s0[None], spec)
        m, v = conditional_oracle(pts.coords, pts.values, pts.X, spec, s0, pts.trend.design(s0[None])[0])
        assert abs(res.mean[0] - m) < 1e-10
        assert abs(res.se[0] ** 2 - v) < 1e-10
        assert res.lower[0] <= res.mean[0] <= res.upper[0]
        assert res.upper[0] - res.mean[0] == pytest.approx(1.959963984540054 * res.se[0])

    def test_too_large(self):
        rng = np.random.default_rng(3)
        pts = random_points(20, rng)
        with pytest.raises(TooLarge):
            krige(pts, [[0.0, 0.0]], CovarianceSpec(1, 1, 0.1), max_exact_n=10)

    def test_adding_observation_never_increases_variance(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            pts = random_points(15, rng)
            spec = CovarianceSpec(1.0, rng.uniform(0.2, 1.0), rng.uniform(0.0, 0.3) + 1e-3)
            test = rng.uniform(0, 3, size=(10, 2))
            a = krige(pts.subset(np.arange(14)), test, spec).se
            b = krige(pts, test, spec).se
            assert np.all(b <= a + 1e-12)

    def test_variance_bounds(self):
        rng = np.random.default_rng(5)
        pts = random_points(40, rng)
        spec = CovarianceSpec(1.0, 0.3, 0.1)
        test = rng.uniform(-1, 4, size=(200, 2))
        res = krige(pts, test, spec)
        far = krige(pts, [[1e4, 1e4]], spec).se[0] ** 2
        assert np.all(res.se >= 0)
        assert np.all(res.se ** 2 <= far + 1e-10)

    def test_known_beta(self):
        rng = np.random.default_rng(6)
        pts = random_points(20, rng)
        spec = CovarianceSpec(1.0, 0.4, 0.2)
        res = krige(pts, [[1e4, 1e4]], spec, beta=[5.0])
        assert res.mean[0] == pytest.approx(5.0)
        assert res.se[0] ** 2 == pytest.approx(spec.total)


class TestSimulate:
    def test_determinism(self):
        g = GridGeometry(10, 12)
        a = simulate_gp(g, CovarianceSpec(1.0, 0.5, 0.1), seed=3)
        b = simulate_gp(g, CovarianceSpec(1.0, 0.5, 0.1), seed=3)
        assert np.array_equal(a.values, b.values)

    def test_pure_nugget_variance(self):
        g = GridGeometry(100, 100)
        d = simulate_gp(g, CovarianceSpec(0.0, 0.5, 2.0), seed=1)
        assert np.var(d.values) == pytest.approx(2.0, rel=0.05)

    def test_too_large(self):
        with pytest.raises(TooLarge):
            simulate_gp(GridGeometry(200, 200), CovarianceSpec(1, 1, 0))

    @pytest.mark.slow
    def test_empirical_covariance_monte_carlo(self):
        g = GridGeometry(6, 8, (0.0, 0.7), (0.0, 0.5))
        spec = CovarianceSpec(2.0, 0.3, 0.0)
        dlon = g.spacing[0]
        pairs = []
        for s in range(200):
            v = simulate_gp(g, spec, seed=s).as_grid()
            pairs.append(np.mean(v[:, :-1] * v[:, 1:]))
        pairs = np.array(pairs)
        expect = 2.0 * math.exp(-dlon / 0.3)
        assert abs(pairs.mean() - expect) < 3 * pairs.std(ddof=1) / math.sqrt(len(pairs))


class TestFitML:
    @pytest.mark.slow
    def test_recovers_truth(self):
        truth = CovarianceSpec(9.0, 0.5, 0.25)
        g = GridGeometry(40, 50)
        full = simulate_gp(g, truth, TrendSpec("constant", (44.0,)), seed=11)
        rng = np.random.default_rng(0)
        idx = rng.choice(g.n_cells, 2000, replace=False)
        pts = full.points().subset(np.sort(idx))
        fit = fit_ml(pts, CovarianceSpec(4.0, 0.2, 1.0))
        assert fit.converged
        assert fit.spec.sill == pytest.approx(9.0, rel=0.25)
        assert fit.spec.range == pytest.approx(0.5, rel=0.25)
        assert fit.spec.nugget == pytest.approx(0.25, rel=0.25)

    def test_pure_nugget(self):
        rng = np.random.default_rng(1)
        pts = Points(rng.uniform(0, 3, size=(300, 2)), rng.normal(size=300) * 1.5 + 3.0)
        fit = fit_ml(pts, CovarianceSpec(1.0, 0.3, 1.0))
        var = np.var(pts.values)
        assert fit.spec.sill < 0.1 * var
        assert fit.spec.nugget + fit.spec.sill == pytest.approx(var, rel=0.05)

    def test_stationary_init(self):
        rng = np.random.default_rng(2)
        g = GridGeometry(12, 12)
        pts = simulate_gp(g, CovarianceSpec(2.0, 0.6, 0.3), seed=5).points()
        first = fit_ml(pts, CovarianceSpec(1.0, 0.3, 0.5))
        again = fit_ml(pts, first.spec)
        assert again.loglik >= first.loglik - 1e-12
        np.testing.assert_allclose(again.spec.as_log(), first.spec.as_log(), atol=1e-2)

    def test_never_worse_than_init(self):
        rng = np.random.default_rng(3)
        pts = random_points(60, rng)
        init = CovarianceSpec(0.5, 0.2, 0.5)
        fit = fit_ml(pts, init, maxfev=20)
        assert fit.loglik >= loglik(pts, init) - 1e-12


def test_dataset_mask_semantics():
    g = GridGeometry(2, 2)
    d = SpatialDataset(g, [1.0, 2.0, 3.0, 4.0], [True, False, True, True])
    assert d.n_observed == 3 and d.n_missing == 1
    assert np.isnan(d.values[1])
    assert np.allclose(d.points().values, [1.0, 3.0, 4.0])
    # row index increases southward
    c = g.coords()
    assert c[0, 1] > c[2, 1] and c[0, 0] < c[1, 0]
    assert np.array_equal(g.cell_index(c), np.arange(4))
