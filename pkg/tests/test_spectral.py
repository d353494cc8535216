import numpy as np
import pytest

from spatialcomp.errors import SolverFailure
from spatialcomp.gpcore import CovarianceSpec, GridGeometry, SpatialDataset, TrendSpec, krige, simulate_gp
from spatialcomp.scoring import coverage, rmse
from spatialcomp.spectral import (EmbeddedField, SpectralModel, _krige_correction, circulant_apply,
                                  conditional_impute, embed, epanechnikov_kernel, pe_fit, pe_fit_predict,
                                  periodogram, smooth_periodic, spectrum_to_cov, update_spectrum)


def direct_cov(f, h):
    """R(h) by explicit summation over the Fourier grid."""
    m1, m2 = f.shape
    tot = 0j
    for a in range(m1):
        for b in range(m2):
            tot += f[a, b] * np.exp(2j * np.pi * (a * h[0] / m1 + b * h[1] / m2))
    return tot / (m1 * m2)


def dense_cov(f):
    R = spectrum_to_cov(f)
    m1, m2 = f.shape
    ii, jj = np.divmod(np.arange(m1 * m2), m2)
    return R[(ii[:, None] - ii[None, :]) % m1, (jj[:, None] - jj[None, :]) % m2]


def exp_spectrum(m, rng_=4.0):
    """Spectrum of a periodic exponential-type covariance on an m1 x m2 lattice."""
    i = np.minimum(np.arange(m[0]), m[0] - np.arange(m[0]))
    j = np.minimum(np.arange(m[1]), m[1] - np.arange(m[1]))
    R = np.exp(-np.hypot(i[:, None], j[None, :]) / rng_)
    R[0, 0] += 0.05
    return np.maximum(np.real(np.fft.fft2(R)), 0.0)


class TestEmbed:
    def test_examples(self):
        assert embed((300, 500), 1.2) == (360, 600)
        assert embed((100, 60), 1.2) == (120, 72)
        assert embed((37, 41), 1.0) == (37, 41)

    def test_rejects_tau_below_one(self):
        with pytest.raises(ValueError):
            embed((10, 10), 0.9)


class TestSpectrumToCov:
    def test_white_noise(self):
        R = spectrum_to_cov(np.full((6, 8), 2.5))
        assert R[0, 0] == pytest.approx(2.5)
        R[0, 0] = 0
        np.testing.assert_allclose(R, 0.0, atol=1e-14)

    def test_zero_lag_is_mean(self):
        f = exp_spectrum((12, 10))
        assert spectrum_to_cov(f)[0, 0] == pytest.approx(f.mean(), rel=1e-12)

    def test_spike_gives_cosine(self):
        m = (8, 12)
        f = np.zeros(m)
        f[1, 2] = f[-1, -2] = 48.0  # total mass 96 = m1*m2
        R = spectrum_to_cov(f)
        h1, h2 = np.meshgrid(np.arange(8), np.arange(12), indexing="ij")
        np.testing.assert_allclose(R, np.cos(2 * np.pi * (h1 / 8 + 2 * h2 / 12)), atol=1e-12)

    def test_direct_sum_and_periodicity(self):
        f = exp_spectrum((6, 7))
        R = spectrum_to_cov(f)
        for h in [(0, 0), (1, 3), (5, 6), (2, 1)]:
            v = direct_cov(f, h)
            assert abs(v.imag) < 1e-10
            assert R[h] == pytest.approx(v.real, abs=1e-12)
            w = direct_cov(f, (h[0] + 6, h[1] + 7))
            assert abs(w.real - R[h]) < 1e-10

    def test_circulant_apply_matches_dense(self):
        f = exp_spectrum((5, 6))
        x = np.random.default_rng(0).normal(size=(5, 6))
        np.testing.assert_allclose(circulant_apply(f, x).ravel(), dense_cov(f) @ x.ravel(), atol=1e-12)


class TestUpdateSpectrum:
    def test_point_kernel_is_periodogram(self):
        x = np.random.default_rng(1).normal(size=(9, 10))
        np.testing.assert_allclose(update_spectrum(x, epanechnikov_kernel(1)), periodogram(x), rtol=1e-14)
        # Parseval for the unitary transform
        assert periodogram(x).sum() == pytest.approx(np.sum(x ** 2), rel=1e-10)

    def test_flat_field(self):
        f = update_spectrum(np.full((6, 6), 3.0), epanechnikov_kernel(1))
        assert f[0, 0] == pytest.approx(9.0 * 36)
        f[0, 0] = 0
        np.testing.assert_allclose(f, 0.0, atol=1e-20)

    def test_mean_preserved_nonnegative_symmetric(self):
        x = np.random.default_rng(2).normal(size=(15, 20))
        k = epanechnikov_kernel(3)
        assert k.sum() == pytest.approx(1.0)
        f = update_spectrum(x, k)
        assert abs(f.mean() - periodogram(x).mean()) < 1e-10
        assert np.all(f >= 0)
        flip = np.roll(f[::-1, ::-1], (1, 1), axis=(0, 1))  # f(-w)
        np.testing.assert_allclose(f, flip, rtol=1e-12)

    def test_smooth_matches_fft_convolution(self):
        P = np.random.default_rng(3).uniform(size=(10, 11))
        k = epanechnikov_kernel(3)
        K = np.zeros_like(P)
        for i in range(-2, 3):
            for j in range(-2, 3):
                K[i % 10, j % 11] = k[i + 2, j + 2]
        ref = np.real(np.fft.ifft2(np.fft.fft2(P) * np.fft.fft2(K)))
        np.testing.assert_allclose(smooth_periodic(P, k), ref, atol=1e-12)


class TestConditionalImpute:
    def test_no_missing_unchanged(self):
        v = np.random.default_rng(0).normal(size=(6, 6))
        fld = EmbeddedField(v, np.ones((6, 6), bool))
        out = conditional_impute(SpectralModel((6, 6), 1.0, np.ones((6, 6))), fld, seed=1)
        np.testing.assert_array_equal(out, v)

    def test_white_noise_fills_independently(self):
        m = (40, 40)
        obs = np.random.default_rng(1).uniform(size=m) < 0.5
        fld = EmbeddedField(np.where(obs, 7.0, 0.0), obs)
        model = SpectralModel(m, 1.0, np.full(m, 4.0))
        out = conditional_impute(model, fld, seed=2)
        np.testing.assert_array_equal(out[obs], 7.0)
        v = out[~obs]
        se = 4.0 * np.sqrt(2 / len(v))
        assert abs(v.var() - 4.0) < 4 * se
        assert abs(v.mean()) < 4 * np.sqrt(4.0 / len(v))

    def test_matches_dense_conditional(self):
        m = (16, 16)
        f = exp_spectrum(m, 3.0)
        rng = np.random.default_rng(5)
        obs = rng.uniform(size=m) >= 0.3
        C = dense_cov(f)
        y = np.linalg.cholesky(C) @ rng.normal(size=256)
        U, V = obs.ravel(), ~obs.ravel()
        cmean = C[np.ix_(V, U)] @ np.linalg.solve(C[np.ix_(U, U)], y[U])
        cvar = np.diag(C[np.ix_(V, V)] - C[np.ix_(V, U)] @ np.linalg.solve(C[np.ix_(U, U)], C[np.ix_(U, V)]))
        fld = EmbeddedField(np.where(obs, y.reshape(m), 0.0), obs)
        model = SpectralModel(m, 1.0, f)
        draws = np.array([conditional_impute(model, fld, seed=s)[~obs] for s in range(500)])
        z = (draws.mean(axis=0) - cmean) / np.sqrt(cvar / 500)
        assert np.mean(np.abs(z) < 3) >= 0.97
        assert np.mean(z ** 2) < 1.5
        np.testing.assert_allclose(draws.var(axis=0, ddof=1), cvar, rtol=0.3)
        exact = conditional_impute(model, fld, mean_only=True)[~obs]
        np.testing.assert_allclose(exact, cmean, atol=1e-6)

    def test_solver_failure(self):
        m = (16, 16)
        obs = np.random.default_rng(0).uniform(size=m) < 0.6
        with pytest.raises(SolverFailure):
            _krige_correction(exp_spectrum(m, 3.0), obs, np.ones(obs.sum()), maxiter=1)


def gridded(shape, spec, seed, missing=0.0):
    d = simulate_gp(GridGeometry(*shape), spec, TrendSpec("constant", (44.0,)), seed=seed)
    mask = np.random.default_rng(seed + 1).uniform(size=d.geometry.n_cells) >= missing
    return d, d.with_mask(mask)


class TestPeriodicEmbedding:
    def test_parseval_fully_observed(self):
        full, _ = gridded((20, 30), CovarianceSpec(1.0, 0.5, 0.1), 3)
        model, field, trend, _ = pe_fit(full, tau=1.0, iterations=20)
        r = full.as_grid() - trend
        assert abs(model.f.mean() - np.mean(r ** 2)) < 1e-6

    def test_invariants_and_determinism(self):
        _, tr = gridded((20, 25), CovarianceSpec(1.0, 0.5, 0.1), 4, missing=0.2)
        a = pe_fit_predict(tr, iterations=3, n_draws=10, seed=7)
        b = pe_fit_predict(tr, iterations=3, n_draws=10, seed=7)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.upper, b.upper)
        f = a.info["model"].f
        assert f.shape == (24, 30)
        assert np.all(f >= 0)
        np.testing.assert_allclose(f, np.roll(f[::-1, ::-1], (1, 1), axis=(0, 1)), rtol=1e-10)
        assert len(a) == tr.n_missing
        assert np.all(a.lower <= a.upper)

    def test_workers_do_not_change_result(self):
        _, tr = gridded((12, 15), CovarianceSpec(1.0, 0.5, 0.1), 5, missing=0.2)
        a = pe_fit_predict(tr, iterations=2, n_draws=6, seed=1)
        b = pe_fit_predict(tr, iterations=2, n_draws=6, seed=1, workers=2)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)

    @pytest.mark.slow
    def test_close_to_exact_kriging(self):
        truth = CovarianceSpec(9.0, 0.5, 0.25)
        full, tr = gridded((60, 100), truth, 20160804, missing=0.1)
        res = pe_fit_predict(tr, seed=3)
        miss = np.flatnonzero(~tr.mask)
        ref = krige(tr.points(), full.geometry.coords()[miss], truth)
        y = full.values[miss]
        assert rmse(y, res.mean) <= 1.15 * rmse(y, ref.mean)

    @pytest.mark.slow
    def test_ensemble_coverage(self):
        truth = CovarianceSpec(9.0, 0.5, 0.25)
        full, tr = gridded((60, 100), truth, 7, missing=0.2)
        res = pe_fit_predict(tr, seed=1)
        y = full.values[~tr.mask]
        assert len(y) >= 1000
        assert 0.90 <= coverage(res.lower, res.upper, y) <= 0.98
