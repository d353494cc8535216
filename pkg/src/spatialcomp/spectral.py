"""Periodic embedding: the observed grid sits inside a larger periodic lattice,
the spectrum is estimated by smoothing periodograms of conditionally imputed
fields, and gaps are predicted from an ensemble of conditional simulations."""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import SolverFailure
from .gpcore import PredictionResult, SpatialDataset
from .numerics import dft2

SPECTRUM_FLOOR = 1e-8  # relative to max(f); keeps the conditioning system well posed


def embed(shape, tau=1.2):
    """Expanded lattice size floor(tau * N) per axis."""
    if tau < 1:
        raise ValueError("expansion factor must be >= 1")
    return tuple(int(math.floor(tau * n + 1e-9)) for n in shape)


@dataclass
class SpectralModel:
    shape: tuple  # original (rows, cols)
    tau: float
    f: np.ndarray  # spectrum on the expanded Fourier grid
    bandwidth: int = 3

    @property
    def m(self):
        return self.f.shape

    def floored(self):
        return np.maximum(self.f, SPECTRUM_FLOOR * max(float(self.f.max()), 1e-300))


def spectrum_to_cov(f):
    """Covariance at every offset of the periodic lattice: R(h) = mean_w f(w) e^{i w'h}."""
    f = np.asarray(f, dtype=float)
    return np.real(np.fft.ifft2(f))


def circulant_apply(f, x):
    """Multiply a field by the stationary periodic covariance with spectrum ``f``."""
    return np.real(dft2(f * dft2(x), inverse=True))


def periodogram(grid):
    return np.abs(dft2(grid)) ** 2


def epanechnikov_kernel(bandwidth):
    """Product Epanechnikov weights on offsets |a| < bandwidth, summing to one."""
    if bandwidth <= 1:
        return np.ones((1, 1))
    a = np.arange(-bandwidth + 1, bandwidth)
    w = 1.0 - (a / bandwidth) ** 2
    k = np.outer(w, w)
    return k / k.sum()


def smooth_periodic(P, kernel):
    """Circular convolution of ``P`` with a small centered kernel."""
    kernel = np.asarray(kernel, dtype=float)
    h0, h1 = kernel.shape[0] // 2, kernel.shape[1] // 2
    out = np.zeros_like(P, dtype=float)
    for i in range(kernel.shape[0]):
        for j in range(kernel.shape[1]):
            if kernel[i, j]:
                out += kernel[i, j] * np.roll(P, (i - h0, j - h1), axis=(0, 1))
    return out


def update_spectrum(completed, kernel):
    """Smoothed periodogram of a completed expanded-grid field."""
    return smooth_periodic(periodogram(completed), kernel)


@dataclass
class EmbeddedField:
    values: np.ndarray  # expanded grid; missing cells hold anything
    observed: np.ndarray  # bool mask on the expanded grid

    @classmethod
    def from_grid(cls, grid, mask, m):
        vals = np.zeros(m)
        obs = np.zeros(m, dtype=bool)
        r, c = grid.shape
        vals[:r, :c] = np.where(mask, grid, 0.0)
        obs[:r, :c] = mask
        return cls(vals, obs)


def unconditional_draw(f, rng):
    z = rng.standard_normal(f.shape)
    return np.real(dft2(np.sqrt(f) * dft2(z), inverse=True))


def _krige_correction(f, obs, resid, tol=1e-8, maxiter=1000):
    """R[:, U] R[U, U]^{-1} resid by preconditioned CG on the observed block."""
    n = int(obs.sum())
    inv_f = 1.0 / f

    def embed_(x):
        g = np.zeros(f.shape)
        g[obs] = x
        return g

    A = LinearOperator((n, n), matvec=lambda x: circulant_apply(f, embed_(x))[obs], dtype=float)
    M = LinearOperator((n, n), matvec=lambda x: circulant_apply(inv_f, embed_(x))[obs], dtype=float)
    w, info = cg(A, resid, rtol=tol, atol=0.0, maxiter=maxiter, M=M)
    if info != 0:
        raise SolverFailure(f"conditioning CG did not converge ({info})")
    return circulant_apply(f, embed_(w))


def conditional_impute(model, field, seed=None, rng=None, mean_only=False):
    """Draw the missing cells given the observed ones under the periodic
    covariance of ``model``; observed cells are returned untouched."""
    obs = field.observed
    if not obs.any():
        raise ValueError("need at least one observed cell")
    out = field.values.copy()
    if obs.all():
        return out
    f = model.floored()
    rng = rng or np.random.default_rng(seed)
    y = np.zeros(f.shape) if mean_only else unconditional_draw(f, rng)
    y = y + _krige_correction(f, obs, field.values[obs] - y[obs])
    out[~obs] = y[~obs]
    return out


def _trend_split(dataset):
    pts = dataset.points()
    X = pts.X
    beta = np.linalg.lstsq(X, pts.values, rcond=None)[0]
    trend = dataset.trend.design(dataset.geometry.coords()) @ beta
    return trend.reshape(dataset.geometry.shape), beta


def pe_fit(dataset, tau=1.2, iterations=20, bandwidth=3, seed=0, tol=1e-4):
    """Iterate impute / smooth-periodogram updates; returns (model, field, trend, n_iter)."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not isinstance(dataset, SpatialDataset):
        raise TypeError("periodic embedding needs a gridded dataset")
    shape = dataset.geometry.shape
    m = embed(shape, tau)
    trend, _ = _trend_split(dataset)
    mask = dataset.mask.reshape(shape)
    resid = np.where(mask, dataset.as_grid() - trend, 0.0)
    field = EmbeddedField.from_grid(resid, mask, m)
    kernel = epanechnikov_kernel(bandwidth)
    rng = np.random.default_rng(seed)
    # start from the zero-filled field rescaled to the observed variance
    model = SpectralModel(shape, tau, update_spectrum(field.values, kernel) * field.values.size / max(field.observed.sum(), 1),
                          bandwidth)
    done = 0
    for k in range(iterations):
        completed = conditional_impute(model, field, rng=rng)
        f_new = update_spectrum(completed, kernel)
        change = np.max(np.abs(f_new - model.f) / np.maximum(model.f, 1e-300))
        model = SpectralModel(shape, tau, f_new, bandwidth)
        done = k + 1
        if change < tol:
            break
    return model, field, trend, done


def _draws(args):
    model, field, seeds, cells = args
    return np.array([conditional_impute(model, field, rng=np.random.default_rng(s))[cells] for s in seeds])


def pe_fit_predict(dataset, tau=1.2, iterations=20, n_draws=100, seed=0, bandwidth=3, test_index=None,
                   workers=1):
    """Fit the spectrum, then predict cells (default: all missing cells of the
    original grid) from an ensemble of conditional imputations."""
    t0 = time.perf_counter()
    model, field, trend, n_iter = pe_fit(dataset, tau, iterations, bandwidth, seed)
    shape = dataset.geometry.shape
    if test_index is None:
        test_index = np.flatnonzero(~dataset.mask)
    test_index = np.asarray(test_index, dtype=int)
    r, c = np.divmod(test_index, shape[1])
    cells = (r, c)
    seeds = np.random.SeedSequence([seed, 1]).generate_state(n_draws)
    if workers > 1 and n_draws > 1:
        chunks = np.array_split(seeds, workers)
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_draws, [(model, field, s, cells) for s in chunks]))
        draws = np.vstack(parts)
    else:
        draws = _draws((model, field, seeds, cells))
    base = trend[cells]
    mean = base + draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) if n_draws > 1 else np.zeros(len(test_index))
    lower = base + np.percentile(draws, 2.5, axis=0)
    upper = base + np.percentile(draws, 97.5, axis=0)
    return PredictionResult(mean, se, lower, upper, method="periodic-embedding",
                            wall_time=time.perf_counter() - t0, cores=workers,
                            info={"iterations": n_iter, "model": model, "cells": test_index})
