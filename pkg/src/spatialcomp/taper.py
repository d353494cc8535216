"""Covariance tapering: sparse one-taper likelihood, least-squares fitting to
empirical covariances of gridded data, and sparse kriging."""

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import optimize
from scipy.spatial import cKDTree

from .basis import eval_wendland
from .errors import NonConvergence
from .gpcore import LOG2PI, CovarianceSpec, PredictionResult, SpatialDataset, as_points
from .numerics import sparse_cholesky


@dataclass(frozen=True)
class TaperSpec:
    """Wendland taper with range ``gamma``; ``gamma = inf`` disables tapering."""

    gamma: float
    family: str = "wendland"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("taper range must be positive")

    def __call__(self, d):
        if math.isinf(self.gamma):
            return np.ones_like(np.asarray(d, dtype=float))
        return eval_wendland(np.asarray(d, dtype=float) / self.gamma)


def default_taper(data, neighbors=50):
    """Taper range giving about ``neighbors`` points inside each support disk."""
    c = as_points(data).coords
    area = float(np.prod(np.ptp(c, axis=0))) or 1.0
    return TaperSpec(math.sqrt(neighbors * area / (math.pi * len(c))))


def _pairs(a, b, gamma):
    """(i, j, d) for all pairs closer than gamma (all pairs when infinite)."""
    if math.isinf(gamma):
        i, j = np.meshgrid(np.arange(len(a)), np.arange(len(b)), indexing="ij")
        i, j = i.ravel(), j.ravel()
        d = np.sqrt(((a[i] - b[j]) ** 2).sum(axis=1))
        return i, j, d
    p = cKDTree(a).sparse_distance_matrix(cKDTree(b), gamma, output_type="ndarray")
    keep = p["v"] < gamma
    return p["i"][keep], p["j"][keep], p["v"][keep]


def tapered_cross(a, b, spec, taper):
    """Sparse tapered cross-covariance (no nugget) between two point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    i, j, d = _pairs(a, b, taper.gamma)
    v = spec.sill * np.exp(-d / spec.range) * taper(d)
    return sp.csc_matrix((v, (i, j)), shape=(len(a), len(b)))


def build_tapered_cov(locations, spec, taper):
    """Sparse ``Sigma o T`` with the nugget on the diagonal."""
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    n = len(locations)
    i, j, d = _pairs(locations, locations, taper.gamma)
    off = i != j
    v = spec.sill * np.exp(-d[off] / spec.range) * taper(d[off])
    A = sp.csc_matrix((v, (i[off], j[off])), shape=(n, n))
    A = A + sp.identity(n, format="csc") * spec.total
    A.sort_indices()
    return A


@dataclass
class TaperState:
    F: object
    beta: np.ndarray
    V: np.ndarray
    wr: np.ndarray  # whitened residual
    WX: np.ndarray  # whitened design

    @property
    def loglik(self):
        n = self.wr.shape[0]
        return -0.5 * (n * LOG2PI + self.F.logdet + float(self.wr @ self.wr))


def taper_state(points, spec, taper, beta=None):
    F = sparse_cholesky(build_tapered_cov(points.coords, spec, taper))
    X = points.X
    WX = F.half_solve(X).reshape(len(points), -1)
    wy = F.half_solve(points.values)
    V = np.linalg.inv(WX.T @ WX)
    if beta is None:
        beta = V @ WX.T @ wy
    beta = np.asarray(beta, dtype=float)
    return TaperState(F, beta, V, wy - WX @ beta, WX)


def taper_loglik(data, spec, taper, beta=None):
    """One-taper Gaussian log-likelihood, mean coefficients profiled by GLS."""
    return taper_state(as_points(data), spec, taper, beta).loglik


# ---------------------------------------------------------------------------
# empirical covariance


@dataclass
class EmpiricalCovariance:
    offsets: np.ndarray  # (L, 2) grid offsets (rows, cols)
    lags: np.ndarray  # Euclidean length in degrees
    cov: np.ndarray
    counts: np.ndarray


def half_plane_offsets(max_lag):
    """Grid offsets within ``max_lag`` cells, one of each +-pair, lag 0 first."""
    out = [(0, 0)]
    for dr in range(0, max_lag + 1):
        for dc in range(-max_lag, max_lag + 1):
            if dr == 0 and dc <= 0:
                continue
            if dr * dr + dc * dc <= max_lag * max_lag:
                out.append((dr, dc))
    return np.array(out)


def ols_residual_grid(dataset):
    pts = dataset.points()
    X = pts.X
    beta = np.linalg.lstsq(X, pts.values, rcond=None)[0]
    r = np.full(dataset.geometry.n_cells, np.nan)
    r[dataset.observed_index] = pts.values - X @ beta
    return r.reshape(dataset.geometry.shape)


def empirical_cov_gridded(dataset, max_lag=10, n_lags=60):
    """Method-of-moments covariances of OLS residuals at grid offsets.

    All half-plane offsets within ``max_lag`` cells are formed, then thinned
    to ``n_lags`` spread evenly over the sorted lag lengths (lag 0 always
    kept).  Offsets without complete pairs are dropped.
    """
    if not isinstance(dataset, SpatialDataset):
        raise TypeError("empirical covariances need a gridded dataset")
    R = ols_residual_grid(dataset)
    obs = ~np.isnan(R)
    Z = np.where(obs, R, 0.0)
    nr, nc = R.shape
    dlon, dlat = dataset.geometry.spacing
    offs = half_plane_offsets(max_lag)
    lens = np.hypot(offs[:, 0] * dlat, offs[:, 1] * dlon)
    order = np.lexsort((offs[:, 1], offs[:, 0], lens))
    offs, lens = offs[order], lens[order]
    if n_lags and len(offs) > n_lags:
        pick = np.unique(np.rint(np.linspace(0, len(offs) - 1, n_lags)).astype(int))
        offs, lens = offs[pick], lens[pick]
    cov, cnt, keep = [], [], []
    for k, (dr, dc) in enumerate(offs):
        c0, c1 = max(0, -dc), nc - max(0, dc)
        a = (slice(0, nr - dr), slice(c0, c1))
        b = (slice(dr, nr), slice(c0 + dc, c1 + dc))
        both = obs[a] & obs[b]
        n = int(both.sum())
        if n == 0:
            continue
        cov.append(float(np.sum(Z[a] * Z[b] * both)) / n)
        cnt.append(n)
        keep.append(k)
    keep = np.array(keep, dtype=int)
    return EmpiricalCovariance(offs[keep], lens[keep], np.array(cov), np.array(cnt))


def taper_fit(emp, init=None, max_range=None):
    """Pair-count-weighted least squares fit of (sill, range, nugget).

    ``emp`` is an EmpiricalCovariance or a gridded dataset.  The nugget enters
    only at lag 0.  Raises NonConvergence (carrying the estimate) when the
    range runs to its upper bound or the fit fails.
    """
    if isinstance(emp, SpatialDataset):
        emp = empirical_cov_gridded(emp)
    h, c, w = emp.lags, emp.cov, np.sqrt(emp.counts.astype(float))
    if len(np.unique(h)) < 3:
        raise ValueError("need at least three distinct lags")
    zero = h == 0
    pos = h[~zero]
    hmax = max_range or 100.0 * pos.max()
    hmin = 1e-3 * pos.min()
    if init is None:
        c0 = float(c[zero][0]) if zero.any() else float(c.max())
        c1 = float(c[~zero][np.argmin(pos)])
        init = CovarianceSpec(max(c1, 1e-3 * abs(c0) + 1e-12), float(np.median(pos)), max(c0 - c1, 0.0))
    x0 = np.array([init.sill, math.log(min(max(init.range, hmin * 1.01), hmax * 0.99)), init.nugget])

    def resid(x):
        model = x[0] * np.exp(-h / math.exp(x[1])) + x[2] * zero
        return w * (model - c)

    lo = [0.0, math.log(hmin), 0.0]
    hi = [np.inf, math.log(hmax), np.inf]
    x0 = np.clip(x0, lo, [1e300, hi[1], 1e300])
    res = optimize.least_squares(resid, x0, bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15,
                                 max_nfev=2000, x_scale="jac")
    x = res.x
    spec = CovarianceSpec(float(x[0]), float(math.exp(x[1])), float(x[2]))
    if res.status <= 0 or x[1] >= hi[1] - 1e-6 or x[0] <= 1e-12 * max(abs(c).max(), 1e-300):
        raise NonConvergence("taper_fit: degenerate least-squares solution", best=spec)
    return spec


# ---------------------------------------------------------------------------
# prediction


def taper_predict(data, test_coords, spec, taper, chunk=256):
    """Kriging with the tapered covariance in place of the full one."""
    t0 = time.perf_counter()
    points = as_points(data)
    test_coords = np.atleast_2d(np.asarray(test_coords, dtype=float))
    st = taper_state(points, spec, taper)
    X0 = points.trend.design(test_coords)
    C0 = tapered_cross(points.coords, test_coords, spec, taper)
    n0 = len(test_coords)
    mean = np.empty(n0)
    var = np.empty(n0)
    for s in range(0, n0, chunk):
        c = C0[:, s:s + chunk].toarray()
        Z = st.F.half_solve(c).reshape(len(points), -1)
        mean[s:s + chunk] = X0[s:s + chunk] @ st.beta + Z.T @ st.wr
        g = X0[s:s + chunk] - Z.T @ st.WX
        var[s:s + chunk] = spec.total - np.sum(Z * Z, axis=0) + np.einsum("ij,jk,ik->i", g, st.V, g)
    se = np.sqrt(np.maximum(var, 0.0))
    return PredictionResult.gaussian(mean, se, method="tapering", wall_time=time.perf_counter() - t0)
