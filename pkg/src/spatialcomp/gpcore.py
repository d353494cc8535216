"""Exact Gaussian-process model with exponential covariance plus nugget.

This is both a competing method at small sizes and the brute-force reference
for every approximation in the package.  Distances are Euclidean in degrees.
"""

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy import optimize
from scipy.stats import norm

from .errors import NotPositiveDefinite, TooLarge
from .numerics import dense_cholesky, pairwise_distances

Z975 = float(norm.ppf(0.975))
LOG2PI = math.log(2.0 * math.pi)

# full study grid: 300 rows (latitude) by 500 columns (longitude)
STUDY_LON_RANGE = (-95.91153, -91.28381)
STUDY_LAT_RANGE = (34.29519, 37.06811)


@dataclass(frozen=True)
class GridGeometry:
    """Regular lon/lat grid; cells are stored row-major, north row first."""

    n_rows: int
    n_cols: int
    lon_range: tuple = STUDY_LON_RANGE
    lat_range: tuple = STUDY_LAT_RANGE

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def n_cells(self):
        return self.n_rows * self.n_cols

    def lons(self):
        return np.linspace(self.lon_range[0], self.lon_range[1], self.n_cols)

    def lats(self):
        # row index increases southward
        return np.linspace(self.lat_range[1], self.lat_range[0], self.n_rows)

    @property
    def spacing(self):
        dlon = (self.lon_range[1] - self.lon_range[0]) / max(self.n_cols - 1, 1)
        dlat = (self.lat_range[1] - self.lat_range[0]) / max(self.n_rows - 1, 1)
        return dlon, dlat

    def coords(self):
        lon, lat = np.meshgrid(self.lons(), self.lats())
        return np.column_stack([lon.ravel(), lat.ravel()])

    def cell_index(self, coords):
        """Flat index of the grid cell nearest to each location."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        dlon, dlat = self.spacing
        col = np.rint((coords[:, 0] - self.lon_range[0]) / dlon).astype(int) if self.n_cols > 1 else np.zeros(len(coords), int)
        row = np.rint((self.lat_range[1] - coords[:, 1]) / dlat).astype(int) if self.n_rows > 1 else np.zeros(len(coords), int)
        col = np.clip(col, 0, self.n_cols - 1)
        row = np.clip(row, 0, self.n_rows - 1)
        return row * self.n_cols + col

    @property
    def diameter(self):
        return math.hypot(self.lon_range[1] - self.lon_range[0], self.lat_range[1] - self.lat_range[0])


STUDY_GEOMETRY = GridGeometry(300, 500)


@dataclass(frozen=True)
class TrendSpec:
    """Mean model: ``constant`` or ``linear`` in (lon, lat)."""

    kind: str = "constant"
    coefficients: tuple = None

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ValueError(f"unknown trend kind {self.kind!r}")

    @property
    def p(self):
        return 1 if self.kind == "constant" else 3

    def design(self, coords):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        if self.kind == "constant":
            return np.ones((coords.shape[0], 1))
        return np.column_stack([np.ones(coords.shape[0]), coords[:, 0], coords[:, 1]])

    def mean(self, coords):
        return self.design(coords) @ np.asarray(self.coefficients, dtype=float)


@dataclass(frozen=True)
class CovarianceSpec:
    """Exponential covariance ``sill * exp(-d / range)`` plus a nugget."""

    sill: float
    range: float
    nugget: float = 0.0

    def __post_init__(self):
        if not (self.sill >= 0 and self.range > 0 and self.nugget >= 0):
            raise ValueError(f"invalid covariance parameters {self}")

    @property
    def total(self):
        return self.sill + self.nugget

    def cross(self, a, b):
        """Covariance between distinct sites (no nugget)."""
        return self.sill * np.exp(-pairwise_distances(a, b) / self.range)

    def matrix(self, coords):
        """Covariance of observations at ``coords`` (nugget on the diagonal)."""
        C = self.cross(coords, coords)
        C[np.diag_indices_from(C)] += self.nugget
        return C

    def as_log(self):
        return np.log([self.sill, self.range, self.nugget])

    @classmethod
    def from_log(cls, x):
        x = np.clip(np.asarray(x, dtype=float), -30.0, 30.0)
        return cls(*map(float, np.exp(x)))


def cov_value(spec, d, same_point=False):
    """Covariance at distance ``d``; the nugget enters only for the same point."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    out = spec.sill * np.exp(-d / spec.range)
    if same_point:
        out = out + spec.nugget
    return out


@dataclass
class Points:
    """Scattered observations: locations, values and the mean model."""

    coords: np.ndarray
    values: np.ndarray
    trend: TrendSpec = TrendSpec()

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.coords.shape[0] != self.values.shape[0]:
            raise ValueError("coords and values differ in length")

    def __len__(self):
        return self.values.shape[0]

    @property
    def X(self):
        return self.trend.design(self.coords)

    def subset(self, idx):
        return Points(self.coords[idx], self.values[idx], self.trend)

    def points(self):
        return self


@dataclass
class SpatialDataset:
    """Gridded field: values per cell (NaN where missing) and an observed mask."""

    geometry: GridGeometry
    values: np.ndarray
    mask: np.ndarray
    trend: TrendSpec = TrendSpec()

    def __post_init__(self):
        n = self.geometry.n_cells
        self.values = np.asarray(self.values, dtype=float).reshape(n).copy()
        self.mask = np.asarray(self.mask, dtype=bool).reshape(n).copy()
        self.values[~self.mask] = np.nan
        if np.any(np.isnan(self.values[self.mask])):
            raise ValueError("observed cells must carry finite values")

    @property
    def n_observed(self):
        return int(self.mask.sum())

    @property
    def n_missing(self):
        return self.geometry.n_cells - self.n_observed

    @property
    def observed_index(self):
        return np.flatnonzero(self.mask)

    def coords(self):
        return self.geometry.coords()

    def points(self):
        idx = self.observed_index
        return Points(self.geometry.coords()[idx], self.values[idx], self.trend)

    def with_mask(self, mask):
        mask = np.asarray(mask, dtype=bool) & self.mask
        return SpatialDataset(self.geometry, self.values, mask, self.trend)

    def as_grid(self):
        return self.values.reshape(self.geometry.shape)


def as_points(data):
    return data.points()


@dataclass
class PredictionResult:
    """Per-location predictions with a 95% interval."""

    mean: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    method: str = ""
    wall_time: float = 0.0
    cores: int = 1
    info: dict = field(default_factory=dict)

    @classmethod
    def gaussian(cls, mean, se, method="", **kw):
        mean = np.asarray(mean, dtype=float)
        se = np.asarray(se, dtype=float)
        return cls(mean, se, mean - Z975 * se, mean + Z975 * se, method=method, **kw)

    def __len__(self):
        return self.mean.shape[0]

    def take(self, idx):
        return PredictionResult(self.mean[idx], self.se[idx], self.lower[idx], self.upper[idx],
                                self.method, self.wall_time, self.cores, dict(self.info))

    @classmethod
    def concat(cls, parts, method=""):
        return cls(*(np.concatenate([getattr(p, a) for p in parts]) if parts else np.zeros(0)
                     for a in ("mean", "se", "lower", "upper")), method=method)


# ---------------------------------------------------------------------------
# likelihood


@dataclass
class GLSState:
    """Cholesky-whitened quantities for one covariance matrix."""

    L: np.ndarray
    beta: np.ndarray
    beta_cov_unscaled: np.ndarray  # (X' S^-1 X)^-1
    whitened_resid: np.ndarray
    logdet: float

    @property
    def loglik(self):
        n = self.whitened_resid.shape[0]
        return -0.5 * (n * LOG2PI + self.logdet + float(self.whitened_resid @ self.whitened_resid))


def gls(L, X, y):
    """GLS fit given the lower Cholesky factor of the covariance."""
    Xt = scipy.linalg.solve_triangular(L, X, lower=True)
    yt = scipy.linalg.solve_triangular(L, y, lower=True)
    XtX = Xt.T @ Xt
    beta = np.linalg.solve(XtX, Xt.T @ yt)
    return beta, np.linalg.inv(XtX), yt - Xt @ beta


def _state(points, spec, beta=None):
    L = dense_cholesky(spec.matrix(points.coords), check_symmetric=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    X = points.X
    if beta is None:
        beta, V, r = gls(L, X, points.values)
    else:
        beta = np.asarray(beta, dtype=float)
        r = scipy.linalg.solve_triangular(L, points.values - X @ beta, lower=True)
        Xt = scipy.linalg.solve_triangular(L, X, lower=True)
        V = np.linalg.inv(Xt.T @ Xt)
    return GLSState(L, beta, V, r, logdet)


def loglik(data, spec, beta=None):
    """Gaussian log-likelihood with the mean coefficients profiled by GLS.

    Pass ``beta`` to evaluate at fixed mean coefficients instead.
    """
    return _state(as_points(data), spec, beta).loglik


def gls_beta(data, spec):
    return _state(as_points(data), spec).beta


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    spec: CovarianceSpec
    beta: np.ndarray
    loglik: float
    converged: bool = True
    nfev: int = 0


def nelder_mead(objective, x0, step=0.5, fatol=1e-6, xatol=1e-4, maxfev=2000):
    """Maximize ``objective`` with a simplex search started around ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(len(x0))])

    def neg(x):
        try:
            v = objective(x)
        except (NotPositiveDefinite, np.linalg.LinAlgError, FloatingPointError):
            return np.inf
        return -v if np.isfinite(v) else np.inf

    res = optimize.minimize(neg, x0, method="Nelder-Mead",
                            options=dict(initial_simplex=simplex, fatol=fatol, xatol=xatol,
                                         maxfev=maxfev, maxiter=maxfev))
    x, f = res.x, res.fun
    f0 = neg(x0)
    if f0 <= f:
        x, f = x0, f0
    return x, -f, bool(res.success), int(res.nfev)


def fit_ml(data, init, maxfev=2000, fatol=1e-6):
    """Maximum-likelihood fit of (sill, range, nugget) on the log scale.

    Never returns a worse log-likelihood than the one at ``init``.  When the
    evaluation budget runs out the best iterate is returned with
    ``converged=False`` and a warning.
    """
    points = as_points(data)
    if len(points) < 10:
        raise ValueError("need at least 10 observations to fit")
    x0 = _log_init(init)

    def objective(x):
        return _state(points, CovarianceSpec.from_log(x)).loglik

    x, ll, ok, nfev = nelder_mead(objective, x0, fatol=fatol, maxfev=maxfev)
    if not ok:
        warnings.warn("fit_ml: evaluation budget exhausted; returning best iterate", RuntimeWarning)
    spec = CovarianceSpec.from_log(x)
    return FitResult(spec, _state(points, spec).beta, ll, ok, nfev)


def _log_init(spec):
    floor = 1e-6 * max(spec.total, 1e-12)
    return np.log([max(spec.sill, floor), spec.range, max(spec.nugget, floor)])


def default_init(data):
    """Moment-based starting values: half the variance each, range 1/10 diameter."""
    points = as_points(data)
    X = points.X
    r = points.values - X @ np.linalg.lstsq(X, points.values, rcond=None)[0]
    v = float(np.var(r)) or 1.0
    ext = np.ptp(points.coords, axis=0)
    return CovarianceSpec(0.5 * v, max(0.1 * math.hypot(*ext), 1e-3), 0.5 * v)


# ---------------------------------------------------------------------------
# kriging


def krige_state(points, spec, beta=None):
    return _state(points, spec, beta)


def predict_from_state(points, spec, state, test_coords, known_beta=False, chunk=512):
    """Conditional-Gaussian predictions given a whitened state.

    With ``known_beta`` the mean coefficients are treated as fixed, so no
    trend-uncertainty term is added to the variance.
    """
    test_coords = np.atleast_2d(np.asarray(test_coords, dtype=float))
    n0 = test_coords.shape[0]
    mean = np.empty(n0)
    var = np.empty(n0)
    X = points.X
    Xt = scipy.linalg.solve_triangular(state.L, X, lower=True)
    for s in range(0, n0, chunk):
        t = test_coords[s:s + chunk]
        C = spec.cross(points.coords, t)
        W = scipy.linalg.solve_triangular(state.L, C, lower=True)
        x0 = points.trend.design(t)
        mean[s:s + chunk] = x0 @ state.beta + W.T @ state.whitened_resid
        v = spec.total - np.sum(W * W, axis=0)
        if not known_beta:
            g = x0 - W.T @ Xt
            v += np.einsum("ij,jk,ik->i", g, state.beta_cov_unscaled, g)
        var[s:s + chunk] = v
    return mean, np.sqrt(np.maximum(var, 0.0))


def krige(train, test_coords, spec, max_exact_n=20000, beta=None):
    """Exact (universal) kriging of new observations at ``test_coords``.

    With ``beta`` given the mean is treated as known (simple kriging).
    """
    t0 = time.perf_counter()
    points = as_points(train)
    if len(points) > max_exact_n:
        raise TooLarge(f"{len(points)} observations exceed the exact ceiling {max_exact_n}")
    state = _state(points, spec, beta)
    mean, se = predict_from_state(points, spec, state, test_coords, known_beta=beta is not None)
    return PredictionResult.gaussian(mean, se, method="exact-gp", wall_time=time.perf_counter() - t0,
                                     info={"beta": state.beta})


def simulate_gp(geometry, spec, trend=None, seed=0, max_cells=20000):
    """Exact draw on every cell of ``geometry`` via a dense Cholesky factor."""
    if trend is None:
        trend = TrendSpec("constant", (0.0,))
    n = geometry.n_cells
    if n > max_cells:
        raise TooLarge(f"{n} cells exceed the simulation ceiling {max_cells}")
    rng = np.random.default_rng(seed)
    coords = geometry.coords()
    z = rng.standard_normal(n)
    e = rng.standard_normal(n)
    field_ = trend.mean(coords)
    if spec.sill > 0:
        C = spec.cross(coords, coords)
        L = dense_cholesky(C, check_symmetric=False)
        del C
        field_ = field_ + L @ z
    field_ = field_ + math.sqrt(spec.nugget) * e
    return SpatialDataset(geometry, field_, np.ones(n, dtype=bool), replace(trend))
