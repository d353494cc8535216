"""Low-rank basis-expansion models: fixed rank kriging, LatticeKrig and the
(modified) predictive process.

All three share one linear-algebra core.  The observations are written as

    y = X beta + G theta + e,   theta ~ N(0, Q^{-1}),   e ~ N(0, diag(d))

and every likelihood or prediction goes through the K x K matrix
``M = Q + G' D^{-1} G`` (Woodbury), so nothing N x N is ever formed.
"""

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.cluster.vq import kmeans2
from scipy.spatial import cKDTree

from .errors import NotPositiveDefinite, TooLarge
from .gpcore import (LOG2PI, CovarianceSpec, GridGeometry, PredictionResult, as_points,
                     default_init, nelder_mead)
from .numerics import dense_cholesky, pairwise_distances, sparse_cholesky


def eval_bisquare(d, a):
    """Bisquare ``(1 - (d/a)^2)^2`` inside the aperture ``a``, zero outside."""
    d = np.asarray(d, dtype=float)
    u = d / a
    return np.where(u <= 1.0, (1.0 - u * u) ** 2, 0.0)


def eval_wendland(d):
    """Wendland polynomial on scaled distance, 1 at the origin, support [0, 1]."""
    d = np.asarray(d, dtype=float)
    dc = np.minimum(d, 1.0)
    return np.where(d <= 1.0, (1.0 - dc) ** 6 * (35 * dc * dc + 18 * dc + 3) / 3.0, 0.0)


# ---------------------------------------------------------------------------
# basis infrastructure


@dataclass
class Resolution:
    centers: np.ndarray  # (K_r, 2), row-major over a (ny, nx) lattice
    shape: tuple  # (ny, nx)
    spacing: float
    support: float  # aperture (bisquare) or radius of the wendland support
    family: str

    @property
    def K(self):
        return self.centers.shape[0]

    def evaluate(self, coords):
        """Sparse ``N x K_r`` evaluation matrix."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        pairs = cKDTree(coords).sparse_distance_matrix(cKDTree(self.centers), self.support,
                                                       output_type="ndarray")
        d = pairs["v"]
        if self.family == "bisquare":
            w = eval_bisquare(d, self.support)
        else:
            w = eval_wendland(d / self.support)
        keep = w > 0
        H = sp.csr_matrix((w[keep], (pairs["i"][keep], pairs["j"][keep])), shape=(len(coords), self.K))
        H.sort_indices()
        return H

    def neighbor_matrix(self):
        """Rook adjacency of the center lattice."""
        ny, nx = self.shape
        idx = np.arange(ny * nx).reshape(ny, nx)
        a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
        b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
        W = sp.coo_matrix((np.ones(len(a)), (a, b)), shape=(self.K, self.K))
        return (W + W.T).tocsc()


@dataclass
class BasisSystem:
    resolutions: list

    @property
    def R(self):
        return len(self.resolutions)

    @property
    def sizes(self):
        return [r.K for r in self.resolutions]

    @property
    def K(self):
        return int(sum(self.sizes))

    def evaluate(self, coords):
        return sp.hstack([r.evaluate(coords) for r in self.resolutions]).tocsr()

    def blocks(self):
        """Index ranges of the resolutions within the stacked basis."""
        edges = np.concatenate([[0], np.cumsum(self.sizes)])
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def _bbox(extent):
    if isinstance(extent, GridGeometry):
        return (*extent.lon_range, *extent.lat_range)
    c = np.atleast_2d(np.asarray(extent, dtype=float))
    if c.shape == (2, 2):
        return c[0, 0], c[0, 1], c[1, 0], c[1, 1]
    return c[:, 0].min(), c[:, 0].max(), c[:, 1].min(), c[:, 1].max()


def build_basis(extent, R=3, family="wendland", coarsest_spacing=None, margin=0, overlap=None,
                n_coarse=2):
    """Multiresolution grid of basis centers covering ``extent``.

    ``extent`` is a GridGeometry, an array of coordinates, or ``[[x0, x1],
    [y0, y1]]``.  The coarsest lattice uses square cells of side
    ``coarsest_spacing`` (default: longest side / ``n_coarse``) plus
    ``margin`` extra cells on every side; each further resolution splits every
    cell in four, so centers quadruple and the scale halves.  The support is
    ``overlap`` times the spacing (1.5 for bisquare, 2.5 for wendland).
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    if family not in ("bisquare", "wendland"):
        raise ValueError(f"unknown basis family {family!r}")
    x0, x1, y0, y1 = _bbox(extent)
    w, h = x1 - x0, y1 - y0
    delta = coarsest_spacing or max(w, h) / n_coarse
    nx = max(1, math.ceil(w / delta - 1e-9)) + 2 * margin
    ny = max(1, math.ceil(h / delta - 1e-9)) + 2 * margin
    left = 0.5 * (x0 + x1) - 0.5 * nx * delta
    bottom = 0.5 * (y0 + y1) - 0.5 * ny * delta
    if overlap is None:
        overlap = 1.5 if family == "bisquare" else 2.5
    res = []
    for r in range(R):
        f = 2 ** r
        dr = delta / f
        xs = left + (np.arange(nx * f) + 0.5) * dr
        ys = bottom + (np.arange(ny * f) + 0.5) * dr
        gx, gy = np.meshgrid(xs, ys)
        res.append(Resolution(np.column_stack([gx.ravel(), gy.ravel()]), (ny * f, nx * f), dr,
                              overlap * dr, family))
    return BasisSystem(res)


# ---------------------------------------------------------------------------
# Woodbury core


class _DenseFactor:
    def __init__(self, A):
        self.Lc = dense_cholesky(A, check_symmetric=False)
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.Lc))))

    def solve(self, b):
        return scipy.linalg.cho_solve((self.Lc, True), b)

    def half_solve(self, b):
        return scipy.linalg.solve_triangular(self.Lc, b, lower=True)


def _factor(A):
    if sp.issparse(A):
        return sparse_cholesky(A.tocsc())
    return _DenseFactor(A)


@dataclass
class WoodburyState:
    """Profiled-GLS likelihood pieces for ``G Q^{-1} G' + diag(d)``."""

    beta: np.ndarray
    V: np.ndarray  # (X' S^-1 X)^-1
    a: np.ndarray  # M^-1 G' D^-1 r: posterior mean of theta
    W: np.ndarray  # M^-1 G' D^-1 X
    F: object  # factor of M
    quad: float  # r' S^-1 r
    logdet: float  # log|S|
    n: int

    @property
    def loglik(self):
        return -0.5 * (self.n * LOG2PI + self.logdet + self.quad)


def woodbury_state(G, Q, Q_logdet, d, X, y, beta=None):
    """Likelihood state for covariance ``G Q^{-1} G' + diag(d)``.

    ``G`` may be sparse or dense; ``Q`` must match (sparse ``Q`` gives a
    sparse factorization of ``M``).  ``Q_logdet`` is ``log|Q|``.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise NotPositiveDefinite("noise variances must be positive")
    n = len(y)
    Di = 1.0 / d
    if sp.issparse(G):
        GtD = (G.T @ sp.diags(Di)).tocsr()
        M = (Q + GtD @ G).tocsc() if sp.issparse(Q) else np.asarray(Q + (GtD @ G).toarray())
    else:
        GtD = (G * Di[:, None]).T
        M = np.asarray(Q + GtD @ G)
    F = _factor(M)
    logdet = F.logdet - Q_logdet + float(np.sum(np.log(d)))
    GX = np.asarray(GtD @ X)
    Gy = np.asarray(GtD @ y).ravel()
    W = F.solve(GX)
    W = W.reshape(GX.shape)
    ay = F.solve(Gy)
    XSX = X.T @ (Di[:, None] * X) - GX.T @ W
    XSy = X.T @ (Di * y) - GX.T @ ay
    V = np.linalg.inv(XSX)
    if beta is None:
        beta = V @ XSy
    beta = np.asarray(beta, dtype=float)
    r = y - X @ beta
    a = ay - W @ beta
    quad = float(r @ (Di * r) - (Gy - GX @ beta) @ a)
    return WoodburyState(beta, V, a, W, F, quad, logdet, n)


def woodbury_predict(state, G0, d0, X0, known_beta=False, chunk=2000):
    """Mean and standard error of new observations with basis rows ``G0``."""
    n0 = X0.shape[0]
    mean = X0 @ state.beta + np.asarray(G0 @ state.a).ravel()
    var = np.empty(n0)
    for s in range(0, n0, chunk):
        g = G0[s:s + chunk]
        g = g.toarray() if sp.issparse(g) else np.asarray(g)
        Z = state.F.half_solve(g.T)
        Z = Z.reshape(-1, g.shape[0])
        v = np.sum(Z * Z, axis=0)
        if not known_beta:
            h = X0[s:s + chunk] - g @ state.W
            v = v + np.einsum("ij,jk,ik->i", h, state.V, h)
        var[s:s + chunk] = v
    var = var + d0
    return mean, np.sqrt(np.maximum(var, 0.0))


# ---------------------------------------------------------------------------
# coefficient priors and fits


@dataclass
class FRKPrior:
    """Block-diagonal prior: resolution r has covariance ``var_r exp(-d/phi_r)``."""

    phi: tuple
    variances: tuple
    fine_var: float = 0.0  # sigma_xi^2


@dataclass
class LKPrior:
    """SAR prior per resolution with variance weights ``alpha_r ~ r^-nu``.

    ``lam`` is the noise-to-signal ratio ``sigma_eps^2 / sigma_w^2``.
    """

    kappa: float = 1.0
    nu: float = 1.0
    lam: float = 0.1
    sigma2: float = 1.0


@dataclass
class LowRankFit:
    method: str
    basis: object  # BasisSystem or knot array
    prior: object  # FRKPrior, LKPrior or CovarianceSpec (PP)
    beta: np.ndarray
    fine_var: float
    nugget: float
    loglik: float
    converged: bool = True
    nfev: int = 0
    trend: object = None
    train: object = field(default=None, repr=False)
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.fine_var < 0 or self.nugget < 0:
            raise ValueError("variances must be nonnegative")


# FRK ------------------------------------------------------------------------


def frk_blocks(basis, prior):
    """Dense block-diagonal prior covariance ``Var(theta)``."""
    S = np.zeros((basis.K, basis.K))
    for res, sl, phi, v in zip(basis.resolutions, basis.blocks(), prior.phi, prior.variances):
        S[sl, sl] = v * np.exp(-pairwise_distances(res.centers) / phi)
    return S


def _frk_state(points, H, basis, prior, nugget, beta=None):
    S = frk_blocks(basis, prior)
    # theta = chol(S) z with z ~ N(0, I): B = H chol(S), Q = I
    Ls = dense_cholesky(S + 1e-12 * np.trace(S) / basis.K * np.eye(basis.K), check_symmetric=False)
    B = np.asarray(H @ Ls)
    d = np.full(len(points), prior.fine_var + nugget)
    return woodbury_state(B, np.eye(basis.K), 0.0, d, points.X, points.values, beta), Ls


def frk_loglik(data, basis, prior, nugget=0.0, beta=None):
    points = as_points(data)
    H = basis.evaluate(points.coords)
    return _frk_state(points, H, basis, prior, nugget, beta)[0].loglik


def frk_fit(data, basis=None, init=None, nugget=None, maxfev=2000, max_K=2000):
    """ML fit of FRK: per-resolution variances and ranges plus the iid variance.

    With ``nugget`` given, sigma_eps^2 is fixed and sigma_xi^2 estimated;
    otherwise all iid variance is attributed to measurement error.
    """
    points = as_points(data)
    if basis is None:
        basis = build_basis(points.coords, R=3, family="bisquare")
    if basis.K > max_K:
        raise TooLarge(f"K={basis.K} exceeds the ceiling {max_K}")
    H = basis.evaluate(points.coords)
    R = basis.R
    if init is None:
        v = default_init(points).total
        init = FRKPrior(tuple(2.0 * r.spacing for r in basis.resolutions),
                        tuple(0.5 * v / R for _ in range(R)), 0.0)
    fixed = nugget is not None
    iid0 = init.fine_var if fixed else init.fine_var + (nugget or 0.0)
    if iid0 <= 0:
        iid0 = 0.1 * sum(init.variances)

    def unpack(x):
        x = np.clip(x, -30, 30)
        phi = tuple(np.exp(x[:R]))
        var = tuple(np.exp(x[R:2 * R]))
        iid = float(np.exp(x[2 * R]))
        return (FRKPrior(phi, var, iid), nugget) if fixed else (FRKPrior(phi, var, 0.0), iid)

    def objective(x):
        prior, eps = unpack(x)
        return _frk_state(points, H, basis, prior, eps)[0].loglik

    x0 = np.log(np.concatenate([init.phi, init.variances, [iid0]]))
    x, ll, ok, nfev = nelder_mead(objective, x0, maxfev=maxfev)
    if not ok:
        warnings.warn("frk_fit: evaluation budget exhausted; returning best iterate", RuntimeWarning)
    prior, eps = unpack(x)
    state, _ = _frk_state(points, H, basis, prior, eps)
    return LowRankFit("frk", basis, prior, state.beta, prior.fine_var, eps, ll, ok, nfev,
                      points.trend, points)


# LatticeKrig ------------------------------------------------------------------


def lk_alpha(R, nu):
    a = np.arange(1, R + 1, dtype=float) ** (-nu)
    return a / a.sum()


def sar_matrix(res, kappa):
    """SAR operator: ``4 + kappa^2`` on the diagonal, -1 for rook neighbors."""
    return (sp.identity(res.K, format="csc") * (4.0 + kappa * kappa) - res.neighbor_matrix()).tocsc()


class _LKCache:
    """Per-kappa SAR factors and basis normalizations for fixed locations."""

    def __init__(self, basis, coords):
        self.basis = basis
        self.coords = coords
        self.H = [r.evaluate(coords) for r in basis.resolutions]
        self.kappa = None

    def update(self, kappa):
        if kappa == self.kappa:
            return
        self.facs, self.norm = [], []
        for res, H in zip(self.basis.resolutions, self.H):
            F = sparse_cholesky(sar_matrix(res, kappa))
            self.facs.append(F)
            self.norm.append(_marginal_var(F, H))
        self.kappa = kappa

    def design(self, nu):
        """Normalized, alpha-weighted basis ``G`` and prior precision ``Q``."""
        alpha = lk_alpha(self.basis.R, nu)
        G = sp.hstack([sp.diags(math.sqrt(a) / np.sqrt(v)) @ H
                       for a, v, H in zip(alpha, self.norm, self.H)]).tocsr()
        return G


def _marginal_var(F, H, chunk=2000):
    """``h' Q^{-1} h`` per row of ``H`` where ``Q = B B`` and ``F`` factors ``B``.

    B is symmetric, so ``h' Q^{-1} h = |B^{-1} h|^2``.
    """
    out = np.empty(H.shape[0])
    for s in range(0, H.shape[0], chunk):
        Z = F.solve(H[s:s + chunk].T.toarray())
        out[s:s + chunk] = np.sum(Z * Z, axis=0)
    if np.any(out <= 0):
        raise ValueError("a location lies outside the support of every basis function")
    return out


def _lk_precision(cache):
    Bs = [sar_matrix(res, cache.kappa) for res in cache.basis.resolutions]
    Q = sp.block_diag([B @ B for B in Bs], format="csc")
    logdet = 2.0 * sum(F.logdet for F in cache.facs)
    return Q, logdet


def _lk_state(points, cache, prior, beta=None, profile=True):
    """Returns (state, sigma2).  ``Sigma = sigma2 (G Q^-1 G' + lam I)``."""
    cache.update(prior.kappa)
    G = cache.design(prior.nu)
    Q, ldQ = _lk_precision(cache)
    n = len(points)
    d = np.full(n, prior.lam)
    st = woodbury_state(G, Q, ldQ, d, points.X, points.values, beta)
    if profile:
        s2 = st.quad / n
    else:
        s2 = prior.sigma2
    # rescale the unit-variance state to sigma2
    st.logdet += n * math.log(s2)
    st.quad /= s2
    st.V = st.V * s2
    return st, s2


def lk_loglik(data, basis, prior, beta=None, profile=False):
    """LatticeKrig log-likelihood; ``profile`` replaces sigma_w^2 by its MLE."""
    points = as_points(data)
    return _lk_state(points, _LKCache(basis, points.coords), prior, beta, profile)[0].loglik


def _trend_only(points, nugget):
    X, y = points.X, points.values
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ beta
    n = len(y)
    ll = -0.5 * (n * LOG2PI + n * math.log(nugget) + r @ r / nugget)
    return ll, beta, np.linalg.inv(X.T @ X) * nugget


def lk_basis(extent, R=3, n_coarse=8, margin=1):
    return build_basis(extent, R=R, family="wendland", n_coarse=n_coarse, margin=margin)


def lk_fit(data, basis=None, init=None, maxfev=2000, max_K=20000):
    """ML fit of LatticeKrig over (lam, kappa, nu) with sigma_w^2 profiled."""
    points = as_points(data)
    if basis is None:
        basis = lk_basis(points.coords)
    if basis.K > max_K:
        raise TooLarge(f"K={basis.K} exceeds the ceiling {max_K}")
    init = init or LKPrior()
    cache = _LKCache(basis, points.coords)

    def unpack(x):
        return LKPrior(float(np.exp(np.clip(x[1], -10, 5))), float(x[2]),
                       float(np.exp(np.clip(x[0], -30, 30))))

    def objective(x):
        return _lk_state(points, cache, unpack(x))[0].loglik

    x0 = np.array([math.log(init.lam), math.log(init.kappa), init.nu])
    x, ll, ok, nfev = nelder_mead(objective, x0, maxfev=maxfev)
    if not ok:
        warnings.warn("lk_fit: evaluation budget exhausted; returning best iterate", RuntimeWarning)
    prior = unpack(x)
    st, s2 = _lk_state(points, cache, prior)
    prior.sigma2 = s2
    return LowRankFit("lattice-krig", basis, prior, st.beta, 0.0, prior.lam * s2, ll, ok, nfev,
                      points.trend, points)


def lk_marginal_variance(basis, prior, coords):
    """Prior variance ``Var(h_r'(s) theta_r)`` of each resolution at ``coords``
    after normalization, shape ``(R, N)``."""
    cache = _LKCache(basis, coords)
    cache.update(prior.kappa)
    G = cache.design(prior.nu)
    out = []
    for sl, F in zip(basis.blocks(), cache.facs):
        out.append(prior.sigma2 * _marginal_var(F, G[:, sl]))
    return np.array(out)


# predictive process -------------------------------------------------------------


def knot_grid(coords, K, method="grid", seed=0):
    """``K`` well-dispersed knots over the bounding box of ``coords``.

    ``grid`` picks nx * ny = K closest to the box aspect ratio (falling back
    to the largest such grid not above K); ``kmeans`` clusters the points.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if method == "kmeans":
        cent, _ = kmeans2(coords, K, seed=seed, minit="++")
        return cent
    x0, y0 = coords.min(axis=0)
    x1, y1 = coords.max(axis=0)
    aspect = (x1 - x0) / max(y1 - y0, 1e-12)
    best = None
    for nx in range(1, K + 1):
        ny = K // nx
        if ny < 1:
            break
        score = (K - nx * ny, abs(math.log(max(nx / ny, 1e-12) / max(aspect, 1e-12))))
        if best is None or score < best[0]:
            best = (score, nx, ny)
    _, nx, ny = best
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def pp_build(knots, spec, locations):
    """Induced basis ``C(s, s*) Sigma_{w*}^{-1}``, one row per location."""
    knots = np.atleast_2d(np.asarray(knots, dtype=float))
    Ls = dense_cholesky(spec.cross(knots, knots), check_symmetric=False)
    C = spec.cross(np.atleast_2d(np.asarray(locations, dtype=float)), knots)
    return scipy.linalg.cho_solve((Ls, True), C.T).T


def _pp_factor(knots, spec, coords):
    """``B = C L*^{-T}`` so that ``B B' = C Sigma*^{-1} C'``."""
    Ls = dense_cholesky(spec.cross(knots, knots), check_symmetric=False)
    C = spec.cross(coords, knots)
    return scipy.linalg.solve_triangular(Ls, C.T, lower=True).T


def pp_noise(spec, B, modified=True):
    """Diagonal noise of the (modified) predictive process per location."""
    d = np.full(B.shape[0], spec.nugget)
    if modified:
        d += np.maximum(spec.sill - np.sum(B * B, axis=1), 0.0)
    return np.maximum(d, 1e-10 * max(spec.sill, 1e-300))


def _pp_state(points, knots, spec, modified=True, beta=None):
    B = _pp_factor(knots, spec, points.coords)
    d = pp_noise(spec, B, modified)
    K = B.shape[1]
    return woodbury_state(B, np.eye(K), 0.0, d, points.X, points.values, beta)


def pp_loglik(data, knots, spec, modified=True, beta=None):
    return _pp_state(as_points(data), np.asarray(knots, float), spec, modified, beta).loglik


def pp_fit(data, knots=25, init=None, modified=True, maxfev=2000, knot_method="grid"):
    points = as_points(data)
    if np.isscalar(knots):
        knots = knot_grid(points.coords, int(knots), knot_method)
    knots = np.atleast_2d(np.asarray(knots, dtype=float))
    if len(np.unique(knots, axis=0)) < len(knots):
        raise ValueError("knots must be distinct")
    init = init or default_init(points)
    x0 = np.log([max(init.sill, 1e-8), init.range, max(init.nugget, 1e-8)])

    def objective(x):
        return _pp_state(points, knots, CovarianceSpec.from_log(x), modified).loglik

    x, ll, ok, nfev = nelder_mead(objective, x0, maxfev=maxfev)
    if not ok:
        warnings.warn("pp_fit: evaluation budget exhausted; returning best iterate", RuntimeWarning)
    spec = CovarianceSpec.from_log(x)
    st = _pp_state(points, knots, spec, modified)
    return LowRankFit("pred-proc", knots, spec, st.beta, 0.0, spec.nugget, ll, ok, nfev,
                      points.trend, points, {"modified": modified})


def pp_fit_predict(data, test_coords, knots=25, init=None, **kw):
    t0 = time.perf_counter()
    fit = pp_fit(data, knots, init, **kw)
    res = lowrank_predict(fit, test_coords)
    res.wall_time = time.perf_counter() - t0
    return fit, res


# ---------------------------------------------------------------------------
# dispatch


def lowrank_fit(data, prior, basis=None, nugget=None, maxfev=2000):
    """Fit a low-rank model; the type of ``prior`` selects the variant and
    supplies starting values."""
    if isinstance(prior, FRKPrior):
        return frk_fit(data, basis, prior, nugget, maxfev)
    if isinstance(prior, LKPrior):
        return lk_fit(data, basis, prior, maxfev)
    if isinstance(prior, CovarianceSpec):
        return pp_fit(data, 25 if basis is None else basis, prior, maxfev=maxfev)
    raise TypeError(f"unknown prior {type(prior).__name__}")


def lowrank_predict(fit, test_coords):
    """Predict new noisy observations ``mu + w + xi + eps`` at ``test_coords``."""
    t0 = time.perf_counter()
    pts = fit.train
    test_coords = np.atleast_2d(np.asarray(test_coords, dtype=float))
    X0 = fit.trend.design(test_coords)
    if fit.method == "frk":
        H = fit.basis.evaluate(pts.coords)
        st, Ls = _frk_state(pts, H, fit.basis, fit.prior, fit.nugget)
        G0 = fit.basis.evaluate(test_coords) @ Ls
        mean, se = woodbury_predict(st, G0, fit.fine_var + fit.nugget, X0)
    elif fit.method == "lattice-krig":
        prior = fit.prior
        if prior.sigma2 == 0:
            # no spatial signal: GLS trend with iid errors
            _, beta, V = _trend_only(pts, fit.nugget)
            mean = X0 @ beta
            se = np.sqrt(fit.nugget + np.einsum("ij,jk,ik->i", X0, V, X0))
        else:
            cache = _LKCache(fit.basis, pts.coords)
            st, s2 = _lk_state(pts, cache, prior, profile=False)
            tc = _LKCache(fit.basis, test_coords)
            tc.update(prior.kappa)
            G0 = tc.design(prior.nu)
            # the state is on the unit scale for theta; rescale variances
            st.V = st.V / s2
            mean, se = woodbury_predict(st, G0, prior.lam, X0)
            se = se * math.sqrt(s2)
    elif fit.method == "pred-proc":
        spec = fit.prior
        modified = fit.extra.get("modified", True)
        st = _pp_state(pts, fit.basis, spec, modified)
        B0 = _pp_factor(fit.basis, spec, test_coords)
        mean, se = woodbury_predict(st, B0, pp_noise(spec, B0, modified), X0)
    else:
        raise ValueError(f"unknown low-rank method {fit.method!r}")
    return PredictionResult.gaussian(mean, se, method=fit.method, wall_time=time.perf_counter() - t0)
