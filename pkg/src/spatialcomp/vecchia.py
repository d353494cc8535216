"""Nearest-neighbor Gaussian process (Vecchia) likelihood, ML-fitted response
model and the conjugate NNGP with cross-validated hyperparameters."""

import math
import time
import warnings
from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.stats import t as student_t

from .errors import NotPositiveDefinite
from .gpcore import LOG2PI, CovarianceSpec, FitResult, PredictionResult, as_points, default_init, nelder_mead
from .numerics import KdTree, dense_cholesky


# ---------------------------------------------------------------------------
# ordering and neighbor graph


@numba.njit(cache=True)
def _maxmin(coords, first):
    n = coords.shape[0]
    order = np.empty(n, dtype=np.int64)
    dmin = np.full(n, np.inf)
    used = np.zeros(n, dtype=np.bool_)
    cur = first
    for k in range(n):
        order[k] = cur
        used[cur] = True
        best = -1.0
        nxt = -1
        for j in range(n):
            if used[j]:
                continue
            dx = coords[j, 0] - coords[cur, 0]
            dy = coords[j, 1] - coords[cur, 1]
            d = math.sqrt(dx * dx + dy * dy)
            if d < dmin[j]:
                dmin[j] = d
            if dmin[j] > best:
                best = dmin[j]
                nxt = j
        cur = nxt
    return order


def ordering(coords, rule="coord"):
    """Site ordering: lexicographic by (lon, lat) or greedy max-min."""
    coords = np.asarray(coords, dtype=float)
    if rule == "coord":
        return np.lexsort((coords[:, 1], coords[:, 0]))
    if rule == "maxmin":
        c = coords.mean(axis=0)
        first = int(np.argmin(((coords - c) ** 2).sum(axis=1)))
        return _maxmin(np.ascontiguousarray(coords), first)
    raise ValueError(f"unknown ordering rule {rule!r}")


@numba.njit(cache=True)
def _merge_block(pts, start, stop, m, cand, out):
    """Best ``m`` predecessors of each point in [start, stop) by (distance, position)."""
    bd = np.empty(m)
    bi = np.empty(m, dtype=np.int64)
    for i in range(start, stop):
        k = 0
        ncand = cand.shape[1]
        total = ncand + (i - start)
        for c in range(total):
            j = cand[i - start, c] if c < ncand else start + (c - ncand)
            if j < 0:
                continue
            dx = pts[j, 0] - pts[i, 0]
            dy = pts[j, 1] - pts[i, 1]
            d = math.sqrt(dx * dx + dy * dy)
            if k == m and (d > bd[m - 1] or (d == bd[m - 1] and j > bi[m - 1])):
                continue
            p = k if k < m else m - 1
            while p > 0 and (bd[p - 1] > d or (bd[p - 1] == d and bi[p - 1] > j)):
                if p < m:
                    bd[p] = bd[p - 1]
                    bi[p] = bi[p - 1]
                p -= 1
            bd[p] = d
            bi[p] = j
            if k < m:
                k += 1
        for c in range(k):
            out[i, c] = bi[c]
        for c in range(k, m):
            out[i, c] = -1


@dataclass
class NeighborGraph:
    order: np.ndarray  # ordered position -> original index
    neighbors: np.ndarray  # (N, m) ordered positions, -1 padded
    m: int

    @property
    def counts(self):
        return np.sum(self.neighbors >= 0, axis=1)


def build_graph(coords, m=20, rule="coord", block=256):
    """Ordering plus the ``m`` nearest predecessors of every ordered site.

    Ties in distance go to the earlier position, so the graph is fully
    deterministic.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    order = ordering(coords, rule)
    pts = np.ascontiguousarray(coords[order])
    n = len(pts)
    out = np.full((n, m), -1, dtype=np.int64)
    for start in range(0, n, block):
        stop = min(n, start + block)
        if start >= m:
            cand = KdTree(pts[:start]).query_batch(pts[start:stop], m)
        else:
            cand = np.tile(np.arange(start), (stop - start, 1)) if start else np.full((stop - start, 1), -1)
        _merge_block(pts, start, stop, m, np.ascontiguousarray(cand, dtype=np.int64), out)
    return NeighborGraph(order, out, m)


# ---------------------------------------------------------------------------
# factors and likelihood


@dataclass
class VecchiaFactors:
    A: sp.csr_matrix  # strictly lower triangular, ordered positions
    D: np.ndarray
    order: np.ndarray

    def precision(self):
        """Dense ``(I - A)' D^{-1} (I - A)`` in the original site order."""
        n = len(self.D)
        IA = (sp.identity(n) - self.A).toarray()
        P = IA.T @ (IA / self.D[:, None])
        inv = np.empty(n, dtype=np.int64)
        inv[self.order] = np.arange(n)
        return P[np.ix_(inv, inv)]


def _conditional(spec, pts, rows, nb):
    """Kriging weights and conditional variances for a batch of equal-size sets."""
    S = pts[nb]  # (b, k, 2)
    diff = S[:, :, None, :] - S[:, None, :, :]
    C = spec.sill * np.exp(-np.sqrt((diff ** 2).sum(-1)) / spec.range)
    k = nb.shape[1]
    C[:, np.arange(k), np.arange(k)] += spec.nugget
    c = spec.sill * np.exp(-np.sqrt(((S - pts[rows][:, None, :]) ** 2).sum(-1)) / spec.range)
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("neighbor covariance not positive definite") from None
    z = np.linalg.solve(L, c[..., None])
    b = np.linalg.solve(np.swapaxes(L, 1, 2), z)[..., 0]
    d = spec.total - np.sum(z[..., 0] ** 2, axis=1)
    return b, d


def _full_factors(spec, pts, order):
    """Complete predecessor sets: read A and D off the dense Cholesky factor."""
    L = dense_cholesky(spec.matrix(pts), check_symmetric=False)
    dl = np.diag(L)
    Li = scipy.linalg.solve_triangular(L, np.eye(len(pts)), lower=True)
    A = np.tril(-dl[:, None] * Li, -1)
    return VecchiaFactors(sp.csr_matrix(A), dl * dl, order)


def vecchia_factors(graph, spec, coords, max_entries=4_000_000):
    """Sparse coefficients A and conditional variances D of the response."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    pts = coords[graph.order]
    n = len(pts)
    counts = graph.counts
    if n > 1 and np.array_equal(counts, np.arange(n)):
        return _full_factors(spec, pts, graph.order)
    D = np.empty(n)
    rows, cols, vals = [], [], []
    for k in np.unique(counts):
        idx = np.flatnonzero(counts == k)
        if k == 0:
            D[idx] = spec.total
            continue
        step = max(1, max_entries // (k * k))
        for s in range(0, len(idx), step):
            r = idx[s:s + step]
            nb = graph.neighbors[r, :k]
            b, d = _conditional(spec, pts, r, nb)
            D[r] = d
            rows.append(np.repeat(r, k))
            cols.append(nb.ravel())
            vals.append(b.ravel())
    if np.any(D <= 0):
        raise NotPositiveDefinite("non-positive conditional variance")
    if rows:
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    else:
        A = sp.csr_matrix((n, n))
    return VecchiaFactors(A, D, graph.order)


@dataclass
class VecchiaState:
    beta: np.ndarray
    V: np.ndarray  # (X' S~^-1 X)^-1
    quad: float
    logdet: float
    n: int

    @property
    def loglik(self):
        return -0.5 * (self.logdet + self.quad + self.n * LOG2PI)


def vecchia_state(y, factors, X, beta=None):
    y = np.asarray(y, dtype=float)[factors.order]
    X = np.asarray(X, dtype=float)[factors.order]
    s = 1.0 / np.sqrt(factors.D)
    Xt = (X - factors.A @ X) * s[:, None]
    yt = (y - factors.A @ y) * s
    V = np.linalg.inv(Xt.T @ Xt)
    if beta is None:
        beta = V @ (Xt.T @ yt)
    beta = np.asarray(beta, dtype=float)
    u = yt - Xt @ beta
    return VecchiaState(beta, V, float(u @ u), float(np.sum(np.log(factors.D))), len(y))


def vecchia_loglik(y, factors, X, beta=None):
    """Vecchia log-likelihood; ``beta`` profiled by GLS unless supplied."""
    return vecchia_state(y, factors, X, beta).loglik


def nngp_loglik(data, spec, m=20, graph=None, rule="coord"):
    points = as_points(data)
    graph = graph or build_graph(points.coords, m, rule)
    return vecchia_loglik(points.values, vecchia_factors(graph, spec, points.coords), points.X)


# ---------------------------------------------------------------------------
# response NNGP


@dataclass
class NNGPFit:
    spec: CovarianceSpec
    beta: np.ndarray
    V: np.ndarray
    loglik: float
    m: int
    train: object
    converged: bool = True
    nfev: int = 0

    def as_fit_result(self):
        return FitResult(self.spec, self.beta, self.loglik, self.converged, self.nfev)


def nngp_response_fit(data, m=20, init=None, maxfev=2000, rule="coord"):
    """Maximum-likelihood fit of (sill, range, nugget) under the Vecchia likelihood."""
    points = as_points(data)
    graph = build_graph(points.coords, m, rule)
    init = init or default_init(points)
    X, y = points.X, points.values

    def objective(x):
        return vecchia_loglik(y, vecchia_factors(graph, CovarianceSpec.from_log(x), points.coords), X)

    floor = 1e-6 * max(init.total, 1e-12)
    x0 = np.log([max(init.sill, floor), init.range, max(init.nugget, floor)])
    x, ll, ok, nfev = nelder_mead(objective, x0, maxfev=maxfev)
    if not ok:
        warnings.warn("nngp_response_fit: evaluation budget exhausted", RuntimeWarning)
    spec = CovarianceSpec.from_log(x)
    st = vecchia_state(y, vecchia_factors(graph, spec, points.coords), X)
    return NNGPFit(spec, st.beta, st.V, ll, m, points, ok, nfev)


def _local_kriging(points, spec, test, m, beta, V, chunk=2048):
    """Mean, conditional variance and trend-uncertainty term given the m nearest sites."""
    tree = KdTree(points.coords)
    m = min(m, len(points))
    n0 = len(test)
    mean = np.empty(n0)
    var = np.empty(n0)
    X = points.X
    X0 = points.trend.design(test)
    resid = points.values - X @ beta
    for s in range(0, n0, chunk):
        t = test[s:s + chunk]
        nb = tree.query_batch(t, m)
        S = points.coords[nb]
        diff = S[:, :, None, :] - S[:, None, :, :]
        C = spec.sill * np.exp(-np.sqrt((diff ** 2).sum(-1)) / spec.range)
        C[:, np.arange(m), np.arange(m)] += spec.nugget
        c = spec.sill * np.exp(-np.sqrt(((S - t[:, None, :]) ** 2).sum(-1)) / spec.range)
        # a test point sharing a site with the data gets no separate nugget
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite("neighbor covariance not positive definite") from None
        z = np.linalg.solve(L, c[..., None])[..., 0]
        b = np.linalg.solve(np.swapaxes(L, 1, 2), z[..., None])[..., 0]
        mean[s:s + chunk] = X0[s:s + chunk] @ beta + np.sum(b * resid[nb], axis=1)
        g = X0[s:s + chunk] - np.einsum("ij,ijk->ik", b, X[nb])
        var[s:s + chunk] = spec.total - np.sum(z * z, axis=1) + np.einsum("ij,jk,ik->i", g, V, g)
    return mean, var


def nngp_predict(fit, test_coords, m=None):
    """Gaussian predictions from the m nearest observed sites of each test point."""
    t0 = time.perf_counter()
    test = np.atleast_2d(np.asarray(test_coords, dtype=float))
    mean, var = _local_kriging(fit.train, fit.spec, test, m or fit.m, fit.beta, fit.V)
    se = np.sqrt(np.maximum(var, 0.0))
    return PredictionResult.gaussian(mean, se, method="nngp-response", wall_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# conjugate NNGP


@dataclass
class ConjugateConfig:
    alphas: tuple = tuple(np.geomspace(0.01, 2.0, 10))
    phis: tuple = None  # default: geomspace(0.05, 2, 10) * 0.1 * diameter
    folds: int = 5
    a0: float = 2.0
    b0: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if len(self.alphas) == 0 or (self.phis is not None and len(self.phis) == 0):
            raise ValueError("grids must be nonempty")
        if min(self.alphas) < 0 or (self.phis is not None and min(self.phis) <= 0):
            raise ValueError("alpha must be >= 0 and phi > 0")


def default_phi_grid(coords):
    ext = np.ptp(np.asarray(coords, dtype=float), axis=0)
    return tuple(np.geomspace(0.05, 2.0, 10) * 0.1 * math.hypot(*ext))


def _cv_rmse(points, folds, graphs, alpha, phi, m):
    spec = CovarianceSpec(1.0, phi, alpha)
    sq, n = 0.0, 0
    for (tr, te), g in zip(folds, graphs):
        p = points.subset(tr)
        st = vecchia_state(p.values, vecchia_factors(g, spec, p.coords), p.X)
        mean, _ = _local_kriging(p, spec, points.coords[te], m, st.beta, st.V)
        sq += float(np.sum((mean - points.values[te]) ** 2))
        n += len(te)
    return math.sqrt(sq / n)


@dataclass
class ConjugateFit:
    alpha: float
    phi: float
    beta: np.ndarray
    V: np.ndarray  # unscaled (X' R~^-1 X)^-1
    a_post: float
    b_post: float
    m: int
    train: object
    cv: np.ndarray  # RMSE over the (alpha, phi) grid

    @property
    def df(self):
        return 2.0 * self.a_post

    @property
    def sigma2(self):
        """Posterior mean of sigma_w^2."""
        return self.b_post / (self.a_post - 1.0)


def conjugate_fit(data, alpha, phi, m=20, a0=2.0, b0=1.0, rule="coord", cv=None):
    """Closed-form Normal-Inverse-Gamma posterior at fixed (alpha, phi), flat prior on beta."""
    points = as_points(data)
    graph = build_graph(points.coords, m, rule)
    st = vecchia_state(points.values, vecchia_factors(graph, CovarianceSpec(1.0, phi, alpha), points.coords),
                       points.X)
    n, p = len(points), points.X.shape[1]
    return ConjugateFit(alpha, phi, st.beta, st.V, a0 + 0.5 * (n - p), b0 + 0.5 * st.quad, m, points,
                        np.zeros((1, 1)) if cv is None else cv)


def conjugate_nngp(data, config=None, m=20, test_coords=None, rule="coord"):
    """Grid search over (alpha, phi) by K-fold CV RMSE, then a conjugate refit.

    Returns the fit and, when ``test_coords`` is given, predictions with
    Student-t intervals.
    """
    t0 = time.perf_counter()
    config = config or ConjugateConfig()
    points = as_points(data)
    phis = config.phis or default_phi_grid(points.coords)
    alphas = config.alphas
    cv = np.full((len(alphas), len(phis)), np.nan)
    if len(alphas) * len(phis) > 1:
        rng = np.random.default_rng(config.seed)
        fold_id = rng.permutation(len(points)) % config.folds
        folds = [(np.flatnonzero(fold_id != f), np.flatnonzero(fold_id == f)) for f in range(config.folds)]
        graphs = [build_graph(points.coords[tr], m, rule) for tr, _ in folds]
        for i, a in enumerate(alphas):
            for j, ph in enumerate(phis):
                try:
                    cv[i, j] = _cv_rmse(points, folds, graphs, a, ph, m)
                except NotPositiveDefinite:
                    pass
        i, j = np.unravel_index(np.nanargmin(cv), cv.shape)
    else:
        i, j = 0, 0
    fit = conjugate_fit(points, float(alphas[i]), float(phis[j]), m, config.a0, config.b0, rule, cv)
    res = None
    if test_coords is not None:
        res = conjugate_predict(fit, test_coords)
        res.wall_time = time.perf_counter() - t0
    return fit, res


def conjugate_predict(fit, test_coords):
    """Posterior predictive Student-t: location, scale and 95% t intervals.

    ``se`` is the predictive standard deviation ``scale * sqrt(df / (df - 2))``.
    """
    t0 = time.perf_counter()
    test = np.atleast_2d(np.asarray(test_coords, dtype=float))
    spec = CovarianceSpec(1.0, fit.phi, fit.alpha)
    mean, v = _local_kriging(fit.train, spec, test, fit.m, fit.beta, fit.V)
    scale = np.sqrt(np.maximum(v, 0.0) * fit.b_post / fit.a_post)
    df = fit.df
    q = float(student_t.ppf(0.975, df))
    se = scale * math.sqrt(df / (df - 2.0)) if df > 2 else np.full_like(scale, np.inf)
    return PredictionResult(mean, se, mean - q * scale, mean + q * scale, method="nngp-conjugate",
                            wall_time=time.perf_counter() - t0,
                            info={"alpha": fit.alpha, "phi": fit.phi, "df": df})
