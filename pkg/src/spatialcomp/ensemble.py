"""Divide-based methods: a rectangular partition with block-independent
likelihoods and a shared trend, and metakriging, which combines predictive
distributions from random data subsets through their geometric median."""

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NonConvergence
from .gpcore import (CovarianceSpec, Points, PredictionResult, _state, as_points, default_init, fit_ml,
                     krige_state, nelder_mead, predict_from_state)
from .numerics import dense_cholesky
from .scoring import se_from_interval


def _pool_map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------------------------
# partition


@dataclass
class Partition:
    labels: np.ndarray  # block id per site
    x_edges: np.ndarray  # interior column cuts
    y_edges: list  # interior row cuts, one array per column

    @property
    def D(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def assign(self, coords):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        col = np.searchsorted(self.x_edges, coords[:, 0], side="right")
        out = np.empty(len(coords), dtype=int)
        base = np.cumsum([0] + [len(e) + 1 for e in self.y_edges])
        for c in np.unique(col):
            sel = col == c
            out[sel] = base[c] + np.searchsorted(self.y_edges[c], coords[sel, 1], side="right")
        return out

    def blocks(self):
        return [np.flatnonzero(self.labels == d) for d in range(self.D)]


def _cuts(v, k):
    """Interior cut values splitting ``v`` into ``k`` near-equal groups."""
    if k <= 1:
        return np.zeros(0)
    s = np.sort(v)
    n = len(s)
    out = []
    for q in range(1, k):
        i = int(round(q * n / k))
        i = min(max(i, 1), n - 1)
        out.append(0.5 * (s[i - 1] + s[i]))
    return np.unique(out)


def make_partition(coords, target=2000):
    """Axis-aligned tiles holding about ``target`` sites each: equal-count
    column cuts in longitude, then equal-count row cuts within each column."""
    if target < 50:
        raise ValueError("target block size must be >= 50")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n = len(coords)
    D = max(1, int(round(n / target)))
    w, h = np.ptp(coords, axis=0) + 1e-12
    # tile counts closest to D, then tiles closest to square
    nx, ny = min(((a, max(1, round(D / a))) for a in range(1, D + 1)),
                 key=lambda t: (abs(t[0] * t[1] - D), abs(math.log(w * t[1] / (h * t[0])))))
    xe = _cuts(coords[:, 0], nx)
    col = np.searchsorted(xe, coords[:, 0], side="right")
    ye = [_cuts(coords[col == c, 1], ny) for c in range(len(xe) + 1)]
    p = Partition(np.zeros(n, dtype=int), xe, ye)
    p.labels = p.assign(coords)
    if len(np.unique(p.labels)) != sum(len(e) + 1 for e in ye):
        raise ValueError("empty partition cell")
    return p


@dataclass
class PartitionFit:
    partition: Partition
    specs: list
    beta: np.ndarray
    loglik: float
    history: list
    train: Points
    converged: bool = True


def partition_loglik(points, partition, specs, beta):
    return sum(_state(points.subset(b), s, beta).loglik for b, s in zip(partition.blocks(), specs))


def _shared_beta(points, partition, specs):
    A = 0.0
    r = 0.0
    for b, s in zip(partition.blocks(), specs):
        sub = points.subset(b)
        L = dense_cholesky(s.matrix(sub.coords), check_symmetric=False)
        Xw = solve_triangular(L, sub.X, lower=True)
        A = A + Xw.T @ Xw
        r = r + Xw.T @ solve_triangular(L, sub.values, lower=True)
    return np.linalg.solve(A, r)


def _block_update(args):
    sub, spec, beta, maxfev = args
    x0 = np.log([max(spec.sill, 1e-8), spec.range, max(spec.nugget, 1e-8 * spec.total)])
    x, ll, ok, _ = nelder_mead(lambda x: _state(sub, CovarianceSpec.from_log(x), beta).loglik, x0,
                               fatol=1e-6, maxfev=maxfev)
    return CovarianceSpec.from_log(x), ll


def partition_fit(data, partition=None, target=2000, init=None, sweeps=20, tol=1e-6, maxfev=1000, workers=1):
    """Coordinate ascent: per-block covariance updates given beta, then the
    closed-form shared GLS beta given the block covariances."""
    points = as_points(data)
    partition = partition or make_partition(points.coords, target)
    blocks = partition.blocks()
    if min(len(b) for b in blocks) < 30:
        raise ValueError("each block needs at least 30 sites")
    init = init or default_init(points)
    specs = [init] * len(blocks)
    beta = _shared_beta(points, partition, specs)
    obj = partition_loglik(points, partition, specs, beta)
    history = [obj]
    converged = False
    for _ in range(sweeps):
        res = _pool_map(_block_update, [(points.subset(b), s, beta, maxfev) for b, s in zip(blocks, specs)],
                        workers)
        specs = [r[0] for r in res]
        beta = _shared_beta(points, partition, specs)
        new = partition_loglik(points, partition, specs, beta)
        history.append(new)
        if new - obj < tol * max(1.0, abs(obj)):
            converged = True
            obj = new
            break
        obj = new
    if not converged:
        warnings.warn("partition_fit: sweep budget exhausted", RuntimeWarning)
    return PartitionFit(partition, specs, beta, obj, history, points, converged)


def partition_predict(fit, test_coords):
    """Kriging within the block containing each test point, with the shared beta."""
    t0 = time.perf_counter()
    test_coords = np.atleast_2d(np.asarray(test_coords, dtype=float))
    lab = fit.partition.assign(test_coords)
    mean = np.empty(len(test_coords))
    se = np.empty(len(test_coords))
    for d, b in enumerate(fit.partition.blocks()):
        sel = lab == d
        if not sel.any():
            continue
        sub = fit.train.subset(b)
        st = krige_state(sub, fit.specs[d], fit.beta)
        mean[sel], se[sel] = predict_from_state(sub, fit.specs[d], st, test_coords[sel], known_beta=True)
    return PredictionResult.gaussian(mean, se, method="partition", wall_time=time.perf_counter() - t0,
                                     info={"blocks": lab})


# ---------------------------------------------------------------------------
# metakriging


@dataclass
class SubsetModel:
    points: Points
    spec: CovarianceSpec
    beta: np.ndarray
    V: np.ndarray  # GLS covariance of beta

    @property
    def df(self):
        return len(self.points) - self.points.X.shape[1]

    def predictive(self, test_coords):
        st = krige_state(self.points, self.spec)
        return predict_from_state(self.points, self.spec, st, test_coords)

    def sample(self, test_coords, M, rng):
        mu, se = self.predictive(test_coords)
        t = rng.standard_t(self.df, size=(M, len(mu)))
        return mu + se * t


@dataclass
class SubsetPosteriors:
    models: list
    M: int
    seed: int
    dropped: list = field(default_factory=list)

    @property
    def K(self):
        return len(self.models)


def _fit_subset(args):
    sub, maxfev = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_ml(sub, default_init(sub), maxfev=maxfev)
    if not fit.converged:
        raise NonConvergence("subset fit did not converge", best=fit.spec)
    st = _state(sub, fit.spec)
    return SubsetModel(sub, fit.spec, st.beta, st.beta_cov_unscaled)


def _safe_fit(args):
    try:
        return _fit_subset(args)
    except (NonConvergence, np.linalg.LinAlgError, ValueError) as exc:
        return exc


def subset_fit(data, K=30, M=1000, seed=0, maxfev=2000, workers=1, subsets=None):
    """ML plug-in fits on ``K`` random disjoint subsets (or the given index lists)."""
    points = as_points(data)
    n = len(points)
    if subsets is None:
        if K * 50 > n:
            raise ValueError(f"{K} subsets need at least {50 * K} observations")
        perm = np.random.default_rng(seed).permutation(n)
        subsets = np.array_split(perm, K)
    res = _pool_map(_safe_fit, [(points.subset(np.sort(s)), maxfev) for s in subsets], workers)
    models = [r for r in res if isinstance(r, SubsetModel)]
    dropped = [i for i, r in enumerate(res) if not isinstance(r, SubsetModel)]
    if dropped:
        warnings.warn(f"subset_fit: dropped {len(dropped)} subsets that failed to fit", RuntimeWarning)
    if not models:
        raise NonConvergence("no subset could be fit")
    return SubsetPosteriors(models, M, seed, dropped)


@dataclass
class GMWeights:
    alpha: np.ndarray
    gram: np.ndarray  # mean kernel values between subset predictives
    converged: bool
    iterations: int
    objective: list


def kernel_gram(samples, bandwidth=None):
    """Mean Gaussian-kernel values between sample sets, summed over probe points.

    ``samples`` has shape (K, M, P).  The squared RKHS distance between
    subsets j and k is ``G[j, j] + G[k, k] - 2 G[j, k]`` (V-statistic).
    Bandwidth per probe point defaults to the median pairwise distance.
    """
    K, M, P = samples.shape
    G = np.zeros((K, K))
    for p in range(P):
        z = samples[:, :, p].ravel()
        d2 = (z[:, None] - z[None, :]) ** 2
        bw2 = bandwidth ** 2 if bandwidth else float(np.median(d2[np.triu_indices(len(z), 1)])) or 1.0
        k = np.exp(-d2 / bw2).reshape(K, M, K, M)
        G += k.mean(axis=(1, 3))
    return G


def rkhs_distances(G, alpha):
    """Distances from each subset predictive to the mixture sum_k alpha_k p_k."""
    d2 = np.diag(G) - 2 * G @ alpha + alpha @ G @ alpha
    return np.sqrt(np.maximum(d2, 0.0))


def weiszfeld(G, tol=1e-8, maxiter=500, init=None):
    """Geometric-median weights in the RKHS spanned by the subset predictives."""
    K = G.shape[0]
    if K < 2:
        raise ValueError("need at least two subsets")
    a = np.full(K, 1.0 / K) if init is None else np.asarray(init, dtype=float) / np.sum(init)
    hist = [float(rkhs_distances(G, a).sum())]
    scale = math.sqrt(max(float(np.max(np.diag(G))), 1e-300))
    for it in range(1, maxiter + 1):
        d = np.maximum(rkhs_distances(G, a), 1e-12 * scale)
        new = (1.0 / d) / np.sum(1.0 / d)
        change = np.max(np.abs(new - a))
        a = new
        hist.append(float(rkhs_distances(G, a).sum()))
        if change < tol:
            return GMWeights(a, G, True, it, hist)
    return GMWeights(a, G, False, maxiter, hist)


def weiszfeld_weights(subsets, probe_coords, M=64, seed=0, bandwidth=None):
    """Weights from kernel mean discrepancies of predictive samples at probe points."""
    # common random numbers: identical predictives give identical samples
    S = np.stack([m.sample(probe_coords, M, np.random.default_rng([seed, 2])) for m in subsets.models])
    w = weiszfeld(kernel_gram(S, bandwidth))
    if not w.converged:
        warnings.warn("weiszfeld: iteration limit reached; using last iterate", RuntimeWarning)
    return w


def weighted_quantiles(values, weights, qs):
    """Quantiles of a weighted empirical distribution along axis 0.

    ``values`` is (S, n); ``weights`` has length S and sums to one.
    Returns the smallest value whose cumulative weight reaches each q.
    """
    order = np.argsort(values, axis=0, kind="stable")
    v = np.take_along_axis(values, order, axis=0)
    cw = np.cumsum(np.asarray(weights)[order], axis=0)
    out = []
    for q in qs:
        idx = np.argmax(cw >= q - 1e-12, axis=0)
        out.append(v[idx, np.arange(v.shape[1])])
    return out


def metakrige_predict(subsets, weights, test_coords, chunk=200, seed=None):
    """Median and 2.5/97.5 percentiles of the weighted mixture of subset predictive samples."""
    t0 = time.perf_counter()
    test_coords = np.atleast_2d(np.asarray(test_coords, dtype=float))
    alpha = np.ones(1) if weights is None else np.asarray(getattr(weights, "alpha", weights), dtype=float)
    if len(alpha) != subsets.K or np.any(alpha < 0) or abs(alpha.sum() - 1) > 1e-10:
        raise ValueError("weights must lie on the simplex with one entry per subset")
    M = subsets.M
    w = np.repeat(alpha / M, M)
    rng = np.random.default_rng([subsets.seed if seed is None else seed, 3])
    n = len(test_coords)
    med, lo, hi = np.empty(n), np.empty(n), np.empty(n)
    for s in range(0, n, chunk):
        t = test_coords[s:s + chunk]
        S = np.concatenate([m.sample(t, M, rng) for m in subsets.models], axis=0)
        lo[s:s + chunk], med[s:s + chunk], hi[s:s + chunk] = weighted_quantiles(S, w, (0.025, 0.5, 0.975))
    return PredictionResult(med, se_from_interval(lo, hi), lo, hi, method="metakriging",
                            wall_time=time.perf_counter() - t0, info={"weights": alpha})


def metakriging(data, test_coords, K=30, M=1000, n_probe=200, seed=0, workers=1, M_dist=64):
    """Subset fits, geometric-median weights at a random probe subset of the
    test locations, and mixture predictions."""
    subsets = subset_fit(data, K, M, seed, workers=workers)
    test_coords = np.atleast_2d(np.asarray(test_coords, dtype=float))
    if subsets.K == 1:
        return metakrige_predict(subsets, None, test_coords)
    rng = np.random.default_rng([seed, 4])
    probe = test_coords[rng.choice(len(test_coords), min(n_probe, len(test_coords)), replace=False)]
    w = weiszfeld_weights(subsets, probe, M_dist, seed)
    res = metakrige_predict(subsets, w, test_coords)
    res.info.update(converged=w.converged, dropped=subsets.dropped)
    return res
