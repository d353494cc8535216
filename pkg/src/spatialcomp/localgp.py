"""Local approximate GP prediction: nearest-neighbor subsets and greedy ALC
designs, one independent small kriging problem per test location."""

import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gpcore import CovarianceSpec, Points, PredictionResult, as_points, fit_ml, krige_state, predict_from_state
from .numerics import KdTree


def _uk_predict(points, idx, spec, s):
    sub = points.subset(idx)
    st = krige_state(sub, spec)
    mean, se = predict_from_state(sub, spec, st, np.atleast_2d(s))
    return float(mean[0]), float(se[0] ** 2)


def nn_predict(data, s, m, spec, tree=None):
    """Exact universal kriging on the ``m`` nearest observed sites of ``s``."""
    points = as_points(data)
    tree = tree or KdTree(points.coords)
    return _uk_predict(points, tree.query(s, m), spec, s)


@dataclass
class LocalDesign:
    target: np.ndarray
    design: list
    pool: np.ndarray
    spec: CovarianceSpec
    variances: list = field(default_factory=list)


class _Bordered:
    """Inverse of the bordered kriging matrix [[K, X], [X', 0]] with rank-one growth."""

    def __init__(self, points, idx, spec):
        self.points = points
        self.spec = spec
        c = points.coords[idx]
        X = points.X[idx]
        K = spec.matrix(c)
        p = X.shape[1]
        G = np.block([[K, X], [X.T, np.zeros((p, p))]])
        self.Ginv = np.linalg.inv(G)
        self.idx = list(idx)
        self.p = p

    def vectors(self, cand):
        """Bordered right-hand sides for candidate observations (one column each)."""
        pts = self.points
        k = self.spec.cross(pts.coords[self.idx], pts.coords[cand])
        same = np.asarray(self.idx)[:, None] == np.asarray(cand)[None, :]
        k = k + self.spec.nugget * same
        return np.vstack([k, pts.X[cand].T])

    def target_vector(self, s):
        pts = self.points
        k = self.spec.cross(pts.coords[self.idx], np.atleast_2d(s))[:, 0]
        return np.concatenate([k, pts.trend.design(np.atleast_2d(s))[0]])

    def variance(self, s):
        v = self.target_vector(s)
        return self.spec.total - float(v @ self.Ginv @ v)

    def reductions(self, s, cand):
        """Drop in the prediction variance at ``s`` from adding each candidate."""
        pts = self.points
        vs = self.target_vector(s)
        Vx = self.vectors(cand)
        GVx = self.Ginv @ Vx
        ksx = self.spec.cross(np.atleast_2d(s), pts.coords[cand])[0]
        num = (ksx - vs @ GVx) ** 2
        den = self.spec.total - np.einsum("ij,ij->j", Vx, GVx)
        out = np.zeros(len(cand))
        ok = den > 1e-12 * self.spec.total
        out[ok] = num[ok] / den[ok]
        return out

    def add(self, j):
        v = self.vectors([j])[:, 0]
        g = self.Ginv @ v
        schur = self.spec.total - float(v @ g)
        n = len(self.idx)
        # keep [K; X] block layout: insert the new row/column before the trend block
        big = np.empty((n + 1 + self.p,) * 2)
        old = np.r_[np.arange(n), np.arange(n + 1, n + 1 + self.p)]
        big[np.ix_(old, old)] = self.Ginv + np.outer(g, g) / schur
        big[n, old] = -g / schur
        big[old, n] = -g / schur
        big[n, n] = 1.0 / schur
        self.Ginv = big
        self.idx.append(j)


def alc_score(design, cand, points):
    """Variance reduction at the design target from adding candidate ``cand``."""
    if cand in design.design:
        raise ValueError("candidate already in the design")
    b = _Bordered(points, design.design, design.spec)
    return float(b.reductions(design.target, [cand])[0])


def alc_design(points, s, m0, m, pool, spec, tree=None):
    """Greedy ALC design: the ``m0`` nearest sites, then repeatedly the pool
    candidate with the largest variance reduction at ``s``."""
    tree = tree or KdTree(points.coords)
    pool_idx = tree.query(s, pool)
    design = list(pool_idx[:m0])
    b = _Bordered(points, design, spec)
    d = LocalDesign(np.asarray(s, dtype=float), design, pool_idx, spec, [b.variance(s)])
    remaining = list(pool_idx[m0:])
    for _ in range(m - m0):
        red = b.reductions(s, remaining)
        k = int(np.argmax(red))  # ties go to the nearer candidate
        b.add(remaining.pop(k))
        d.variances.append(b.variance(s))
    d.design = list(b.idx)
    return d


def alc_predict(data, s, m0=6, m=50, pool=500, spec=None, mode="local", tree=None, maxfev=500):
    """Greedy ALC local design followed by exact kriging on it.

    With ``mode="local"`` the covariance is refit by ML on the final design,
    falling back to ``spec`` when the local fit fails or does not converge.
    Returns ``(mean, variance, note)``.
    """
    points = as_points(data)
    n = len(points)
    pool = min(pool, n)
    m = min(m, pool)
    if not m0 <= m <= pool:
        raise ValueError("need m0 <= m <= pool <= N")
    d = alc_design(points, s, m0, m, pool, spec, tree)
    note = None
    use = spec
    if mode == "local":
        sub = points.subset(d.design)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                fit = fit_ml(sub, spec, maxfev=maxfev, fatol=1e-4)
                if fit.converged:
                    use = fit.spec
                else:
                    note = "local fit did not converge"
            except Exception as exc:  # fall back to the global parameters
                note = f"local fit failed: {exc}"
    mean, var = _uk_predict(points, d.design, use, s)
    return mean, var, note


@dataclass
class LaGPParams:
    spec: CovarianceSpec
    m0: int = 6
    m: int = 50
    pool: int = 500
    mode: str = "local"  # local | global | nn
    workers: int = 1
    chunk: int = 64
    maxfev: int = 500


def _run_chunk(args):
    points, tests, params = args
    tree = KdTree(points.coords)
    out = np.empty((len(tests), 2))
    notes = []
    for i, s in enumerate(tests):
        try:
            if params.mode == "nn":
                mu, v = nn_predict(points, s, params.m, params.spec, tree)
                note = None
            else:
                mu, v, note = alc_predict(points, s, params.m0, params.m, params.pool, params.spec,
                                          params.mode, tree, params.maxfev)
        except Exception as exc:
            mu, v, note = np.nan, np.nan, f"prediction failed: {exc}"
        out[i] = mu, v
        if note:
            notes.append((i, note))
    return out, notes


def lagp_batch(data, test_coords, params):
    """Independent local predictions; output order follows ``test_coords``
    regardless of worker count.  Per-point problems are collected in
    ``info["warnings"]``."""
    t0 = time.perf_counter()
    points = as_points(data)
    points = Points(points.coords, points.values, points.trend)
    test = np.atleast_2d(np.asarray(test_coords, dtype=float))
    starts = list(range(0, len(test), params.chunk))
    jobs = [(points, test[s:s + params.chunk], params) for s in starts]
    if params.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(params.workers) as ex:
            results = list(ex.map(_run_chunk, jobs))
    else:
        results = [_run_chunk(j) for j in jobs]
    out = np.vstack([r[0] for r in results]) if results else np.zeros((0, 2))
    notes = [(s + i, msg) for s, r in zip(starts, results) for i, msg in r[1]]
    if notes:
        warnings.warn(f"lagp_batch: {len(notes)} local problems (see info['warnings'])", RuntimeWarning)
    se = np.sqrt(np.maximum(out[:, 1], 0.0))
    return PredictionResult.gaussian(out[:, 0], se, method="lagp", wall_time=time.perf_counter() - t0,
                                     cores=params.workers, info={"warnings": notes})
