"""Competition scores: MAE, RMSE, CRPS, interval score and coverage."""

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import norm

from .errors import InvalidInterval, LengthMismatch

# Phi^{-1}(0.975) to 7 significant digits
Z975_7 = 1.959964

SCORE_COLUMNS = ("MAE", "RMSE", "CRPS", "INT", "CVG")


def _pair(a, b):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise LengthMismatch("empty input")
    return a, b


def mae(truth, pred):
    y, yhat = _pair(truth, pred)
    return float(np.mean(np.abs(y - yhat)))


def rmse(truth, pred):
    y, yhat = _pair(truth, pred)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def crps_gaussian(y, mu, sigma):
    """CRPS of a normal predictive distribution, elementwise.

    Degenerates to ``|y - mu|`` where ``sigma == 0``.
    """
    y, mu, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y, mu, sigma)))
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    shape = y.shape
    y, mu, sigma = (np.atleast_1d(v) for v in (y, mu, sigma))
    out = np.abs(y - mu).astype(float)
    pos = sigma > 0
    if np.any(pos):
        s = sigma[pos]
        z = (y[pos] - mu[pos]) / s
        out[pos] = s * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / math.sqrt(math.pi))
    return out.reshape(shape) if shape else float(out[0])


def interval_score(lower, upper, y, alpha=0.05):
    """Interval score of central ``(1 - alpha)`` intervals, elementwise."""
    lower, upper, y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lower, upper, y)))
    if np.any(lower > upper):
        raise InvalidInterval("lower bound exceeds upper bound")
    out = (upper - lower) + (2 / alpha) * (lower - y) * (y < lower) + (2 / alpha) * (y - upper) * (y > upper)
    return out if out.ndim else float(out)


def coverage(lower, upper, y):
    """Fraction of intervals containing the truth, endpoints inclusive."""
    lower, upper = _pair(lower, upper)
    y, _ = _pair(y, lower)
    return float(np.mean((lower <= y) & (y <= upper)))


def se_from_interval(lower, upper):
    """Standard error implied by a 95% Gaussian interval."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(upper < lower):
        raise InvalidInterval("upper bound below lower bound")
    out = (upper - lower) / (2 * Z975_7)
    return out if out.ndim else float(out)


@dataclass
class ScoreReport:
    method: str
    MAE: float = math.nan
    RMSE: float = math.nan
    CRPS: float = math.nan
    INT: float = math.nan
    CVG: float = math.nan
    run_time_min: float = math.nan
    cores: int = 1
    status: str = "OK"
    n_test: int = 0

    def as_dict(self):
        return asdict(self)


def score(truth, result, method=None):
    """Score a prediction result against held-out truth.

    The standard error used for CRPS falls back to the interval rule when a
    method reports intervals only (``se`` NaN).
    """
    y, mean = _pair(truth, result.mean)
    lower, upper = _pair(result.lower, result.upper)
    se = np.asarray(result.se, dtype=float)
    missing = ~np.isfinite(se)
    if np.any(missing):
        se = se.copy()
        se[missing] = se_from_interval(lower[missing], upper[missing])
    return ScoreReport(
        method=method or result.method,
        MAE=mae(y, mean),
        RMSE=rmse(y, mean),
        CRPS=float(np.mean(crps_gaussian(y, mean, se))),
        INT=float(np.mean(interval_score(lower, upper, y))),
        CVG=coverage(lower, upper, y),
        run_time_min=result.wall_time / 60.0,
        cores=result.cores,
        n_test=y.size,
    )
