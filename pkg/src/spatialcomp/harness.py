"""Competition driver: data files, train/test splits, the method registry,
sequential timed runs, scoring and exported artifacts."""

import copy
import csv
import json
import math
import os
import time
import traceback
import warnings
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import EmptyTest, EmptyTrain, GeometryMismatch, NonConvergence, ParseError
from .gpcore import (STUDY_LAT_RANGE, STUDY_LON_RANGE, CovarianceSpec, GridGeometry, PredictionResult,
                     SpatialDataset, TrendSpec, default_init, fit_ml, krige, simulate_gp)
from .scoring import ScoreReport, score

SCORE_COLUMNS = ["method", "MAE", "RMSE", "CRPS", "INT", "CVG", "status"]
TIMING_COLUMNS = ["method", "run_time_min", "cores"]

DEFAULT_CONFIG = {
    "seed": 20160804,
    "workers": 1,
    "simulate": {"n_rows": 60, "n_cols": 100, "lon_range": list(STUDY_LON_RANGE), "lat_range": list(STUDY_LAT_RANGE),
                 "sill": 9.0, "range": 0.5, "nugget": 0.25, "trend": 44.0},
    "split": {"cloud": {"n_disks": 6, "radius": [3, 12], "random_fraction": 0.01, "min_test_fraction": 0.35}},
    "methods": {"exact-gp": {}},
}


# ---------------------------------------------------------------------------
# files


def _fmt(x):
    return "NA" if not np.isfinite(x) else repr(float(x))


def save_dataset(dataset, path):
    """CSV ``lon,lat,value`` (NA when missing), row-major north to south,
    preceded by a ``# grid`` line recording the geometry."""
    g = dataset.geometry
    c = g.coords()
    with open(path, "w", newline="") as fh:
        fh.write(f"# grid {g.n_rows} {g.n_cols} {float(g.lon_range[0])!r} {float(g.lon_range[1])!r} "
                 f"{float(g.lat_range[0])!r} {float(g.lat_range[1])!r}\n")
        fh.write("lon,lat,value\n")
        for (lon, lat), v in zip(c, dataset.values):
            fh.write(f"{float(lon)!r},{float(lat)!r},{_fmt(v)}\n")


def _read_rows(path):
    header, rows, lines = None, [], []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                if header is None and not rows:
                    header = (lineno, s)
                continue
            rows.append(s)
            lines.append(lineno)
    if not rows or [x.strip().lower() for x in rows[0].split(",")] != ["lon", "lat", "value"]:
        raise ParseError("expected header lon,lat,value", line=lines[0] if lines else 1)
    out = np.empty((len(rows) - 1, 3))
    for k, (row, lineno) in enumerate(zip(csv.reader(rows[1:]), lines[1:])):
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, found {len(row)}", line=lineno)
        try:
            out[k, 0] = float(row[0])
            out[k, 1] = float(row[1])
            out[k, 2] = math.nan if row[2].strip() == "NA" else float(row[2])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if not (np.isfinite(out[k, 0]) and np.isfinite(out[k, 1])):
            raise ParseError("non-finite coordinate", line=lineno)
    return header, out


def _geometry_from_header(header):
    lineno, s = header
    parts = s[1:].split()
    if not parts or parts[0] != "grid":
        return None
    try:
        nr, nc = int(parts[1]), int(parts[2])
        lon0, lon1, lat0, lat1 = map(float, parts[3:7])
    except (IndexError, ValueError):
        raise ParseError("malformed grid header", line=lineno) from None
    return GridGeometry(nr, nc, (lon0, lon1), (lat0, lat1))


def load_dataset(path, trend=None, expected=None):
    """Read a gridded CSV.  The geometry comes from the ``# grid`` header when
    present (checked against the rows) or is inferred from the coordinates.
    ``expected`` optionally pins the geometry."""
    header, arr = _read_rows(path)
    geom = _geometry_from_header(header) if header else None
    lons, lats = np.unique(arr[:, 0]), np.unique(arr[:, 1])
    if geom is None:
        geom = GridGeometry(len(lats), len(lons), (float(lons[0]), float(lons[-1])),
                            (float(lats[0]), float(lats[-1])))
    if expected is not None and (expected.shape != geom.shape or
                                 not np.allclose([*expected.lon_range, *expected.lat_range],
                                                 [*geom.lon_range, *geom.lat_range], atol=1e-6)):
        raise GeometryMismatch(f"file geometry {geom} differs from expected {expected}")
    if len(arr) != geom.n_cells:
        raise GeometryMismatch(f"{len(arr)} rows for a {geom.n_rows}x{geom.n_cols} grid")
    dlon, dlat = geom.spacing
    tol = 1e-6 * max(dlon, dlat, 1e-12)
    c = geom.coords()
    bad = np.flatnonzero(np.abs(arr[:, :2] - c).max(axis=1) > max(tol, 1e-9))
    if len(bad):
        raise GeometryMismatch(f"row {bad[0] + 1} is not at grid cell {tuple(c[bad[0]])} "
                               "(rows must be row-major, north to south)")
    mask = np.isfinite(arr[:, 2])
    return SpatialDataset(geom, arr[:, 2], mask, trend or TrendSpec())


def save_points_csv(path, coords, columns):
    names = ["lon", "lat"] + list(columns)
    cols = [np.asarray(v, dtype=float) for v in columns.values()]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for i, (lon, lat) in enumerate(coords):
            fh.write(",".join([repr(float(lon)), repr(float(lat))] + [_fmt(c[i]) for c in cols]) + "\n")


def read_points_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        names = next(r)
        rows = [[math.nan if x == "NA" else float(x) for x in row] for row in r]
    arr = np.array(rows, dtype=float).reshape(-1, len(names))
    return {n: arr[:, k] for k, n in enumerate(names)}


# ---------------------------------------------------------------------------
# simulation and splits


def simulate_dataset(cfg, seed):
    g = GridGeometry(int(cfg["n_rows"]), int(cfg["n_cols"]), tuple(cfg.get("lon_range", STUDY_LON_RANGE)),
                     tuple(cfg.get("lat_range", STUDY_LAT_RANGE)))
    spec = CovarianceSpec(float(cfg["sill"]), float(cfg["range"]), float(cfg["nugget"]))
    trend = TrendSpec("constant", (float(cfg.get("trend", 0.0)),))
    d = simulate_gp(g, spec, trend, seed=seed)
    return SpatialDataset(g, d.values, d.mask, TrendSpec(cfg.get("trend_kind", "constant")))


def cloud_mask(geometry, seed, n_disks=6, radius=(3, 12), random_fraction=0.01, min_test_fraction=0.0):
    """Held-out cells: a union of random disks (radii in cells) plus a
    uniform random scatter; further disks are added until at least
    ``min_test_fraction`` of the grid is covered."""
    rng = np.random.default_rng([seed, 7])
    nr, nc = geometry.shape
    rr, cc = np.divmod(np.arange(nr * nc), nc)
    mask = rng.uniform(size=nr * nc) < random_fraction
    k = 0
    while k < n_disks or mask.mean() < min_test_fraction:
        r0, c0 = rng.uniform(0, nr), rng.uniform(0, nc)
        rad = rng.uniform(*radius)
        mask |= (rr - r0) ** 2 + (cc - c0) ** 2 <= rad ** 2
        k += 1
        if k > 10000:
            break
    return mask


@dataclass
class Split:
    train: SpatialDataset
    test_index: np.ndarray  # flat cell indices
    truth: np.ndarray  # held-out values, never passed to methods

    @property
    def test_coords(self):
        return self.train.geometry.coords()[self.test_index]


def load_mask(path, geometry):
    d = load_dataset(path, expected=geometry)
    return np.where(d.mask, d.values, 0.0) != 0


def make_split(dataset, source, seed=0):
    """``source`` is ``{"mask": path-or-bool-array}`` or ``{"cloud": {...}}``."""
    if "mask" in source:
        m = source["mask"]
        test_mask = load_mask(m, dataset.geometry) if isinstance(m, (str, os.PathLike)) else np.asarray(m, bool)
    elif "cloud" in source:
        c = source["cloud"]
        test_mask = cloud_mask(dataset.geometry, c.get("seed", seed), int(c.get("n_disks", 6)),
                               tuple(c.get("radius", (3, 12))), float(c.get("random_fraction", 0.01)),
                               float(c.get("min_test_fraction", 0.0)))
    else:
        raise ValueError("split source needs 'mask' or 'cloud'")
    test = dataset.mask & test_mask.ravel()
    train = dataset.mask & ~test_mask.ravel()
    if not test.any():
        raise EmptyTest("no observed cell falls in the test mask")
    if not train.any():
        raise EmptyTrain("no observed cell left for training")
    idx = np.flatnonzero(test)
    truth = dataset.values[idx].copy()
    return Split(dataset.with_mask(train), idx, truth)


# ---------------------------------------------------------------------------
# methods


@dataclass
class Context:
    seed: int
    workers: int


def _fit_subsample(train, params, seed):
    """ML covariance fit on a random subsample (dense likelihood cost)."""
    pts = train.points()
    n = min(int(params.get("fit_n", 2000)), len(pts))
    idx = np.sort(np.random.default_rng([seed, 11]).choice(len(pts), n, replace=False))
    sub = pts.subset(idx)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit_ml(sub, default_init(sub), maxfev=int(params.get("maxfev", 2000))).spec


def run_exact(train, test, p, ctx):
    spec = _fit_subsample(train, p, ctx.seed)
    res = krige(train.points(), test, spec, max_exact_n=int(p.get("max_exact_n", 20000)))
    res.info["spec"] = spec
    return res


def run_frk(train, test, p, ctx):
    from .basis import build_basis, frk_fit, lowrank_predict
    basis = None
    if "R" in p or "n_coarse" in p:
        basis = build_basis(train.points().coords, R=int(p.get("R", 3)), family="bisquare",
                            n_coarse=int(p.get("n_coarse", 2)))
    return lowrank_predict(frk_fit(train, basis, maxfev=int(p.get("maxfev", 2000))), test)


def run_lk(train, test, p, ctx):
    from .basis import lk_basis, lk_fit, lowrank_predict
    basis = None
    if "R" in p or "n_coarse" in p:
        basis = lk_basis(train.points().coords, R=int(p.get("R", 3)), n_coarse=int(p.get("n_coarse", 8)))
    return lowrank_predict(lk_fit(train, basis, maxfev=int(p.get("maxfev", 2000))), test)


def run_pp(train, test, p, ctx):
    from .basis import pp_fit_predict
    _, res = pp_fit_predict(train, test, knots=int(p.get("knots", 25)), modified=bool(p.get("modified", True)),
                            maxfev=int(p.get("maxfev", 2000)))
    return res


def run_partition(train, test, p, ctx):
    from .ensemble import partition_fit, partition_predict
    fit = partition_fit(train, target=int(p.get("target", 1000)), workers=ctx.workers)
    return partition_predict(fit, test)


def run_taper(train, test, p, ctx):
    from .taper import default_taper, empirical_cov_gridded, taper_fit, taper_predict, TaperSpec
    try:
        spec = taper_fit(empirical_cov_gridded(train, max_lag=int(p.get("max_lag", 10))))
    except NonConvergence as exc:
        if exc.best is None:
            raise
        warnings.warn(f"taper: {exc}; using the best iterate", RuntimeWarning)
        spec = exc.best
    taper = TaperSpec(float(p["gamma"])) if "gamma" in p else default_taper(train, int(p.get("neighbors", 50)))
    res = taper_predict(train, test, spec, taper)
    res.info["spec"] = spec
    return res


def run_nngp_response(train, test, p, ctx):
    from .vecchia import nngp_predict, nngp_response_fit
    fit = nngp_response_fit(train, m=int(p.get("m", 20)), maxfev=int(p.get("maxfev", 2000)))
    return nngp_predict(fit, test)


def run_nngp_conjugate(train, test, p, ctx):
    from .vecchia import ConjugateConfig, conjugate_nngp
    cfg = ConjugateConfig(seed=ctx.seed, folds=int(p.get("folds", 5)))
    _, res = conjugate_nngp(train, cfg, m=int(p.get("m", 20)), test_coords=test)
    return res


def run_lagp(train, test, p, ctx):
    from .localgp import LaGPParams, lagp_batch
    spec = _fit_subsample(train, p, ctx.seed)
    prm = LaGPParams(spec, m0=int(p.get("m0", 6)), m=int(p.get("m", 50)), pool=int(p.get("pool", 500)),
                     mode=p.get("mode", "local"), workers=ctx.workers)
    return lagp_batch(train, test, prm)


def run_pe(train, test, p, ctx):
    from .spectral import pe_fit_predict
    idx = train.geometry.cell_index(test)
    return pe_fit_predict(train, tau=float(p.get("tau", 1.2)), iterations=int(p.get("iterations", 20)),
                          n_draws=int(p.get("draws", 100)), seed=ctx.seed, bandwidth=int(p.get("bandwidth", 3)),
                          test_index=idx, workers=ctx.workers)


def run_metakriging(train, test, p, ctx):
    from .ensemble import metakriging
    return metakriging(train, test, K=int(p.get("K", 30)), M=int(p.get("M", 1000)),
                       n_probe=int(p.get("probes", 200)), seed=ctx.seed, workers=ctx.workers)


METHODS = {
    "exact-gp": run_exact,
    "frk": run_frk,
    "latticekrig": run_lk,
    "pred-proc": run_pp,
    "partition": run_partition,
    "taper": run_taper,
    "nngp-response": run_nngp_response,
    "nngp-conjugate": run_nngp_conjugate,
    "lagp": run_lagp,
    "periodic-embedding": run_pe,
    "metakriging": run_metakriging,
}


# ---------------------------------------------------------------------------
# configuration and runs


def load_config(path=None, overrides=None):
    """JSON config merged over the defaults (one level deep)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path) as fh:
            user = json.load(fh)
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict) and k not in ("methods", "split"):
                cfg[k].update(v)
            else:
                cfg[k] = v
        if "data" in user:
            cfg.pop("simulate", None)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    validate_config(cfg)
    return cfg


def _method_table(methods):
    if isinstance(methods, (list, tuple)):
        return {m: {} for m in methods}
    return dict(methods)


def validate_config(cfg):
    unknown = [m for m in _method_table(cfg["methods"]) if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    if int(cfg.get("workers", 1)) < 1:
        raise ValueError("workers must be >= 1")
    if "data" not in cfg and "simulate" not in cfg:
        raise ValueError("config needs a 'data' path or a 'simulate' block")


def load_or_simulate(cfg):
    if "data" in cfg:
        return load_dataset(cfg["data"], TrendSpec(cfg.get("trend_kind", "constant")))
    return simulate_dataset(cfg["simulate"], int(cfg["seed"]))


@dataclass
class CompetitionResult:
    reports: list
    predictions: dict
    split: Split
    total_time: float


def run_competition(cfg, dataset=None, split=None):
    """Run each configured method in turn on the same split; failures are
    recorded per method and do not stop the run."""
    t_start = time.perf_counter()
    seed = int(cfg["seed"])
    ctx = Context(seed, int(cfg.get("workers", 1)))
    if split is None:
        dataset = dataset if dataset is not None else load_or_simulate(cfg)
        split = make_split(dataset, cfg["split"], seed)
    test = split.test_coords
    reports, preds = [], {}
    for name, params in _method_table(cfg["methods"]).items():
        t0 = time.perf_counter()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = METHODS[name](split.train, test, params or {}, ctx)
            res.wall_time = time.perf_counter() - t0
            res.cores = ctx.workers
            rep = score(split.truth, res, method=name)
            preds[name] = res
        except Exception as exc:  # isolate method failures
            rep = ScoreReport(name, status="FAILED", run_time_min=(time.perf_counter() - t0) / 60,
                              cores=ctx.workers, n_test=len(test))
            rep.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        reports.append(rep)
    return CompetitionResult(reports, preds, split, time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# export

# value -> gray: 1 + round(254 * (v - lo) / (hi - lo)), clipped to [1, 255],
# with lo/hi the min/max of the training values; 0 marks cells without a value
def gray_levels(values, lo, hi):
    v = np.asarray(values, dtype=float)
    span = hi - lo if hi > lo else 1.0
    g = 1 + np.rint(254 * np.clip((v - lo) / span, 0.0, 1.0))
    g[~np.isfinite(v)] = 0
    return g.astype(np.uint8)


def write_pgm(path, gray):
    gray = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _num(x):
    return "NA" if x is None or not np.isfinite(x) else format(float(x), ".10g")


def write_scores(path, reports):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(SCORE_COLUMNS) + "\n")
        for r in reports:
            fh.write(",".join([r.method] + [_num(getattr(r, c)) for c in SCORE_COLUMNS[1:-1]] + [r.status]) + "\n")


def write_timings(path, reports, total):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TIMING_COLUMNS) + "\n")
        for r in reports:
            fh.write(f"{r.method},{_num(r.run_time_min)},{r.cores}\n")
        fh.write(f"total,{_num(total / 60)},\n")


def export(result, directory, cfg=None):
    """scores.csv, timings.csv, predictions/<method>.csv, surfaces/<method>.pgm
    and manifest.json."""
    os.makedirs(os.path.join(directory, "predictions"), exist_ok=True)
    os.makedirs(os.path.join(directory, "surfaces"), exist_ok=True)
    write_scores(os.path.join(directory, "scores.csv"), result.reports)
    write_timings(os.path.join(directory, "timings.csv"), result.reports, result.total_time)
    split = result.split
    train = split.train
    lo, hi = (float(np.nanmin(train.values)), float(np.nanmax(train.values))) if train.n_observed else (0.0, 1.0)
    files = ["scores.csv", "timings.csv"]
    for name, res in result.predictions.items():
        save_points_csv(os.path.join(directory, "predictions", f"{name}.csv"), split.test_coords,
                        {"mean": res.mean, "se": res.se, "lower": res.lower, "upper": res.upper})
        surface = train.values.copy()
        surface[split.test_index] = res.mean
        write_pgm(os.path.join(directory, "surfaces", f"{name}.pgm"),
                  gray_levels(surface, lo, hi).reshape(train.geometry.shape))
        files += [f"predictions/{name}.csv", f"surfaces/{name}.pgm"]
    manifest = {
        "version": __version__,
        "config": cfg,
        "seed": cfg.get("seed") if cfg else None,
        "n_train": train.n_observed,
        "n_test": int(len(split.test_index)),
        "gray_mapping": {"lo": lo, "hi": hi, "rule": "1 + round(254 * clip((v - lo) / (hi - lo), 0, 1)); 0 = no value"},
        "methods": [{"method": r.method, "status": r.status, "error": getattr(r, "error", None)}
                    for r in result.reports],
        "files": files,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return files


def save_split(split, directory):
    os.makedirs(directory, exist_ok=True)
    save_dataset(split.train, os.path.join(directory, "train.csv"))
    save_points_csv(os.path.join(directory, "truth.csv"), split.test_coords, {"value": split.truth})


def load_split(directory, trend=None):
    train = load_dataset(os.path.join(directory, "train.csv"), trend)
    t = read_points_csv(os.path.join(directory, "truth.csv"))
    idx = train.geometry.cell_index(np.column_stack([t["lon"], t["lat"]]))
    return Split(train, idx, t["value"])


def score_predictions(pred_path, truth_path, method=""):
    p = read_points_csv(pred_path)
    t = read_points_csv(truth_path)
    if not (np.allclose(p["lon"], t["lon"]) and np.allclose(p["lat"], t["lat"])):
        raise ValueError("prediction and truth locations differ")
    res = PredictionResult(p["mean"], p["se"], p["lower"], p["upper"], method=method)
    return score(t["value"], res, method)
