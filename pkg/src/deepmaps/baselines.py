"""Comparison methods: inverse distance weighting, ordinary kriging, KNN regression."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .core import DeepMapsError, InputError

SNAP_KM = 1e-9
MIN_VARIOGRAM_SOURCES = 10
N_LAG_BINS = 12


class SingularSystemError(DeepMapsError):
    pass


def _split_sources(sources):
    """``[((east, north), value), ...]`` or ``(locations (n, 2), values (n,))``."""
    if isinstance(sources, tuple) and len(sources) == 2 and np.ndim(sources[0]) == 2:
        locs, vals = sources
    else:
        sources = list(sources)
        locs = [s[0] for s in sources]
        vals = [s[1] for s in sources]
    locs = np.asarray(locs, dtype=float).reshape(-1, 2)
    vals = np.asarray(vals, dtype=float).reshape(-1)
    return locs, vals


def idw_predict(locations: np.ndarray, values: np.ndarray, queries: np.ndarray, power: float = 2.0) -> np.ndarray:
    """IDW at many query points; a query within 1e-9 km of a source takes its value."""
    if len(values) == 0:
        raise InputError("IDW needs at least one source")
    if not power > 0:
        raise InputError("IDW power must be > 0")
    queries = np.asarray(queries, dtype=float).reshape(-1, 2)
    d = np.hypot(queries[:, None, 0] - locations[None, :, 0], queries[:, None, 1] - locations[None, :, 1])
    snap = d < SNAP_KM
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(snap, 0.0, d ** -power)
        out = (w @ values) / w.sum(axis=1)
    hit = snap.any(axis=1)
    if hit.any():
        out[hit] = values[np.argmax(snap[hit], axis=1)]
    return out


def idw_interpolate(sources, query, power: float = 2.0) -> float:
    """``sum(w_i v_i) / sum(w_i)`` with ``w_i = d_i ** -power``."""
    locs, vals = _split_sources(sources)
    return float(idw_predict(locs, vals, np.asarray(query, dtype=float)[None, :], power)[0])


@dataclass(frozen=True)
class VariogramModel:
    """Exponential semivariogram ``nugget + sill * (1 - exp(-3 h / range))``."""

    nugget: float
    sill: float
    range_km: float

    def __post_init__(self):
        if self.nugget < 0 or self.sill < 0 or not self.range_km > 0:
            raise InputError("variogram needs nugget >= 0, partial sill >= 0, range > 0")

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        return self.nugget + self.sill * (1.0 - np.exp(-3.0 * h / self.range_km))


def empirical_variogram(locations: np.ndarray, values: np.ndarray, n_bins: int = N_LAG_BINS):
    """Matheron estimator on equal-width lag bins up to half the largest separation.

    Returns ``(lag_centres, gamma, pair_counts)`` for non-empty bins.
    """
    i, j = np.triu_indices(len(values), k=1)
    h = np.hypot(*(locations[i] - locations[j]).T)
    sq = (values[i] - values[j]) ** 2
    max_lag = 0.5 * h.max()
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    which = np.clip(np.searchsorted(edges, h, side="right") - 1, 0, n_bins - 1)
    use = (h > 0) & (h <= max_lag)
    counts = np.bincount(which[use], minlength=n_bins)
    sums = np.bincount(which[use], weights=sq[use], minlength=n_bins)
    hsum = np.bincount(which[use], weights=h[use], minlength=n_bins)
    nz = counts > 0
    return hsum[nz] / counts[nz], sums[nz] / (2.0 * counts[nz]), counts[nz]


def fit_variogram(sources, n_bins: int = N_LAG_BINS) -> VariogramModel:
    """Exponential model fitted to the empirical variogram by pair-count weighted least squares."""
    locs, vals = _split_sources(sources)
    if len(vals) < MIN_VARIOGRAM_SOURCES:
        raise InputError(f"variogram fit needs >= {MIN_VARIOGRAM_SOURCES} sources, got {len(vals)}")
    if len(np.unique(locs, axis=0)) < 2:
        raise InputError("variogram fit needs >= 2 distinct locations")
    span = float(np.hypot(*(locs.max(axis=0) - locs.min(axis=0))))
    if np.ptp(vals) == 0:
        return VariogramModel(0.0, 0.0, max(span, 1e-6))
    lags, gamma, counts = empirical_variogram(locs, vals, n_bins)
    sw = np.sqrt(counts / counts.sum())

    def resid(p):
        nugget, sill, rng_km = p
        return sw * (nugget + sill * (1.0 - np.exp(-3.0 * lags / rng_km)) - gamma)

    g_max = float(gamma.max())
    x0 = [0.1 * g_max, 0.9 * g_max, max(lags.max() / 2, 1e-3)]
    upper = [g_max * 10 + 1e-12, g_max * 10 + 1e-12, span * 10]
    fitted = least_squares(resid, x0, bounds=([0.0, 0.0, 1e-6], upper), method="trf")
    nugget, sill, rng_km = (float(v) for v in fitted.x)
    return VariogramModel(nugget, sill, rng_km)


def average_duplicates(locations: np.ndarray, values: np.ndarray):
    uniq, inverse = np.unique(locations, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.bincount(inverse, weights=values, minlength=len(uniq))
    counts = np.bincount(inverse, minlength=len(uniq))
    return uniq, sums / counts


def kriging_weights(locations: np.ndarray, model: VariogramModel, queries: np.ndarray):
    """Ordinary-kriging weights ``(n_query, n_source)`` and Lagrange multipliers.

    Coincident points have zero semivariance, so zero-nugget kriging is exact
    at the sources.
    """
    n = len(locations)
    if n == 0:
        raise InputError("kriging needs at least one source")
    d = np.hypot(*(locations[:, None, :] - locations[None, :, :]).transpose(2, 0, 1))
    a = np.ones((n + 1, n + 1))
    a[:n, :n] = np.where(d > 0, model(d), 0.0)
    a[n, n] = 0.0
    queries = np.asarray(queries, dtype=float).reshape(-1, 2)
    dq = np.hypot(queries[:, None, 0] - locations[None, :, 0], queries[:, None, 1] - locations[None, :, 1])
    b = np.ones((n + 1, len(queries)))
    b[:n] = np.where(dq > SNAP_KM, model(dq), 0.0).T
    if model.sill == 0 and model.nugget == 0:
        # flat variogram: every source is equally informative
        return np.full((len(queries), n), 1.0 / n), np.zeros(len(queries))
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("singular ordinary-kriging system") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularSystemError("singular ordinary-kriging system")
    return sol[:n].T, sol[n]


def kriging_predict(sources, model: VariogramModel, query) -> float:
    locs, vals = _split_sources(sources)
    locs, vals = average_duplicates(locs, vals)
    w, _ = kriging_weights(locs, model, np.asarray(query, dtype=float)[None, :])
    return float(w[0] @ vals)


def kriging_predict_many(locations, values, model: VariogramModel, queries) -> np.ndarray:
    locs, vals = average_duplicates(np.asarray(locations, dtype=float), np.asarray(values, dtype=float))
    w, _ = kriging_weights(locs, model, queries)
    return w @ vals


def standardize(train: np.ndarray, *others):
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std == 0] = 1.0
    return [(a - mean) / std for a in (train,) + others]


def knn_predict(train_X, train_y, query_X, k: int = 10, chunk: int = 1024) -> np.ndarray:
    """Mean response of the ``k`` nearest training rows (z-scored Euclidean).

    Distance ties at the k-th neighbour resolve to the earlier training row.
    """
    train_X = np.asarray(getattr(train_X, "values", train_X), dtype=float)
    query_X = np.asarray(getattr(query_X, "values", query_X), dtype=float)
    train_y = np.asarray(train_y, dtype=float)
    if len(train_X) == 0:
        raise InputError("KNN needs training rows")
    if k < 1:
        raise InputError("k must be >= 1")
    if train_X.shape[1] != query_X.shape[1]:
        raise InputError("query and training columns differ")
    if k > len(train_X):
        warnings.warn(f"k={k} exceeds {len(train_X)} training rows; clamped")
        k = len(train_X)
    tr, q = standardize(train_X, query_X)
    tr_sq = np.sum(tr ** 2, axis=1)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        qc = q[s:s + chunk]
        d2 = np.sum(qc ** 2, axis=1)[:, None] + tr_sq[None, :] - 2.0 * qc @ tr.T
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[s:s + chunk] = train_y[nearest].mean(axis=1)
    return out


def interpolate_by_hour(method: str, train_xy, train_t, train_v, query_xy, query_t,
                        power: float = 2.0, fallback: float = None) -> np.ndarray:
    """Per-hour spatial interpolation from that hour's training values.

    Kriging hours with fewer than the variogram minimum fall back to IDW;
    hours without any training value get ``fallback`` (default: training mean).
    """
    if method not in ("idw", "kriging"):
        raise InputError(f"unknown spatial method {method!r}")
    fallback = float(np.mean(train_v)) if fallback is None else fallback
    out = np.full(len(query_t), fallback)
    for hour in np.unique(query_t):
        q = query_t == hour
        s = train_t == hour
        if not s.any():
            continue
        locs, vals = train_xy[s], train_v[s]
        if method == "kriging" and len(np.unique(locs, axis=0)) >= MIN_VARIOGRAM_SOURCES:
            try:
                model = fit_variogram((locs, vals))
                out[q] = kriging_predict_many(locs, vals, model, query_xy[q])
                continue
            except SingularSystemError:
                pass
        out[q] = idw_predict(locs, vals, query_xy[q], power)
    return out
