"""Readers for sensor, meteorology and urban-feature files, plus grid snapping.

All CSV readers skip leading ``#`` comment lines (artifact provenance) and
require a header row.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    FIXED,
    MOBILE,
    CellIndex,
    GridSpec,
    InputError,
    Label,
    Observation,
    SchemaError,
    grid_index,
    grid_index_array,
    hour_index,
)

log = logging.getLogger(__name__)

FIXED_COLUMNS = ("station_id", "lat", "lon", "timestamp", "pm25")
MOBILE_COLUMNS = ("vehicle_id", "lat", "lon", "timestamp", "pm25", "temp", "rh")
METEO_COLUMNS = (
    "station_id", "lat", "lon", "timestamp",
    "temp", "pressure", "vapor_pressure", "rh", "wind_speed", "wind_dir",
)
METEO_VARIABLES = ("temperature", "pressure", "vapor_pressure", "rel_humidity", "wind_speed", "wind_dir")
STATIC_COLUMNS = ("x", "y", "feature_name", "value")
DYNAMIC_COLUMNS = ("x", "y", "t", "feature_name", "value")
STATION_COLUMNS = ("station_id", "lat", "lon", "inside_study_area")

MAX_MALFORMED_FRACTION = 0.10
HAMPEL_K = 3.0
MAD_SCALE = 1.4826
HAMPEL_MIN_GROUP = 5
IDW_SNAP_KM = 1e-9

KNOWN_CATEGORIES = ("geography", "transport", "vitality", "meteorology")


@dataclass(frozen=True)
class StationMeta:
    station_id: str
    lat: float
    lon: float
    inside_study_area: bool


@dataclass(frozen=True)
class MobileAggregate:
    cell: CellIndex
    t: int
    pm25_median: float
    temp_mean: float
    rh_mean: float
    sample_count: int

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.cell.x, self.cell.y, self.t)


@dataclass
class LoadReport:
    """Row accounting for one file: ``parsed + skipped == total``."""

    path: str
    total: int = 0
    parsed: int = 0
    malformed: int = 0
    dropped: int = 0

    @property
    def skipped(self) -> int:
        return self.malformed + self.dropped

    def __str__(self):
        return (f"{self.path}: total={self.total} parsed={self.parsed} "
                f"malformed={self.malformed} dropped={self.dropped}")


@dataclass
class MeteoField:
    """Gridded hourly meteorology; arrays are ``(num_hours, width, height)``.

    ``valid[v, t]`` is False where variable ``v`` had no reporting station at hour ``t``.
    """

    temperature: np.ndarray
    pressure: np.ndarray
    vapor_pressure: np.ndarray
    rel_humidity: np.ndarray
    wind_speed: np.ndarray
    wind_dir: np.ndarray
    valid: np.ndarray = field(default=None)

    def channels(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in METEO_VARIABLES}

    @property
    def hour_valid(self) -> np.ndarray:
        return self.valid.all(axis=0)


@dataclass
class MeteoStations:
    """Per-station hourly series; ``values[var]`` is ``(n_stations, num_hours)`` with NaN gaps."""

    station_ids: list[str]
    east_km: np.ndarray
    north_km: np.ndarray
    values: dict[str, np.ndarray]


def _read_rows(path, required: Sequence[str]):
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    with handle:
        lines = (line for line in handle if not line.startswith("#"))
        reader = csv.DictReader(lines)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: missing header row")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        yield from reader


def parse_timestamp(text: str) -> float:
    """Epoch seconds from an epoch number or an ISO-8601 string (naive means UTC)."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    stamp = datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def _finite(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {text!r}")
    return value


def _optional(text: Optional[str]) -> Optional[float]:
    if text is None or text.strip() == "" or text.strip().lower() == "nan":
        return None
    return _finite(text)


def _check_malformed(report: LoadReport):
    if report.total and report.malformed / report.total > MAX_MALFORMED_FRACTION:
        raise SchemaError(
            f"{report.path}: {report.malformed} of {report.total} rows malformed "
            f"(limit {MAX_MALFORMED_FRACTION:.0%})"
        )
    if report.malformed or report.dropped:
        log.info("%s", report)


def load_station_meta(path) -> list[StationMeta]:
    stations = []
    seen = set()
    for row in _read_rows(path, STATION_COLUMNS):
        sid = row["station_id"].strip()
        if sid in seen:
            raise SchemaError(f"{path}: duplicate station id {sid!r}")
        seen.add(sid)
        flag = row["inside_study_area"].strip().lower() in ("1", "true", "yes")
        stations.append(StationMeta(sid, _finite(row["lat"]), _finite(row["lon"]), flag))
    return stations


def load_fixed_observations(path, spec: GridSpec, meta: Sequence[StationMeta]):
    """Fixed-station readings as ``(observations, report)``.

    Rows from stations outside the raster are kept only when the station is
    flagged as outside the study area (they feed macro features); other
    out-of-raster or unknown-station rows are dropped.
    """
    by_id = {m.station_id: m for m in meta}
    report = LoadReport(str(path))
    observations = []
    for row in _read_rows(path, FIXED_COLUMNS):
        report.total += 1
        try:
            sid = row["station_id"].strip()
            obs = Observation(
                FIXED, sid, _finite(row["lat"]), _finite(row["lon"]),
                parse_timestamp(row["timestamp"]), _finite(row["pm25"]),
            )
        except (ValueError, TypeError, AttributeError):
            report.malformed += 1
            continue
        station = by_id.get(sid)
        inside = grid_index(obs.lat, obs.lon, spec) is not None
        if station is None or not (inside or not station.inside_study_area):
            report.dropped += 1
            continue
        observations.append(obs)
        report.parsed += 1
    _check_malformed(report)
    return observations, report


def load_mobile_points(path, spec: GridSpec):
    """Mobile GPS readings snapped to the raster, as ``(observations, report)``.

    Points outside the raster or the study window are dropped and counted.
    """
    report = LoadReport(str(path))
    observations = []
    for row in _read_rows(path, MOBILE_COLUMNS):
        report.total += 1
        try:
            obs = Observation(
                MOBILE, row["vehicle_id"].strip(), _finite(row["lat"]), _finite(row["lon"]),
                parse_timestamp(row["timestamp"]), _finite(row["pm25"]),
                _optional(row.get("temp")), _optional(row.get("rh")),
            )
        except (ValueError, TypeError, AttributeError):
            report.malformed += 1
            continue
        if grid_index(obs.lat, obs.lon, spec) is None or hour_index(obs.timestamp, spec) is None:
            report.dropped += 1
            continue
        observations.append(obs)
        report.parsed += 1
    _check_malformed(report)
    return observations, report


def _hampel_keep(values: np.ndarray) -> np.ndarray:
    if len(values) < HAMPEL_MIN_GROUP:
        return np.ones(len(values), dtype=bool)
    med = np.median(values)
    mad = np.median(np.abs(values - med))
    return np.abs(values - med) <= HAMPEL_K * MAD_SCALE * mad


def aggregate_mobile(points: Sequence[Observation], spec: GridSpec) -> list[MobileAggregate]:
    """Per grid-hour Hampel filtering followed by the median of the survivors.

    Output is ordered t-major, then y, then x.
    """
    if not points:
        return []
    lat = np.array([p.lat for p in points])
    lon = np.array([p.lon for p in points])
    x, y, inside = grid_index_array(lat, lon, spec)
    ts = np.array([p.timestamp for p in points])
    t = np.floor((ts - spec.start_time * 3600) / 3600).astype(np.int64)
    if not inside.all() or np.any((t < 0) | (t >= spec.num_hours)):
        raise InputError("aggregate_mobile expects in-bounds, in-window points")
    pm = np.array([p.pm25 for p in points])
    temp = np.array([np.nan if p.temp is None else p.temp for p in points])
    rh = np.array([np.nan if p.rh is None else p.rh for p in points])

    order = np.lexsort((x, y, t))
    key = (t[order] * spec.height + y[order]) * spec.width + x[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    ends = np.r_[starts[1:], len(key)]
    out = []
    for s, e in zip(starts, ends):
        idx = order[s:e]
        keep = _hampel_keep(pm[idx])
        if not keep.any():
            continue
        idx = idx[keep]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            temp_mean = float(np.nanmean(temp[idx]))
            rh_mean = float(np.nanmean(rh[idx]))
        out.append(MobileAggregate(
            CellIndex(int(x[idx[0]]), int(y[idx[0]])), int(t[idx[0]]),
            float(np.median(pm[idx])), temp_mean, rh_mean, int(len(idx)),
        ))
    return out


def fixed_labels(observations: Iterable[Observation], spec: GridSpec) -> list[Label]:
    """Grid-hour labels from in-raster fixed readings (mean when a cell-hour has several)."""
    groups = defaultdict(list)
    for obs in observations:
        cell = grid_index(obs.lat, obs.lon, spec)
        t = hour_index(obs.timestamp, spec)
        if cell is None or t is None:
            continue
        groups[(t, cell.y, cell.x)].append(obs.pm25)
    return [
        Label(CellIndex(x, y), t, float(np.mean(v)), FIXED)
        for (t, y, x), v in sorted(groups.items())
    ]


def load_meteo_stations(path, spec: GridSpec) -> tuple[MeteoStations, LoadReport]:
    report = LoadReport(str(path))
    rows = {}
    positions = {}
    for row in _read_rows(path, METEO_COLUMNS):
        report.total += 1
        try:
            sid = row["station_id"].strip()
            lat, lon = _finite(row["lat"]), _finite(row["lon"])
            t = hour_index(parse_timestamp(row["timestamp"]), spec)
            vals = [_optional(row[c]) for c in METEO_COLUMNS[4:]]
        except (ValueError, TypeError, AttributeError):
            report.malformed += 1
            continue
        rh, wdir = vals[3], vals[5]
        if (rh is not None and not 0 <= rh <= 100) or (wdir is not None and not 0 <= wdir <= 360):
            report.malformed += 1
            continue
        if t is None:
            report.dropped += 1
            continue
        positions.setdefault(sid, (lat, lon))
        rows[(sid, t)] = vals
        report.parsed += 1
    _check_malformed(report)
    ids = sorted(positions)
    index = {sid: i for i, sid in enumerate(ids)}
    values = {v: np.full((len(ids), spec.num_hours), np.nan) for v in METEO_VARIABLES}
    for (sid, t), vals in rows.items():
        for name, v in zip(METEO_VARIABLES, vals):
            if v is not None:
                values[name][index[sid], t] = v
    lat = np.array([positions[s][0] for s in ids])
    lon = np.array([positions[s][1] for s in ids])
    east, north = spec.to_km(lat, lon)
    return MeteoStations(ids, np.atleast_1d(east), np.atleast_1d(north), values), report


def idw_weights(src_east, src_north, q_east, q_north, power: float = 2.0) -> np.ndarray:
    """Row-normalised IDW weights ``(n_query, n_source)`` with exact snapping."""
    d = np.hypot(q_east[:, None] - src_east[None, :], q_north[:, None] - src_north[None, :])
    snap = d < IDW_SNAP_KM
    with np.errstate(divide="ignore"):
        w = np.where(snap, 0.0, d ** -power)
    hit = snap.any(axis=1)
    w[hit] = snap[hit].astype(float)
    return w / w.sum(axis=1, keepdims=True)


def grid_meteorology(stations: MeteoStations, spec: GridSpec, power: float = 2.0) -> MeteoField:
    """IDW-gridded meteorology at cell centres, one field per hour and variable.

    Wind direction is averaged as unit vectors. Hours where a variable has no
    reporting station are marked invalid and filled with zeros.
    """
    xs, ys = np.meshgrid(np.arange(spec.width), np.arange(spec.height), indexing="ij")
    qe, qn = spec.cell_center_km(xs.ravel(), ys.ravel())
    shape = (spec.num_hours, spec.width, spec.height)
    out = {name: np.zeros(shape) for name in METEO_VARIABLES}
    valid = np.zeros((len(METEO_VARIABLES), spec.num_hours), dtype=bool)
    cache = {}
    for vi, name in enumerate(METEO_VARIABLES):
        series = stations.values[name]
        for t in range(spec.num_hours):
            ok = np.isfinite(series[:, t])
            if not ok.any():
                continue
            valid[vi, t] = True
            sig = ok.tobytes()
            if sig not in cache:
                cache[sig] = idw_weights(stations.east_km[ok], stations.north_km[ok], qe, qn, power)
            w = cache[sig]
            vals = series[ok, t]
            if name == "wind_dir":
                rad = np.radians(vals)
                ang = np.degrees(np.arctan2(w @ np.sin(rad), w @ np.cos(rad)))
                # sin/cos round-off can leave a tiny negative angle
                ang = np.where(np.abs(ang) < 1e-9, 0.0, ang) % 360.0
                field_t = np.where(ang >= 360.0, 0.0, ang)
            else:
                field_t = w @ vals
            out[name][t] = field_t.reshape(spec.width, spec.height)
    missing = np.flatnonzero(~valid.all(axis=0))
    if len(missing):
        warnings.warn(f"{len(missing)} hour(s) lack meteorology for some variable; masked")
    return MeteoField(**out, valid=valid)


def _category(name: str, categories: Optional[dict]) -> str:
    if categories and name in categories:
        return categories[name]
    prefix = name.split("_", 1)[0]
    return prefix if prefix in KNOWN_CATEGORIES else "other"


def load_static_features(path, spec: GridSpec, categories: Optional[dict] = None):
    """Static-feature CSV as ``(array (width, height, n), names, categories)``.

    Channels keep first-appearance order; every cell must be present.
    """
    names: dict[str, int] = {}
    cells = []
    for row in _read_rows(path, STATIC_COLUMNS):
        try:
            x, y = int(row["x"]), int(row["y"])
            value = _finite(row["value"])
        except (ValueError, TypeError) as exc:
            raise SchemaError(f"{path}: bad row {row}") from exc
        name = row["feature_name"].strip()
        names.setdefault(name, len(names))
        cells.append((x, y, names[name], value))
    data = np.full((spec.width, spec.height, len(names)), np.nan)
    for x, y, c, v in cells:
        if not (0 <= x < spec.width and 0 <= y < spec.height):
            raise SchemaError(f"{path}: cell ({x}, {y}) outside grid")
        data[x, y, c] = v
    if np.isnan(data).any():
        raise SchemaError(f"{path}: missing cell-feature values")
    ordered = list(names)
    return data, ordered, [_category(n, categories) for n in ordered]


def load_dynamic_features(path, spec: GridSpec, categories: Optional[dict] = None):
    """Dynamic-feature CSV as ``(array (num_hours, width, height, n), names, categories)``."""
    names: dict[str, int] = {}
    cols = {"x": [], "y": [], "t": [], "c": [], "v": []}
    for row in _read_rows(path, DYNAMIC_COLUMNS):
        name = row["feature_name"]
        c = names.setdefault(name, len(names))
        try:
            cols["x"].append(int(row["x"]))
            cols["y"].append(int(row["y"]))
            cols["t"].append(int(row["t"]))
            cols["v"].append(float(row["value"]))
        except (ValueError, TypeError) as exc:
            raise SchemaError(f"{path}: bad row {row}") from exc
        cols["c"].append(c)
    x, y, t, c = (np.asarray(cols[k], dtype=np.int64) for k in "xytc")
    v = np.asarray(cols["v"], dtype=float)
    if len(x) and (x.min() < 0 or x.max() >= spec.width or y.min() < 0 or y.max() >= spec.height
                   or t.min() < 0 or t.max() >= spec.num_hours):
        raise SchemaError(f"{path}: rows outside grid or study window")
    data = np.full((spec.num_hours, spec.width, spec.height, len(names)), np.nan)
    data[t, x, y, c] = v
    if np.isnan(data).any():
        raise SchemaError(f"{path}: missing cell-hour-feature values")
    ordered = list(names)
    return data, ordered, [_category(n, categories) for n in ordered]
