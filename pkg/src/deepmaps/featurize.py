"""Local, neighbouring and macro feature extraction.

Neighbouring features come from randomised mean filters: every channel of a
filter is ``w / k**2`` over its ``k x k`` window with ``w ~ N(0, 1)``. Filters
are applied as stride-1 cross-correlation with zero padding (so the raster
shape is preserved), followed by a rectifier.

Arrays are indexed ``[x, y, channel]`` (``[t, x, y, channel]`` for hourly data).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ConfigurationError, GridSpec, InputError, LabelSet, ShapeError
from .ingest import StationMeta

FAMILY_SIZES = {"A": 3, "B": 5, "C": 1, "D": 3, "E": 5}
STATIC_FAMILIES = ("A", "B")
DYNAMIC_FAMILIES = ("C", "D", "E")
DEFAULT_BASE_SHIFTS = (1, 2, 3, 6)
MAX_SHIFT = 12
MAX_GAP_FILL = 3

GROUPS = ("L", "N", "M")
SELECTION_NAMES = {
    frozenset("L"): "L",
    frozenset("LM"): "L+M",
    frozenset("N"): "N",
    frozenset("NM"): "N+M",
    frozenset("LMN"): "L+M+N",
    frozenset("LN"): "L+N",
    frozenset("M"): "M",
}


def parse_selection(selection) -> frozenset:
    """``"L+M+N"``, ``"LMN"`` or an iterable of group letters."""
    if isinstance(selection, str):
        letters = [c for c in selection.upper() if c not in "+, "]
    else:
        letters = [str(c).upper() for c in selection]
    sel = frozenset(letters)
    if not sel:
        raise ConfigurationError("empty feature selection")
    bad = sel - set(GROUPS)
    if bad:
        raise ConfigurationError(f"unknown feature groups {sorted(bad)}")
    return sel


def selection_name(selection) -> str:
    sel = parse_selection(selection)
    return SELECTION_NAMES.get(sel, "+".join(g for g in "LMN" if g in sel))


@dataclass(frozen=True)
class StaticVolume:
    data: np.ndarray
    names: list
    categories: list

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] < 1:
            raise ShapeError("static volume must be (width, height, n_static) with n_static >= 1")
        if len(self.names) != self.data.shape[2] or len(self.categories) != self.data.shape[2]:
            raise ShapeError("static channel names/categories do not match depth")
        if not np.all(np.isfinite(self.data)):
            raise InputError("static volume has non-finite entries")

    @property
    def depth(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class DynamicVolume:
    """Hourly dynamic channels ``(num_hours, width, height, n_dynamic)``.

    :meth:`at` stacks hour ``t`` with hour ``t - 1`` (hour 0 repeats itself).
    """

    data: np.ndarray
    names: list
    categories: list

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[3] < 1:
            raise ShapeError("dynamic volume must be (hours, width, height, n_dynamic)")
        if len(self.names) != self.data.shape[3] or len(self.categories) != self.data.shape[3]:
            raise ShapeError("dynamic channel names/categories do not match depth")

    @property
    def depth(self) -> int:
        return self.data.shape[3]

    @property
    def num_hours(self) -> int:
        return self.data.shape[0]

    def at(self, t: int) -> np.ndarray:
        prev = max(t - 1, 0)
        return np.concatenate([self.data[t], self.data[prev]], axis=-1)

    def stacked(self) -> np.ndarray:
        """All hours at once, ``(num_hours, width, height, 2 * n_dynamic)``."""
        prev = np.concatenate([self.data[:1], self.data[:-1]], axis=0)
        return np.concatenate([self.data, prev], axis=-1)

    def concat(self, other: "DynamicVolume") -> "DynamicVolume":
        return DynamicVolume(np.concatenate([self.data, other.data], axis=-1),
                             list(self.names) + list(other.names),
                             list(self.categories) + list(other.categories))


@dataclass(frozen=True)
class FilterBank:
    family: str
    weights: np.ndarray
    seed: int

    @property
    def size(self) -> int:
        return FAMILY_SIZES[self.family]

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    def kernels(self) -> np.ndarray:
        """Explicit filters, ``(count, k, k, channels)``."""
        k = self.size
        return np.broadcast_to(self.weights[:, None, None, :] / (k * k),
                               (self.count, k, k, self.channels)).copy()


def build_filter_bank(family: str, count: int, channels: int, seed: int) -> FilterBank:
    """Seeded standard-normal weights drawn filter-major, channel-minor."""
    if family not in FAMILY_SIZES:
        raise ConfigurationError(f"unknown filter family {family!r}")
    if count < 1 or channels < 1:
        raise ConfigurationError("filter count and channels must be >= 1")
    rng = np.random.default_rng(seed)
    return FilterBank(family, rng.standard_normal((count, channels)), seed)


def box_sum(images: np.ndarray, k: int, axes=(0, 1)) -> np.ndarray:
    """Centred ``k x k`` window sums with zero padding, via an integral image."""
    if k == 1:
        return images.copy()
    r = k // 2
    ax0, ax1 = axes
    pad = [(0, 0)] * images.ndim
    pad[ax0] = (r + 1, r)
    pad[ax1] = (r + 1, r)
    padded = np.pad(images, pad)
    integral = padded.cumsum(axis=ax0).cumsum(axis=ax1)
    n0, n1 = images.shape[ax0], images.shape[ax1]

    def window(lo0, lo1):
        sl = [slice(None)] * images.ndim
        sl[ax0] = slice(lo0, lo0 + n0)
        sl[ax1] = slice(lo1, lo1 + n1)
        return integral[tuple(sl)]

    return window(k, k) - window(0, k) - window(k, 0) + window(0, 0)


def convolve(volume: np.ndarray, bank: FilterBank, spatial_axes=(0, 1)) -> np.ndarray:
    """Rectified response of ``volume`` (channels last) to every filter in ``bank``.

    A mean filter is separable from its channel weights, so channels are
    mixed first and a single box sum follows.
    """
    if volume.shape[-1] != bank.channels:
        raise ShapeError(f"volume depth {volume.shape[-1]} != filter depth {bank.channels}")
    mixed = volume @ bank.weights.T
    k = bank.size
    return np.maximum(box_sum(mixed, k, spatial_axes) / (k * k), 0.0)


def convolve_static(volume: StaticVolume, bank_a: FilterBank, bank_b: FilterBank) -> np.ndarray:
    """Static neighbouring map ``(width, height, 2L)``: A responses then B responses."""
    return np.concatenate([convolve(volume.data, bank_a), convolve(volume.data, bank_b)], axis=-1)


def convolve_dynamic(volume_t: np.ndarray, bank_c: FilterBank, bank_d: FilterBank,
                     bank_e: FilterBank) -> np.ndarray:
    """Dynamic neighbouring map for one hour ``(width, height, 3M)``, order C, D, E.

    ``volume_t`` is the ``(width, height, 2 * n_dynamic)`` stack from
    :meth:`DynamicVolume.at`; a ``(hours, width, height, 2 * n_dynamic)`` stack
    is handled hour-wise.
    """
    axes = (0, 1) if volume_t.ndim == 3 else (1, 2)
    return np.concatenate([convolve(volume_t, b, axes) for b in (bank_c, bank_d, bank_e)], axis=-1)


@dataclass(frozen=True)
class FeatureMaps:
    static: np.ndarray
    dynamic: np.ndarray
    static_names: list
    dynamic_names: list


def build_feature_maps(static: StaticVolume, dynamic: DynamicVolume, n_static_filters: int = 8,
                       n_dynamic_filters: int = 8, seed: int = 0) -> FeatureMaps:
    """Draw the five filter banks from ``seed`` and convolve both volumes.

    Bank ``j`` (A, B, C, D, E in order) uses seed ``seed * 5 + j``.
    """
    banks = {}
    for j, fam in enumerate(STATIC_FAMILIES + DYNAMIC_FAMILIES):
        count = n_static_filters if fam in STATIC_FAMILIES else n_dynamic_filters
        channels = static.depth if fam in STATIC_FAMILIES else 2 * dynamic.depth
        banks[fam] = build_filter_bank(fam, count, channels, seed * 5 + j)
    w_static = convolve_static(static, banks["A"], banks["B"])
    w_dynamic = convolve_dynamic(dynamic.stacked(), banks["C"], banks["D"], banks["E"])
    static_names = [f"nbr_{f}{i}" for f in STATIC_FAMILIES for i in range(n_static_filters)]
    dynamic_names = [f"nbr_{f}{i}" for f in DYNAMIC_FAMILIES for i in range(n_dynamic_filters)]
    return FeatureMaps(w_static, w_dynamic, static_names, dynamic_names)


# -- macro features ---------------------------------------------------------


@dataclass(frozen=True)
class MacroStation:
    station_id: str
    distance_km: float
    bearing_deg: float
    shift: int


@dataclass(frozen=True)
class MacroConfig:
    stations: tuple
    base_shifts: tuple = DEFAULT_BASE_SHIFTS

    def __post_init__(self):
        if any(s < 1 for s in self.base_shifts) or any(st.shift < 1 for st in self.stations):
            raise ConfigurationError("macro time shifts must be >= 1 hour")

    def shifts(self, station: MacroStation) -> list[int]:
        return sorted(set(self.base_shifts) | {station.shift})

    def columns(self) -> list[str]:
        return [f"macro_{st.station_id}_{s}" for st in self.stations for s in self.shifts(st)]

    @property
    def max_shift(self) -> int:
        return max(max(self.shifts(st)) for st in self.stations) if self.stations else 0


def transport_shift(distance_km: float, mean_wind_kmh: float, max_shift: int = MAX_SHIFT) -> int:
    """Travel time in whole hours, ``clamp(round(d / v), 1, max_shift)`` (halves round up)."""
    if mean_wind_kmh <= 0:
        return max_shift
    return int(min(max(math.floor(distance_km / mean_wind_kmh + 0.5), 1), max_shift))


def derive_macro_config(meta: Sequence[StationMeta], spec: GridSpec, mean_wind_kmh: float,
                        base_shifts: Iterable[int] = DEFAULT_BASE_SHIFTS) -> MacroConfig:
    """Macro stations (those outside the study area) with distance, bearing and shift."""
    ce, cn = spec.centroid_km
    stations = []
    for m in meta:
        if m.inside_study_area:
            continue
        east, north = spec.to_km(m.lat, m.lon)
        de, dn = float(east) - ce, float(north) - cn
        dist = math.hypot(de, dn)
        bearing = math.degrees(math.atan2(de, dn)) % 360.0
        stations.append(MacroStation(m.station_id, dist, bearing, transport_shift(dist, mean_wind_kmh)))
    return MacroConfig(tuple(stations), tuple(sorted(set(base_shifts))))


@dataclass(frozen=True)
class MacroSeries:
    """Hourly PM2.5 per macro station; column ``j`` is study hour ``first_hour + j``."""

    station_ids: list
    first_hour: int
    values: np.ndarray

    def value(self, station_index: int, hour) -> np.ndarray:
        j = np.asarray(hour) - self.first_hour
        out = np.full(np.shape(j), np.nan)
        ok = (j >= 0) & (j < self.values.shape[1])
        out[ok] = self.values[station_index, j[ok]]
        return out


def forward_fill(series: np.ndarray, max_gap: int = MAX_GAP_FILL) -> np.ndarray:
    """Carry the last value forward into at most ``max_gap`` hours of each NaN run."""
    out = series.copy()
    for row in out:
        last = np.nan
        since = 0
        for j, v in enumerate(row):
            if np.isnan(v):
                since += 1
                if since <= max_gap:
                    row[j] = last
            else:
                last, since = v, 0
    return out


def macro_series_from_observations(observations, spec: GridSpec, station_ids: Sequence[str],
                                   lead_hours: int = MAX_SHIFT, max_gap: int = MAX_GAP_FILL) -> MacroSeries:
    """Hourly means per station over ``[-lead_hours, num_hours)``, gap-filled."""
    index = {sid: i for i, sid in enumerate(station_ids)}
    n_hours = spec.num_hours + lead_hours
    sums = np.zeros((len(station_ids), n_hours))
    counts = np.zeros((len(station_ids), n_hours))
    for obs in observations:
        i = index.get(obs.sensor_id)
        if i is None:
            continue
        j = math.floor((obs.timestamp - spec.start_time * 3600) / 3600) + lead_hours
        if 0 <= j < n_hours:
            sums[i, j] += obs.pm25
            counts[i, j] += 1
    with np.errstate(invalid="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return MacroSeries(list(station_ids), -lead_hours, forward_fill(values, max_gap))


@dataclass(frozen=True)
class MacroFeatures:
    series: MacroSeries
    config: MacroConfig

    def __post_init__(self):
        missing = [st.station_id for st in self.config.stations if st.station_id not in self.series.station_ids]
        if missing:
            raise ConfigurationError(f"macro series missing stations {missing}")

    def columns(self) -> list[str]:
        return self.config.columns()

    def block(self, hours) -> np.ndarray:
        """Macro values ``(len(hours), n_columns)``; NaN where a shift is unavailable."""
        hours = np.asarray(hours)
        cols = []
        for st in self.config.stations:
            i = self.series.station_ids.index(st.station_id)
            for s in self.config.shifts(st):
                cols.append(self.series.value(i, hours - s))
        return np.stack(cols, axis=1) if cols else np.zeros((len(hours), 0))


def macro_feature_rows(series: MacroSeries, config: MacroConfig, t: int) -> Optional[dict]:
    """Macro column values at hour ``t`` (shared by every cell), or ``None`` if masked."""
    values = MacroFeatures(series, config).block([t])[0]
    if np.isnan(values).any():
        return None
    return dict(zip(config.columns(), values.tolist()))


# -- feature matrix ---------------------------------------------------------


@dataclass
class FeatureMatrix:
    """Sample rows keyed by (x, y, t) with named, tagged columns."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    values: np.ndarray
    columns: list
    groups: list
    categories: list
    response: Optional[np.ndarray] = None
    dropped: int = 0

    def __post_init__(self):
        if len(set(self.columns)) != len(self.columns):
            raise ShapeError("duplicate feature column names")
        if self.values.shape != (len(self.x), len(self.columns)):
            raise ShapeError("feature values do not match keys/columns")

    def __len__(self) -> int:
        return len(self.x)

    def keys(self):
        return list(zip(self.x.tolist(), self.y.tolist(), self.t.tolist()))

    def take(self, index) -> "FeatureMatrix":
        resp = None if self.response is None else self.response[index]
        return FeatureMatrix(self.x[index], self.y[index], self.t[index], self.values[index],
                             self.columns, self.groups, self.categories, resp)

    def select_groups(self, selection) -> "FeatureMatrix":
        sel = parse_selection(selection)
        keep = [i for i, g in enumerate(self.groups) if g in sel]
        return FeatureMatrix(self.x, self.y, self.t, self.values[:, keep],
                             [self.columns[i] for i in keep], [self.groups[i] for i in keep],
                             [self.categories[i] for i in keep], self.response, self.dropped)

    def column_categories(self) -> dict:
        return dict(zip(self.columns, self.categories))

    def to_csv(self, path, meta_path=None, header: str = "") -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write(header)
            cols = ["x", "y", "t"] + list(self.columns) + (["pm25"] if self.response is not None else [])
            fh.write(",".join(cols) + "\n")
            for i in range(len(self)):
                row = [str(int(self.x[i])), str(int(self.y[i])), str(int(self.t[i]))]
                row += [repr(float(v)) for v in self.values[i]]
                if self.response is not None:
                    row.append(repr(float(self.response[i])))
                fh.write(",".join(row) + "\n")
        meta_path = Path(meta_path) if meta_path else path.with_suffix(".meta.json")
        meta = {c: {"group": g, "category": k} for c, g, k in zip(self.columns, self.groups, self.categories)}
        meta_path.write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def _row_keys(rows):
    if isinstance(rows, LabelSet):
        return rows.x, rows.y, rows.t, rows.pm25
    x, y, t = (np.asarray(a, dtype=np.int64) for a in rows[:3])
    resp = np.asarray(rows[3], dtype=float) if len(rows) > 3 and rows[3] is not None else None
    return x, y, t, resp


def assemble_matrix(rows, static: Optional[StaticVolume], dynamic: Optional[DynamicVolume],
                    maps: Optional[FeatureMaps], macro: Optional[MacroFeatures], selection) -> FeatureMatrix:
    """Feature rows for labels (a :class:`LabelSet`) or ``(x, y, t[, response])`` arrays.

    Rows are ordered t-major, then y, then x. Rows whose macro shifts are
    unavailable are dropped and counted in ``dropped``.
    """
    sel = parse_selection(selection)
    if "L" in sel and (static is None or dynamic is None):
        raise ConfigurationError("local features need static and dynamic volumes")
    if "N" in sel and maps is None:
        raise ConfigurationError("neighbouring features need filter maps")
    if "M" in sel and macro is None:
        raise ConfigurationError("macro features need macro series")
    x, y, t, resp = _row_keys(rows)
    order = np.lexsort((x, y, t))
    x, y, t = x[order], y[order], t[order]
    if resp is not None:
        resp = resp[order]

    blocks, columns, groups, categories = [], [], [], []
    if "L" in sel:
        blocks += [static.data[x, y], dynamic.data[t, x, y]]
        columns += list(static.names) + list(dynamic.names)
        categories += list(static.categories) + list(dynamic.categories)
        groups += ["L"] * (static.depth + dynamic.depth)
    if "N" in sel:
        blocks += [maps.static[x, y], maps.dynamic[t, x, y]]
        columns += list(maps.static_names) + list(maps.dynamic_names)
        n = len(maps.static_names) + len(maps.dynamic_names)
        groups += ["N"] * n
        categories += ["neighboring"] * n
    if "M" in sel:
        blocks.append(macro.block(t))
        cols = macro.columns()
        columns += cols
        groups += ["M"] * len(cols)
        categories += ["macro"] * len(cols)
    values = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(x), 0))
    ok = ~np.isnan(values).any(axis=1)
    dropped = int((~ok).sum())
    if dropped:
        x, y, t, values = x[ok], y[ok], t[ok], values[ok]
        resp = None if resp is None else resp[ok]
    return FeatureMatrix(x, y, t, values, columns, groups, categories, resp, dropped)


@dataclass
class FeatureContext:
    """Everything needed to featurise any (cell, hour) of one study."""

    spec: GridSpec
    static: StaticVolume
    dynamic: DynamicVolume
    maps: Optional[FeatureMaps] = None
    macro: Optional[MacroFeatures] = None
    extra: dict = field(default_factory=dict)

    def assemble(self, rows, selection) -> FeatureMatrix:
        return assemble_matrix(rows, self.static, self.dynamic, self.maps, self.macro, selection)

    def full_selection(self) -> str:
        groups = "L"
        if self.maps is not None:
            groups += "N"
        if self.macro is not None:
            groups += "M"
        return selection_name(groups)
