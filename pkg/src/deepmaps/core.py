"""Grid geometry, time indexing and the shared domain types."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

EARTH_RADIUS_KM = 6371.0088
KM_PER_DEG = math.pi * EARTH_RADIUS_KM / 180.0

FIXED = "fixed"
MOBILE = "mobile"
MOBILE_CALIBRATED = "mobile_calibrated"


class DeepMapsError(Exception):
    """Base class for pipeline errors."""


class InputError(DeepMapsError, ValueError):
    pass


class SchemaError(DeepMapsError, ValueError):
    pass


class ConfigurationError(DeepMapsError, ValueError):
    pass


class ShapeError(DeepMapsError, ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Study raster: ``width`` cells east, ``height`` cells north of the origin.

    The origin is the south-west corner of cell (0, 0). ``start_time`` is in
    epoch hours (UTC).
    """

    origin_lat: float
    origin_lon: float
    cell_size_km: float = 1.0
    width: int = 55
    height: int = 55
    start_time: int = 0
    num_hours: int = 672

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("grid width and height must be >= 1")
        if not self.cell_size_km > 0:
            raise ConfigurationError("cell_size_km must be > 0")
        if self.num_hours < 1:
            raise ConfigurationError("num_hours must be >= 1")
        if not (math.isfinite(self.origin_lat) and math.isfinite(self.origin_lon)):
            raise ConfigurationError("grid origin must be finite")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def mean_lat(self) -> float:
        return self.origin_lat + 0.5 * self.height * self.cell_size_km / KM_PER_DEG

    @property
    def km_per_deg_lon(self) -> float:
        return KM_PER_DEG * math.cos(math.radians(self.mean_lat))

    def to_km(self, lat, lon):
        """Equirectangular (east, north) offsets in km from the origin."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        return (lon - self.origin_lon) * self.km_per_deg_lon, (lat - self.origin_lat) * KM_PER_DEG

    def to_latlon(self, east_km, north_km):
        east_km = np.asarray(east_km, dtype=float)
        north_km = np.asarray(north_km, dtype=float)
        return self.origin_lat + north_km / KM_PER_DEG, self.origin_lon + east_km / self.km_per_deg_lon

    def cell_center(self, x: int, y: int) -> tuple[float, float]:
        lat, lon = self.to_latlon((x + 0.5) * self.cell_size_km, (y + 0.5) * self.cell_size_km)
        return float(lat), float(lon)

    def cell_center_km(self, x, y):
        return (np.asarray(x) + 0.5) * self.cell_size_km, (np.asarray(y) + 0.5) * self.cell_size_km

    @property
    def centroid_km(self) -> tuple[float, float]:
        return 0.5 * self.width * self.cell_size_km, 0.5 * self.height * self.cell_size_km

    def all_cells(self):
        """Cell coordinates in row order (y-major, then x)."""
        yy, xx = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return xx.ravel(), yy.ravel()


@dataclass(frozen=True, order=True)
class CellIndex:
    x: int
    y: int


@dataclass(frozen=True)
class Observation:
    source: str
    sensor_id: str
    lat: float
    lon: float
    timestamp: float
    pm25: float
    temp: Optional[float] = None
    rh: Optional[float] = None

    def __post_init__(self):
        if self.source not in (FIXED, MOBILE):
            raise InputError(f"unknown observation source {self.source!r}")
        if not self.pm25 >= 0:
            raise InputError(f"pm25 must be >= 0, got {self.pm25}")
        if self.rh is not None and not 0 <= self.rh <= 100:
            raise InputError(f"rh must be in [0, 100], got {self.rh}")


@dataclass(frozen=True)
class Label:
    cell: CellIndex
    t: int
    pm25: float
    source: str = FIXED

    def __post_init__(self):
        if not self.pm25 >= 0:
            raise InputError(f"label pm25 must be >= 0, got {self.pm25}")
        if self.source not in (FIXED, MOBILE_CALIBRATED):
            raise InputError(f"unknown label source {self.source!r}")

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.cell.x, self.cell.y, self.t)


@dataclass(frozen=True)
class LabelSet:
    """Column-oriented collection of labels, unique on (x, y, t)."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    pm25: np.ndarray
    is_fixed: np.ndarray

    def __post_init__(self):
        n = len(self.x)
        for name in ("y", "t", "pm25", "is_fixed"):
            if len(getattr(self, name)) != n:
                raise ShapeError("label columns must have equal length")
        if n and np.any(self.pm25 < 0):
            raise InputError("label pm25 must be >= 0")
        keys = self.keys()
        if len(set(keys)) != n:
            raise InputError("duplicate (cell, t) keys in label set")

    @classmethod
    def from_labels(cls, labels: Iterable[Label]) -> "LabelSet":
        labels = list(labels)
        return cls(
            x=np.array([lb.cell.x for lb in labels], dtype=np.int64),
            y=np.array([lb.cell.y for lb in labels], dtype=np.int64),
            t=np.array([lb.t for lb in labels], dtype=np.int64),
            pm25=np.array([lb.pm25 for lb in labels], dtype=float),
            is_fixed=np.array([lb.source == FIXED for lb in labels], dtype=bool),
        )

    @classmethod
    def empty(cls) -> "LabelSet":
        return cls.from_labels([])

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self) -> Iterator[Label]:
        for i in range(len(self)):
            yield Label(
                CellIndex(int(self.x[i]), int(self.y[i])),
                int(self.t[i]),
                float(self.pm25[i]),
                FIXED if self.is_fixed[i] else MOBILE_CALIBRATED,
            )

    def keys(self) -> list[tuple[int, int, int]]:
        return list(zip(self.x.tolist(), self.y.tolist(), self.t.tolist()))

    def subset(self, index) -> "LabelSet":
        return LabelSet(self.x[index], self.y[index], self.t[index], self.pm25[index], self.is_fixed[index])

    def sorted(self) -> "LabelSet":
        """Labels ordered t-major, then y, then x."""
        return self.subset(np.lexsort((self.x, self.y, self.t)))


@dataclass
class GridFrame:
    """One hour of concentrations; arrays are indexed ``[x, y]``."""

    t: int
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ShapeError("frame values and mask differ in shape")
        if np.any(self.values[self.mask] < 0):
            raise InputError("valid frame values must be >= 0")


def grid_index(lat: float, lon: float, spec: GridSpec) -> Optional[CellIndex]:
    """Cell containing the point, or ``None`` when it falls outside the raster."""
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise InputError(f"non-finite coordinates ({lat}, {lon})")
    east, north = spec.to_km(lat, lon)
    # guard against 0.9999999 cell offsets produced by the round trip
    x = math.floor(float(east) / spec.cell_size_km + 1e-9)
    y = math.floor(float(north) / spec.cell_size_km + 1e-9)
    if 0 <= x < spec.width and 0 <= y < spec.height:
        return CellIndex(x, y)
    return None


def grid_index_array(lat, lon, spec: GridSpec):
    """Vectorised :func:`grid_index`; returns ``(x, y, inside)``."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise InputError("non-finite coordinates")
    east, north = spec.to_km(lat, lon)
    x = np.floor(east / spec.cell_size_km + 1e-9).astype(np.int64)
    y = np.floor(north / spec.cell_size_km + 1e-9).astype(np.int64)
    inside = (x >= 0) & (x < spec.width) & (y >= 0) & (y < spec.height)
    return x, y, inside


def hour_index(timestamp: float, spec: GridSpec) -> Optional[int]:
    """Study hour containing ``timestamp`` (epoch seconds), ``None`` if outside."""
    t = math.floor((timestamp - spec.start_time * 3600) / 3600)
    if 0 <= t < spec.num_hours:
        return t
    return None


def hour_of_day(t, spec: GridSpec):
    return (np.asarray(t) + spec.start_time) % 24
