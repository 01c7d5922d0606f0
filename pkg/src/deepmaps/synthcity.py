"""Synthetic city: urban features, emissions, pollutant transport and sensor sampling.

The city is a verification oracle. Emissions are driven by a few designated
static channels (so feature importance has a known answer), regional
background enters through the boundaries from external stations (so macro
features carry signal), and mobile sensors read an affine distortion of the
truth (so calibration has an exact target).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import ConfigurationError, GridSpec
from .featurize import DynamicVolume, StaticVolume, transport_shift

EDGES = ("west", "east", "south", "north")
EDGE_BEARING = {"north": 0.0, "east": 90.0, "south": 180.0, "west": 270.0}

# name, category, smoothing (cells), emission driver
STATIC_ROSTER = (
    ("geography_poi_restaurant", "geography", 0.8, True),
    ("transport_road_length", "transport", 1.0, True),
    ("geography_aoi_industry", "geography", 0.7, True),
    ("geography_green_cover", "geography", 3.0, False),
    ("geography_water_cover", "geography", 4.0, False),
    ("geography_elevation", "geography", 6.0, False),
    ("transport_intersections", "transport", 1.5, False),
    ("vitality_weibo_annual", "vitality", 2.0, False),
)
DYNAMIC_ROSTER = (
    ("transport_traffic_heavy", "transport"),
    ("transport_traffic_light", "transport"),
    ("vitality_wechat", "vitality"),
)


@dataclass(frozen=True)
class CityConfig:
    width: int = 32
    height: int = 32
    num_hours: int = 168
    cell_size_km: float = 1.0
    origin_lat: float = 39.70
    origin_lon: float = 116.15
    start_time: int = 424824  # 2018-06-19T00:00Z in epoch hours
    n_static: int = 8
    n_dynamic: int = 3
    n_sources: int = 3
    source_strengths: tuple = (90.0, 70.0, 110.0)
    wind_speed: float = 3.0
    wind_speed_amplitude: float = 1.0
    wind_dir: float = 315.0
    wind_dir_spread: float = 25.0
    diffusion: float = 60.0
    decay_per_hour: float = 0.08
    subgrid_hours: float = 0.3
    inflow_dir: float = 315.0
    inflow_concentration: float = 45.0
    inflow_amplitude: float = 28.0
    inflow_focus: float = 4.0
    n_external: int = 12
    external_distance_km: tuple = (35.0, 65.0)
    lead_hours: int = 12
    spinup_hours: int = 24
    substeps_per_hour: Optional[int] = None
    n_fixed: int = 30
    n_mobile: int = 10
    n_meteo: int = 9
    mobile_samples_per_hour: int = 12
    mobile_move_prob: float = 0.7
    fixed_noise: float = 2.0
    mobile_noise: float = 4.0
    mobile_scale: float = 0.8
    mobile_bias: float = 5.0
    mobile_spike_prob: float = 0.001
    seed: int = 0

    def __post_init__(self):
        physical = ("cell_size_km", "diffusion", "decay_per_hour", "subgrid_hours", "wind_speed",
                    "inflow_concentration", "inflow_amplitude", "fixed_noise", "mobile_noise",
                    "mobile_spike_prob")
        for name in physical:
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.n_sources < 0 or self.n_sources > 3:
            raise ConfigurationError("n_sources must be in [0, 3]")
        if len(self.source_strengths) < self.n_sources or any(s < 0 for s in self.source_strengths):
            raise ConfigurationError("need a non-negative strength per emission source")
        if self.n_static < 3 or self.n_dynamic < 1 or self.n_dynamic > len(DYNAMIC_ROSTER):
            raise ConfigurationError("n_static must be >= 3 and n_dynamic in [1, 3]")
        if self.n_fixed > self.width * self.height or self.n_meteo < 1:
            raise ConfigurationError("sensor counts do not fit the grid")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.origin_lat, self.origin_lon, self.cell_size_km, self.width, self.height,
                        self.start_time, self.num_hours)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CityConfig":
        data = dict(data)
        for key in ("source_strengths", "external_distance_km"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class ExternalStation:
    station_id: str
    bearing_deg: float
    distance_km: float
    lat: float
    lon: float
    shift: int
    series: np.ndarray  # hours [-history, num_hours)


@dataclass
class City:
    config: CityConfig
    static: StaticVolume
    dynamic: DynamicVolume
    meteo: dict  # name -> (num_hours, width, height)
    emissions: np.ndarray  # (history + num_hours, width, height), µg/m³ per hour
    wind_speed: np.ndarray  # (history + num_hours,) m/s
    wind_dir: np.ndarray
    boundary: dict  # edge -> (history + num_hours,)
    external: list
    history: int  # hours simulated before t = 0

    @property
    def grid(self) -> GridSpec:
        return self.config.grid


@dataclass
class TruthField:
    values: np.ndarray  # (hours, width, height)
    clipped_cells: int = 0
    clipped_mass: float = 0.0


def _smooth_field(rng, shape, sigma):
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    f = (f - f.mean()) / (f.std() + 1e-12)
    return f


def _ar1(rng, n, phi):
    out = np.empty(n)
    out[0] = rng.standard_normal()
    eps = rng.standard_normal(n) * math.sqrt(1 - phi * phi)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + eps[i]
    return out


def _diurnal(hours, peak, width=3.0):
    h = np.asarray(hours) % 24
    d = np.minimum(np.abs(h - peak), 24 - np.abs(h - peak))
    return np.exp(-0.5 * (d / width) ** 2)


def wind_components(speed, direction_deg):
    """(east, north) velocity for wind blowing *from* ``direction_deg``."""
    rad = np.radians(direction_deg)
    return -np.asarray(speed) * np.sin(rad), -np.asarray(speed) * np.cos(rad)


def generate_city(config: CityConfig) -> City:
    rng = np.random.default_rng(config.seed)
    w, h = config.width, config.height
    history = config.spinup_hours + config.lead_hours
    hours = np.arange(-history, config.num_hours)
    n_all = len(hours)
    local_hour = (hours + config.start_time) % 24

    # static channels, scaled to [0, 1]
    roster = list(STATIC_ROSTER)
    for i in range(config.n_static - len(roster)):
        roster.append((f"geography_extra_{i}", "geography", 2.0, False))
    roster = roster[:config.n_static]
    static = np.empty((w, h, len(roster)))
    for c, (name, _, sigma, _) in enumerate(roster):
        f = _smooth_field(rng, (w, h), sigma)
        if name == "geography_aoi_industry":
            f = np.maximum(f - 1.0, 0.0)  # sparse hot spots
        else:
            f = 1.0 / (1.0 + np.exp(-1.5 * f))
        static[..., c] = (f - f.min()) / (np.ptp(f) + 1e-12)
    static_vol = StaticVolume(static, [r[0] for r in roster], [r[1] for r in roster])
    restaurant, roads, industry = static[..., 0], static[..., 1], static[..., 2]

    # dynamic channels over the simulated span
    rush = np.clip(_diurnal(local_hour, 8, 2.0) + _diurnal(local_hour, 18, 2.5), 0, 1.2)
    activity = 0.2 + _diurnal(local_hour, 13, 5.0)
    meals = 0.3 + _diurnal(local_hour, 12, 1.5) + _diurnal(local_hour, 19, 1.5)
    jitter = 1.0 + 0.05 * rng.standard_normal((n_all, w, h))
    heavy = rush[:, None, None] * roads[None] * jitter
    light = (1.2 - rush)[:, None, None] * roads[None]
    wechat = activity[:, None, None] * static[..., min(7, static.shape[2] - 1)][None]
    dyn_all = np.stack([heavy, light, wechat], axis=-1)[..., :config.n_dynamic]

    # emissions from the designated sources
    strengths = list(config.source_strengths) + [0.0] * 3
    emissions = np.zeros((n_all, w, h))
    if config.n_sources >= 1:
        emissions += strengths[0] * restaurant[None] * meals[:, None, None] / 2.0
    if config.n_sources >= 2:
        emissions += strengths[1] * heavy
    if config.n_sources >= 3:
        emissions += strengths[2] * industry[None]

    # meteorology
    ws = config.wind_speed + config.wind_speed_amplitude * np.sin(2 * np.pi * (local_hour - 9) / 24)
    ws = np.maximum(ws + 0.3 * _ar1(rng, n_all, 0.8), 0.5)
    wd = (config.wind_dir + config.wind_dir_spread * _ar1(rng, n_all, 0.9)) % 360.0
    xs, ys = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    temp = (26 + 5 * np.sin(2 * np.pi * (local_hour - 9) / 24) + 0.5 * _ar1(rng, n_all, 0.9))[:, None, None] \
        + 0.04 * (xs - w / 2)[None] - 0.03 * (ys - h / 2)[None]
    rh = np.clip(60 - 2.0 * (temp - 26) + 3 * _ar1(rng, n_all, 0.9)[:, None, None], 5, 100)
    vapor = rh / 100 * 6.112 * np.exp(17.67 * temp / (temp + 243.5))
    pressure = (1005 + 2 * _ar1(rng, n_all, 0.95))[:, None, None] + 0.01 * ys[None]
    live = slice(history, None)
    meteo = {
        "temperature": temp[live], "pressure": pressure[live] * np.ones((1, w, h)),
        "vapor_pressure": vapor[live], "rel_humidity": rh[live],
        "wind_speed": np.broadcast_to(ws[live, None, None], (config.num_hours, w, h)).copy(),
        "wind_dir": np.broadcast_to(wd[live, None, None], (config.num_hours, w, h)).copy(),
    }

    # external stations and boundary inflow
    grid = config.grid
    ce, cn = grid.centroid_km
    mean_kmh = float(ws[live].mean()) * 3.6
    external = []
    weights = []
    total_history = history + 12
    for i in range(config.n_external):
        bearing = 360.0 * i / config.n_external
        dist = float(rng.uniform(*config.external_distance_km))
        east = ce + dist * math.sin(math.radians(bearing))
        north = cn + dist * math.cos(math.radians(bearing))
        lat, lon = grid.to_latlon(east, north)
        series = config.inflow_concentration + config.inflow_amplitude * _ar1(rng, total_history + config.num_hours, 0.93)
        series = np.maximum(series, 2.0)
        external.append(ExternalStation(f"X{i:02d}", bearing, dist, float(lat), float(lon),
                                        transport_shift(dist, mean_kmh), series))
        weights.append(math.exp(config.inflow_focus * math.cos(math.radians(bearing - config.inflow_dir))))
    weights = np.array(weights) / np.sum(weights)
    boundary = {}
    for edge in EDGES:
        ew = weights * (1.0 + np.cos(np.radians([s.bearing_deg for s in external]) - math.radians(EDGE_BEARING[edge]))) / 2
        ew = ew / ew.sum() if ew.sum() > 0 else ew
        inflow = np.zeros(n_all)
        for st, wt in zip(external, ew):
            # station series index j corresponds to hour j - total_history
            idx = np.arange(n_all) - history + total_history - st.shift
            inflow += wt * st.series[idx]
        scale = 0.0 if config.inflow_concentration == 0 and config.inflow_amplitude == 0 else 1.0
        boundary[edge] = scale * inflow
    for st in external:
        st.series = st.series[total_history - config.lead_hours:]

    return City(config, static_vol,
                DynamicVolume(dyn_all[live], [d[0] for d in DYNAMIC_ROSTER][:config.n_dynamic],
                              [d[1] for d in DYNAMIC_ROSTER][:config.n_dynamic]),
                meteo, emissions, ws, wd, boundary, external, history)


def stable_substeps(max_speed: float, diffusion: float, dx_m: float) -> int:
    """Fewest sub-steps per hour keeping the explicit scheme positive."""
    rate = 2 * max_speed / dx_m + 4 * diffusion / dx_m ** 2
    return max(1, int(math.ceil(3600.0 * rate)))


def check_stability(u, v, diffusion: float, dx_m: float, dt_s: float) -> None:
    d_num = diffusion * dt_s / dx_m ** 2
    courant = float(np.max(np.maximum(np.abs(u), np.abs(v)))) * dt_s / dx_m if np.size(u) else 0.0
    if d_num > 0.25 + 1e-12:
        raise ConfigurationError(f"diffusion number {d_num:.4f} exceeds 0.25; use more sub-steps")
    if courant > 1.0 + 1e-12:
        raise ConfigurationError(f"Courant number {courant:.4f} exceeds 1; use more sub-steps")


def advect_diffuse_step(c, u, v, diffusion, dx_m, dt_s, source_per_s=0.0, decay_per_s=0.0,
                        boundary=None):
    """One explicit flux-form step: first-order upwind advection plus 5-point diffusion.

    ``boundary`` maps edge name to the inflow concentration; ``None`` closes
    every edge (zero flux). Open edges use the boundary value as ghost cell.
    """
    w, h = c.shape
    fx = np.zeros((w + 1, h))
    fy = np.zeros((w, h + 1))
    # interior faces
    upwind_x = np.where(u > 0, c[:-1, :], c[1:, :])
    fx[1:-1] = u * upwind_x - diffusion * (c[1:, :] - c[:-1, :]) / dx_m
    upwind_y = np.where(v > 0, c[:, :-1], c[:, 1:])
    fy[:, 1:-1] = v * upwind_y - diffusion * (c[:, 1:] - c[:, :-1]) / dx_m
    if boundary is not None:
        gw, ge, gs, gn = (boundary[e] for e in EDGES)
        fx[0] = u * (gw if u > 0 else c[0]) - diffusion * (c[0] - gw) / dx_m
        fx[-1] = u * (c[-1] if u > 0 else ge) - diffusion * (ge - c[-1]) / dx_m
        fy[:, 0] = v * (gs if v > 0 else c[:, 0]) - diffusion * (c[:, 0] - gs) / dx_m
        fy[:, -1] = v * (c[:, -1] if v > 0 else gn) - diffusion * (gn - c[:, -1]) / dx_m
    div = (fx[1:] - fx[:-1] + fy[:, 1:] - fy[:, :-1]) / dx_m
    return c + dt_s * (-div + source_per_s - decay_per_s * c)


def simulate_dispersion(emissions, wind_u, wind_v, diffusion: float, boundary: Optional[dict],
                        cell_size_km: float = 1.0, decay_per_hour: float = 0.0,
                        substeps: Optional[int] = None, initial=None) -> TruthField:
    """Hourly end-of-hour concentrations of an advection-diffusion model.

    ``emissions`` is ``(hours, width, height)`` in µg/m³ per hour; wind is one
    uniform (east, north) vector per hour in m/s; ``boundary`` maps each edge
    to an hourly inflow series (``None`` closes the domain). Negative values are
    clipped at zero and counted.
    """
    emissions = np.asarray(emissions, dtype=float)
    n_hours, w, h = emissions.shape
    wind_u = np.broadcast_to(np.asarray(wind_u, dtype=float), (n_hours,))
    wind_v = np.broadcast_to(np.asarray(wind_v, dtype=float), (n_hours,))
    if diffusion < 0 or decay_per_hour < 0 or np.any(emissions < 0):
        raise ConfigurationError("diffusion, decay and emissions must be non-negative")
    dx = cell_size_km * 1000.0
    if substeps is None:
        substeps = stable_substeps(float(np.max(np.hypot(wind_u, wind_v), initial=0.0)), diffusion, dx)
    dt = 3600.0 / substeps
    check_stability(wind_u, wind_v, diffusion, dx, dt)

    c = np.zeros((w, h)) if initial is None else np.array(initial, dtype=float)
    out = np.empty((n_hours, w, h))
    clipped, clipped_mass = 0, 0.0
    for t in range(n_hours):
        src = emissions[t] / 3600.0
        bnd = None if boundary is None else {e: float(boundary[e][t]) for e in EDGES}
        for _ in range(substeps):
            c = advect_diffuse_step(c, wind_u[t], wind_v[t], diffusion, dx, dt, src,
                                    decay_per_hour / 3600.0, bnd)
            neg = c < 0
            if neg.any():
                clipped += int(neg.sum())
                clipped_mass += float(-c[neg].sum())
                c[neg] = 0.0
        out[t] = c
    return TruthField(out, clipped, clipped_mass)


def simulate_city(city: City) -> TruthField:
    """Truth for the study window, after spinning up through the history hours.

    On top of the resolved transport field every cell carries a near-source
    increment, ``subgrid_hours`` times its own emission rate, standing in for
    street-level concentrations the 1 km grid cannot resolve.
    """
    cfg = city.config
    u, v = wind_components(city.wind_speed, city.wind_dir)
    b0 = np.mean([city.boundary[e][0] for e in EDGES])
    initial = np.full((cfg.width, cfg.height), b0)
    truth = simulate_dispersion(city.emissions, u, v, cfg.diffusion, city.boundary, cfg.cell_size_km,
                                cfg.decay_per_hour, cfg.substeps_per_hour, initial)
    values = truth.values + cfg.subgrid_hours * city.emissions
    return TruthField(values[city.history:], truth.clipped_cells, truth.clipped_mass)


# -- sensor sampling ----------------------------------------------------------


def _iso(epoch_s: float) -> str:
    return datetime.fromtimestamp(epoch_s, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class SensorFiles:
    stations: list  # (id, lat, lon, inside)
    fixed_rows: list
    mobile_rows: list
    meteo_rows: list
    fixed_cells: list = field(default_factory=list)


def sample_sensors(truth: TruthField, city: City) -> SensorFiles:
    """Fixed, mobile and meteorology readings as ingest-schema rows.

    Noise is drawn even at zero level so the random stream, and with it every
    station cell and vehicle path, does not depend on the noise settings.
    """
    cfg = city.config
    grid = cfg.grid
    rng = np.random.default_rng([cfg.seed, 1])
    w, h, T = cfg.width, cfg.height, cfg.num_hours
    t0 = cfg.start_time * 3600

    cells = rng.choice(w * h, size=cfg.n_fixed, replace=False)
    fixed_cells = [(int(c % w), int(c // w)) for c in cells]
    stations = []
    fixed_rows = []
    for i, (x, y) in enumerate(fixed_cells):
        lat, lon = grid.to_latlon((x + rng.uniform(0.2, 0.8)) * cfg.cell_size_km,
                                  (y + rng.uniform(0.2, 0.8)) * cfg.cell_size_km)
        sid = f"F{i:02d}"
        stations.append((sid, float(lat), float(lon), True))
        noise = rng.normal(0.0, cfg.fixed_noise, T)
        for t in range(T):
            pm = max(truth.values[t, x, y] + noise[t], 0.0)
            fixed_rows.append((sid, float(lat), float(lon), _iso(t0 + 3600 * t), pm))
    for st in city.external:
        stations.append((st.station_id, st.lat, st.lon, False))
        n = len(st.series)
        noise = rng.normal(0.0, cfg.fixed_noise, n)
        for j in range(n):
            hour = j - cfg.lead_hours
            fixed_rows.append((st.station_id, st.lat, st.lon, _iso(t0 + 3600 * hour),
                               max(st.series[j] + noise[j], 0.0)))

    mobile_rows = []
    per_hour = cfg.mobile_samples_per_hour
    step_s = 3600.0 / per_hour
    for v in range(cfg.n_mobile):
        x, y = int(rng.integers(w)), int(rng.integers(h))
        for t in range(T):
            for k in range(per_hour):
                if rng.random() < cfg.mobile_move_prob:
                    dx, dy = [(1, 0), (-1, 0), (0, 1), (0, -1)][int(rng.integers(4))]
                    x = min(max(x + dx, 0), w - 1)
                    y = min(max(y + dy, 0), h - 1)
                lat, lon = grid.to_latlon((x + rng.uniform(0.1, 0.9)) * cfg.cell_size_km,
                                          (y + rng.uniform(0.1, 0.9)) * cfg.cell_size_km)
                reading = cfg.mobile_scale * truth.values[t, x, y] + cfg.mobile_bias
                reading += rng.normal(0.0, cfg.mobile_noise)
                if rng.random() < cfg.mobile_spike_prob:
                    reading += rng.uniform(200, 600)
                temp = city.meteo["temperature"][t, x, y] + rng.normal(0, 0.3)
                rh = float(np.clip(city.meteo["rel_humidity"][t, x, y] + rng.normal(0, 1.0), 0, 100))
                mobile_rows.append((f"V{v:02d}", float(lat), float(lon), int(t0 + t * 3600 + (k + 0.5) * step_s),
                                    max(reading, 0.0), temp, rh))

    meteo_rows = []
    mcells = rng.choice(w * h, size=cfg.n_meteo, replace=False)
    for i, c in enumerate(mcells):
        x, y = int(c % w), int(c // w)
        lat, lon = grid.cell_center(x, y)
        for t in range(T):
            m = {k: float(a[t, x, y]) for k, a in city.meteo.items()}
            wd = (m["wind_dir"] + rng.normal(0, 5.0)) % 360.0
            meteo_rows.append((f"M{i:02d}", lat, lon, int(t0 + t * 3600), m["temperature"], m["pressure"],
                               m["vapor_pressure"], m["rel_humidity"], m["wind_speed"], wd))
    return SensorFiles(stations, fixed_rows, mobile_rows, meteo_rows, fixed_cells)


def write_city(city: City, truth: TruthField, sensors: SensorFiles, out_dir, header: str = "") -> dict:
    """Write every ingest-schema file plus ``truth.csv`` and ``city.json``; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = city.config
    paths = {}

    def write(name, columns, rows):
        p = out / name
        with p.open("w", encoding="utf-8", newline="") as fh:
            fh.write(header)
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(r if isinstance(r, str) else (str(r) if isinstance(r, (int, np.integer))
                                                               else _fmt(r)) for r in row) + "\n")
        paths[name] = p

    write("stations.csv", ("station_id", "lat", "lon", "inside_study_area"),
          ((s, lat, lon, "1" if inside else "0") for s, lat, lon, inside in sensors.stations))
    write("fixed.csv", ("station_id", "lat", "lon", "timestamp", "pm25"), sensors.fixed_rows)
    write("mobile.csv", ("vehicle_id", "lat", "lon", "timestamp", "pm25", "temp", "rh"), sensors.mobile_rows)
    write("meteo.csv", ("station_id", "lat", "lon", "timestamp", "temp", "pressure", "vapor_pressure",
                        "rh", "wind_speed", "wind_dir"), sensors.meteo_rows)
    st = city.static
    write("static_features.csv", ("x", "y", "feature_name", "value"),
          ((x, y, st.names[c], float(st.data[x, y, c]))
           for c in range(st.depth) for y in range(cfg.height) for x in range(cfg.width)))
    dyn = city.dynamic
    write("dynamic_features.csv", ("x", "y", "t", "feature_name", "value"),
          ((x, y, t, dyn.names[c], float(dyn.data[t, x, y, c]))
           for t in range(cfg.num_hours) for c in range(dyn.depth)
           for y in range(cfg.height) for x in range(cfg.width)))
    write("truth.csv", ("x", "y", "t", "value"),
          ((x, y, t, float(truth.values[t, x, y]))
           for t in range(cfg.num_hours) for y in range(cfg.height) for x in range(cfg.width)))
    meta = {
        "config": cfg.to_dict(),
        "grid": asdict(cfg.grid),
        "clipped_cells": truth.clipped_cells,
        "external_stations": [
            {"station_id": s.station_id, "bearing_deg": s.bearing_deg, "distance_km": s.distance_km}
            for s in city.external
        ],
        "driver_channels": [r[0] for r in STATIC_ROSTER if r[3]][:cfg.n_sources],
    }
    p = out / "city.json"
    p.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths["city.json"] = p
    return paths


def synthesize(config: CityConfig, out_dir=None, header: str = ""):
    """Generate, simulate and sample a city; write files when ``out_dir`` is given."""
    city = generate_city(config)
    truth = simulate_city(city)
    sensors = sample_sensors(truth, city)
    paths = write_city(city, truth, sensors, out_dir, header) if out_dir is not None else {}
    return city, truth, sensors, paths
