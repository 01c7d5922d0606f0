"""End-to-end assembly of a study from the ingest-schema files in one directory."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import calibrate, ingest
from .core import GridSpec, LabelSet
from .featurize import (
    DEFAULT_BASE_SHIFTS,
    DynamicVolume,
    FeatureContext,
    MacroFeatures,
    StaticVolume,
    build_feature_maps,
    derive_macro_config,
    macro_series_from_observations,
)

log = logging.getLogger(__name__)


@dataclass
class Study:
    spec: GridSpec
    labels: LabelSet
    context: FeatureContext
    calibration: calibrate.CalibrationModel
    meteo: ingest.MeteoField
    reports: dict = field(default_factory=dict)
    n_fixed_labels: int = 0
    n_mobile_labels: int = 0


def grid_from_json(path) -> GridSpec:
    meta = json.loads(Path(path).read_text(encoding="utf-8"))
    return GridSpec(**meta["grid"])


def load_labels(data_dir, spec: GridSpec):
    """Fixed labels, mobile aggregates, station metadata and raw fixed readings."""
    data_dir = Path(data_dir)
    meta = ingest.load_station_meta(data_dir / "stations.csv")
    fixed_obs, fixed_rep = ingest.load_fixed_observations(data_dir / "fixed.csv", spec, meta)
    mobile_obs, mobile_rep = ingest.load_mobile_points(data_dir / "mobile.csv", spec)
    fixed = ingest.fixed_labels(fixed_obs, spec)
    aggregates = ingest.aggregate_mobile(mobile_obs, spec)
    return fixed, aggregates, meta, fixed_obs, {"fixed": fixed_rep, "mobile": mobile_rep}


def meteo_volume(meteo: ingest.MeteoField) -> DynamicVolume:
    chans = meteo.channels()
    data = np.stack([chans[name] for name in ingest.METEO_VARIABLES], axis=-1)
    names = [f"meteorology_{name}" for name in ingest.METEO_VARIABLES]
    return DynamicVolume(data, names, ["meteorology"] * len(names))


def load_study(data_dir, spec: Optional[GridSpec] = None, n_static_filters: int = 8,
               n_dynamic_filters: int = 8, filter_seed: int = 0,
               base_shifts=DEFAULT_BASE_SHIFTS) -> Study:
    """Ingest, calibrate and featurise every file of a study directory."""
    data_dir = Path(data_dir)
    spec = spec or grid_from_json(data_dir / "city.json")
    fixed, aggregates, meta, fixed_obs, reports = load_labels(data_dir, spec)

    pairs = calibrate.pair_colocated(fixed, aggregates, spec.start_time)
    model = calibrate.fit_calibration(pairs)
    mobile_labels, skipped = calibrate.apply_calibration(model, aggregates, spec.start_time)
    if skipped:
        log.info("skipped %d mobile aggregates without temperature/humidity", skipped)
    labels = calibrate.build_label_set(fixed, mobile_labels)

    stations, rep = ingest.load_meteo_stations(data_dir / "meteo.csv", spec)
    reports["meteo"] = rep
    meteo = ingest.grid_meteorology(stations, spec)

    sdata, snames, scats = ingest.load_static_features(data_dir / "static_features.csv", spec)
    static = StaticVolume(sdata, snames, scats)
    ddata, dnames, dcats = ingest.load_dynamic_features(data_dir / "dynamic_features.csv", spec)
    dynamic = DynamicVolume(ddata, dnames, dcats).concat(meteo_volume(meteo))

    maps = build_feature_maps(static, dynamic, n_static_filters, n_dynamic_filters, filter_seed)
    valid = meteo.hour_valid
    mean_kmh = float(meteo.wind_speed[valid].mean()) * 3.6 if valid.any() else 0.0
    config = derive_macro_config(meta, spec, mean_kmh, base_shifts)
    series = macro_series_from_observations(fixed_obs, spec, [s.station_id for s in config.stations])
    macro = MacroFeatures(series, config) if config.stations else None
    context = FeatureContext(spec, static, dynamic, maps, macro)
    n_fixed = int(labels.is_fixed.sum())
    return Study(spec, labels, context, model, meteo, reports, n_fixed, len(labels) - n_fixed)
