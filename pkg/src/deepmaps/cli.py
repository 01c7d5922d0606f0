"""Command-line runner: one pipeline stage per subcommand, artifacts tagged with the config hash."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import calibrate, evaluation, gbdt, ingest, pipeline, synthcity
from .core import ConfigurationError, DeepMapsError, GridSpec, InputError
from .featurize import DEFAULT_BASE_SHIFTS, parse_selection

log = logging.getLogger("deepmaps")

SUBCOMMANDS = ("synth", "ingest", "calibrate", "featurize", "train", "evaluate", "ablate", "infer", "report")
GRID_KEYS = ("origin_lat", "origin_lon", "cell_size_km", "width", "height", "start_time", "num_hours")
COMPASS = ("N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE", "S", "SSW", "SW", "WSW", "W", "WNW", "NW", "NNW")
TOP_IMPORTANCES = 20


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_list(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _rows(text: str) -> tuple:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        method, _, feats = item.partition(":")
        out.append((method.strip(), feats.strip() or "-"))
    return tuple(out)


def _optional_int(text: str):
    return None if text.lower() in ("", "none") else int(text)


def _format(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{m}:{f}" for m, f in value)
        return ",".join(_format(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass(frozen=True)
class Setting:
    default: object
    parse: object


def _settings() -> dict:
    table = {
        "seed": Setting(0, int),
        "data_dir": Setting("", str),
        "n_static_filters": Setting(8, int),
        "n_dynamic_filters": Setting(8, int),
        "filter_seed": Setting(0, int),
        "base_shifts": Setting(DEFAULT_BASE_SHIFTS, _int_list),
        "selection": Setting("L+M+N", str),
        "cv_mode": Setting("random", str),
        "cv_folds": Setting(5, int),
        "eval_rows": Setting(evaluation.TABLE_ROWS, _rows),
        "holdout_fraction": Setting(0.15, float),
        "knn_k": Setting(10, int),
        "idw_power": Setting(2.0, float),
        "ablation_fractions": Setting(tuple(float(v) for v in evaluation.ABLATION_FRACTIONS), _float_list),
        "ablation_seeds": Setting((0, 1, 2), _int_list),
        "infer_hours": Setting("all", str),
    }
    for f in fields(gbdt.GbdtParams):
        if f.name == "seed":
            continue
        parse = _optional_int if f.name == "early_stopping_rounds" else type(f.default)
        table[f"gbdt.{f.name}"] = Setting(f.default, parse)
    for f in fields(synthcity.CityConfig):
        if f.name == "seed":
            continue
        default = f.default
        if isinstance(default, tuple):
            parse = _float_list
        elif f.name == "substeps_per_hour":
            parse = _optional_int
        else:
            parse = type(default)
        table[f"city.{f.name}"] = Setting(default, parse)
    return table


SETTINGS = _settings()


class RunConfig:
    """Flat ``key = value`` configuration; every key has a default and unknown keys are rejected."""

    def __init__(self, values: Optional[dict] = None):
        self.values = {k: s.default for k, s in SETTINGS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in SETTINGS:
            raise ConfigurationError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = SETTINGS[key].parse(value.strip())
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key}: {exc}") from None
        self.values[key] = value

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
            key = key.strip()
            if key in values:
                raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = value.strip()
        cfg = cls()
        for key, value in values.items():
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        return cls.parse(path.read_text(encoding="utf-8"), str(path))

    def resolved(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.resolved().encode("utf-8")).hexdigest()[:16]

    @property
    def header(self) -> str:
        return f"# config_hash={self.hash}\n"

    def city_config(self) -> synthcity.CityConfig:
        kw = {k[len("city."):]: v for k, v in self.values.items() if k.startswith("city.")}
        return synthcity.CityConfig.from_dict({**kw, "seed": self["seed"]})

    def gbdt_params(self) -> gbdt.GbdtParams:
        kw = {k[len("gbdt."):]: v for k, v in self.values.items() if k.startswith("gbdt.")}
        return gbdt.GbdtParams(**kw, seed=self["seed"])


class Runner:
    def __init__(self, config: RunConfig, out: Path):
        self.config = config
        self.out = out
        self.data_dir = Path(config["data_dir"]) if config["data_dir"] else out / "data"

    # -- helpers --------------------------------------------------------------

    @property
    def header(self) -> str:
        return self.config.header

    def grid(self) -> GridSpec:
        meta = self.data_dir / "city.json"
        if meta.is_file():
            return pipeline.grid_from_json(meta)
        return GridSpec(**{k: self.config[f"city.{k}"] for k in GRID_KEYS})

    def study(self) -> pipeline.Study:
        if not self.data_dir.is_dir():
            raise InputError(f"data directory not found: {self.data_dir}")
        cfg = self.config
        return pipeline.load_study(self.data_dir, self.grid(), cfg["n_static_filters"],
                                   cfg["n_dynamic_filters"], cfg["filter_seed"], cfg["base_shifts"])

    def selection(self) -> str:
        parse_selection(self.config["selection"])
        return self.config["selection"]

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.header + text, encoding="utf-8")
        return path

    def require(self, *names: str) -> list:
        missing = [n for n in names if not (self.out / n).is_file()]
        if missing:
            raise InputError(f"missing artifacts in {self.out}: {', '.join(missing)}")
        return [self.out / n for n in names]

    # -- subcommands ------------------------------------------------------------

    def synth(self):
        city, truth, _, paths = synthcity.synthesize(self.config.city_config(), self.data_dir, self.header)
        meta_path = paths["city.json"]
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        meta["config_hash"] = self.config.hash
        meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        log.info("synthetic city written to %s (%d clipped cells)", self.data_dir, truth.clipped_cells)

    def ingest(self):
        grid = self.grid()
        fixed, aggregates, _, _, reports = pipeline.load_labels(self.data_dir, grid)
        lines = ["x,y,t,pm25"]
        lines += [f"{lb.cell.x},{lb.cell.y},{lb.t},{lb.pm25!r}" for lb in fixed]
        self.write("fixed_labels.csv", "\n".join(lines) + "\n")
        lines = ["x,y,t,pm25_median,temp_mean,rh_mean,sample_count"]
        for a in aggregates:
            lines.append(f"{a.cell.x},{a.cell.y},{a.t},{a.pm25_median!r},{a.temp_mean!r},{a.rh_mean!r},"
                         f"{a.sample_count}")
        self.write("mobile_aggregates.csv", "\n".join(lines) + "\n")
        lines = ["file,total,parsed,malformed,dropped"]
        for name, rep in sorted(reports.items()):
            lines.append(f"{name},{rep.total},{rep.parsed},{rep.malformed},{rep.dropped}")
        self.write("ingest_report.csv", "\n".join(lines) + "\n")
        log.info("%d fixed labels, %d mobile aggregates", len(fixed), len(aggregates))

    def calibrate(self):
        grid = self.grid()
        fixed, aggregates, _, _, _ = pipeline.load_labels(self.data_dir, grid)
        model = calibrate.fit_calibration(calibrate.pair_colocated(fixed, aggregates, grid.start_time))
        mobile, _ = calibrate.apply_calibration(model, aggregates, grid.start_time)
        labels = calibrate.build_label_set(fixed, mobile)
        self.out.mkdir(parents=True, exist_ok=True)
        calibrate.write_report(model, self.out / "calibration.txt", self.header)
        self.write("labels.csv", _labels_csv(labels))
        log.info("calibration R^2 %.4f over %d pairs", model.r_squared, model.n_pairs)

    def featurize(self):
        study = self.study()
        fm = study.context.assemble(study.labels, self.selection())
        self.out.mkdir(parents=True, exist_ok=True)
        fm.to_csv(self.out / "features.csv", self.out / "features.meta.json", self.header)
        log.info("%d feature rows x %d columns (%d dropped)", len(fm), len(fm.columns), fm.dropped)

    def train(self):
        study = self.study()
        fm = study.context.assemble(study.labels, self.selection())
        model = gbdt.fit(fm, fm.response, self.config.gbdt_params())
        self.out.mkdir(parents=True, exist_ok=True)
        gbdt.save(model, self.out / "model.txt",
                  {"config_hash": self.config.hash, "selection": self.selection()})
        gbdt.write_importance_csv(model, fm.column_categories(), self.out / "importance.csv", self.header)
        log.info("trained %d trees on %d rows", len(model.trees), len(fm))

    def evaluate(self):
        cfg = self.config
        study = self.study()
        results = evaluation.comparison_table(study.labels, study.context, cfg["eval_rows"], cfg["cv_folds"],
                                              cfg["seed"], cfg["cv_mode"], cfg.gbdt_params(), cfg["knn_k"])
        self.out.mkdir(parents=True, exist_ok=True)
        evaluation.write_table_csv(results, self.out / "table.csv", self.header)
        evaluation.write_folds_csv(results, self.out / "folds.csv", self.header)

    def ablate(self):
        cfg = self.config
        study = self.study()
        _, test = evaluation.holdout_split(study.labels, cfg["holdout_fraction"], cfg["seed"])
        curves = evaluation.coverage_ablation(study.labels, test, study.context, cfg["ablation_fractions"],
                                              cfg["ablation_seeds"], self.selection(), cfg.gbdt_params())
        self.out.mkdir(parents=True, exist_ok=True)
        evaluation.write_ablation_csv(curves, self.out / "ablation.csv", self.header)

    def infer(self):
        (model_path,) = self.require("model.txt")
        model = gbdt.load(model_path)
        study = self.study()
        hours = None if self.config["infer_hours"] == "all" else list(_int_list(self.config["infer_hours"]))
        frames = evaluation.infer_city(model, study.context, self.selection(), hours)
        self.out.mkdir(parents=True, exist_ok=True)
        evaluation.write_predictions_csv(frames, self.out / "predictions.csv", self.header)

    def report(self):
        table_path, imp_path = self.require("table.csv", "importance.csv")
        table = _read_csv(table_path)
        importance = _read_csv(imp_path)
        weights = {r["column"]: float(r["weight"]) for r in importance}
        categories = {r["column"]: r["category"] for r in importance}
        wind = _wind_directions(self.data_dir / "meteo.csv")
        text = render_report(table, weights, categories, wind, self.config.hash)
        self.write("report.md", text)
        pred = self.out / "predictions.csv"
        if pred.is_file():
            n = write_rasters(_read_csv(pred), self.grid(), self.out / "rasters", self.header)
            log.info("wrote %d hourly rasters", n)


# -- report pieces ------------------------------------------------------------------


def _labels_csv(labels) -> str:
    lines = ["x,y,t,pm25,source"]
    for i in range(len(labels)):
        src = "fixed" if labels.is_fixed[i] else "mobile_calibrated"
        lines.append(f"{labels.x[i]},{labels.y[i]},{labels.t[i]},{float(labels.pm25[i])!r},{src}")
    return "\n".join(lines) + "\n"


def _read_csv(path) -> list:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _wind_directions(path: Path) -> np.ndarray:
    if not path.is_file():
        return np.zeros(0)
    rows = _read_csv(path)
    out = []
    for r in rows:
        try:
            v = float(r.get("wind_dir", "nan"))
        except ValueError:
            continue
        if np.isfinite(v):
            out.append(v)
    return np.asarray(out)


def wind_histogram(directions) -> np.ndarray:
    """Counts in 16 compass sectors of 22.5 degrees, sector 0 centred on north."""
    d = np.mod(np.asarray(directions, dtype=float), 360.0)
    sector = np.floor((d + 11.25) / 22.5).astype(int) % 16
    return np.bincount(sector, minlength=16)


def top_importances(weights: dict, n: int = TOP_IMPORTANCES) -> list:
    """``name weight`` lines, heaviest first (ties by name)."""
    order = sorted(weights, key=lambda c: (-weights[c], c))[:n]
    return [f"{c} {weights[c]!r}" for c in order]


def category_rollup(weights: dict, categories: dict) -> dict:
    out: dict = {}
    for col, w in weights.items():
        cat = categories.get(col, "other")
        out[cat] = out.get(cat, 0.0) + w
    return out


def station_weights(weights: dict) -> list:
    """Macro columns ``macro_<station>_<shift>`` summed per station, heaviest first."""
    per: dict = {}
    for col, w in weights.items():
        if col.startswith("macro_"):
            sid = col[len("macro_"):].rsplit("_", 1)[0]
            per[sid] = per.get(sid, 0.0) + w
    return sorted(per.items(), key=lambda kv: (-kv[1], kv[0]))


def render_report(table: Sequence[dict], weights: dict, categories: dict, wind, config_hash: str) -> str:
    out = ["# PM2.5 inference run report", "", f"config hash: `{config_hash}`", "", "## Metrics", "",
           "| method | features | RMSE | SMAPE (%) | R2 |", "|---|---|---|---|---|"]
    for r in table:
        out.append(f"| {r['method']} | {r['features']} | {float(r['rmse']):.3f} | {float(r['smape']):.3f} "
                   f"| {float(r['r2']):.4f} |")
    out += ["", f"## Top {TOP_IMPORTANCES} feature importances", "", "```"]
    out += top_importances(weights)
    out += ["```", "", "## Importance by category", "", "| category | weight |", "|---|---|"]
    rollup = category_rollup(weights, categories)
    for cat in sorted(rollup, key=lambda c: (-rollup[c], c)):
        out.append(f"| {cat} | {rollup[cat]:.6f} |")
    out += ["", "## Macro-station weights", "", "| station | weight |", "|---|---|"]
    for sid, w in station_weights(weights):
        out.append(f"| {sid} | {w:.6f} |")
    out += ["", "## Wind direction (16 sectors, direction wind blows from)", "", "| sector | count |", "|---|---|"]
    for name, count in zip(COMPASS, wind_histogram(wind)):
        out.append(f"| {name} | {int(count)} |")
    return "\n".join(out) + "\n"


def write_rasters(rows: Sequence[dict], grid: GridSpec, out_dir: Path, header: str = "") -> int:
    """One ``x,y,value`` CSV and one plain PGM per hour; all hours share one linear grey scale.

    Unpredicted cells are written as 0 in the image and omitted from the CSV.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    by_hour: dict = {}
    for r in rows:
        by_hour.setdefault(int(r["t"]), []).append((int(r["x"]), int(r["y"]), float(r["value"])))
    values = [v for cells in by_hour.values() for _, _, v in cells]
    lo = min(values) if values else 0.0
    hi = max(values) if values else 0.0
    span = hi - lo
    (out_dir / "scale.txt").write_text(
        header + f"min {lo!r}\nmax {hi!r}\n# grey = round(255 * (value - min) / (max - min))\n", encoding="utf-8")
    for t in sorted(by_hour):
        cells = sorted(by_hour[t], key=lambda c: (c[1], c[0]))
        img = np.zeros((grid.height, grid.width), dtype=int)
        lines = ["x,y,value"]
        for x, y, v in cells:
            lines.append(f"{x},{y},{v!r}")
            img[grid.height - 1 - y, x] = int(round(255.0 * (v - lo) / span)) if span > 0 else 0
        (out_dir / f"hour_{t:04d}.csv").write_text(header + "\n".join(lines) + "\n", encoding="utf-8")
        pgm = ["P2"] + ([header.rstrip("\n")] if header else []) + [f"{grid.width} {grid.height}", "255"]
        pgm += [" ".join(str(v) for v in row) for row in img]
        (out_dir / f"hour_{t:04d}.pgm").write_text("\n".join(pgm) + "\n", encoding="utf-8")
    return len(by_hour)


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepmaps", description="Fine-grained PM2.5 inference pipeline")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return parser


def _error_line(subcommand: str, exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    return f"deepmaps: error: subcommand={subcommand} kind={exc.__class__.__name__} message={json.dumps(msg)}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        config = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            config.set("seed", args.seed)
        log.info("resolved config (hash %s):\n%s", config.hash, config.resolved().rstrip())
        runner = Runner(config, Path(args.out))
        getattr(runner, args.subcommand)()
    except (DeepMapsError, ValueError, OSError, KeyError) as exc:
        print(_error_line(args.subcommand, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
