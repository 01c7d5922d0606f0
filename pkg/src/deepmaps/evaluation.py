"""Metrics, k-fold cross-validation, mobile-coverage ablation and city-wide inference."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import baselines, gbdt
from .core import FIXED, ConfigurationError, GridFrame, InputError, LabelSet
from .featurize import FeatureContext, parse_selection, selection_name

log = logging.getLogger(__name__)

METHODS = ("deep_maps", "idw", "kriging", "knn")
SPATIAL_METHODS = ("idw", "kriging")
ABLATION_FRACTIONS = (0, 20, 40, 60, 80, 100)

# rows of the comparison table: (method, feature subset or "-")
TABLE_ROWS = (
    ("idw", "-"),
    ("kriging", "-"),
    ("knn", "L"),
    ("knn", "L+M"),
    ("deep_maps", "L"),
    ("deep_maps", "L+M"),
    ("deep_maps", "N"),
    ("deep_maps", "N+M"),
    ("deep_maps", "L+M+N"),
)


@dataclass(frozen=True)
class Metrics:
    rmse: float
    smape: float
    r_squared: float

    def as_row(self) -> list:
        return [self.rmse, self.smape, self.r_squared]


def compute_metrics(predictions, truths) -> Metrics:
    """RMSE, SMAPE (percent, symmetric-mean denominator) and R^2 (0 when truths are constant)."""
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(truths, dtype=float)
    if p.shape != y.shape:
        raise InputError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise InputError("metrics need at least one value")
    err = p - y
    rmse = float(np.sqrt(np.mean(err ** 2)))
    denom = (np.abs(y) + np.abs(p)) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(denom == 0, 0.0, np.abs(err) / denom)
    smape = float(100.0 * np.mean(terms))
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 0.0 if sst == 0 else float(1.0 - np.sum(err ** 2) / sst)
    return Metrics(rmse, smape, r2)


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray
    k: int
    seed: int
    mode: str = "random"

    def train_test(self, fold: int):
        return np.flatnonzero(self.folds != fold), np.flatnonzero(self.folds == fold)


def kfold_split(labels: LabelSet, k: int = 5, seed: int = 0, mode: str = "random") -> FoldAssignment:
    """Seeded shuffle then round-robin; ``grid_grouped`` deals whole cells to folds."""
    if k < 2:
        raise InputError("k must be >= 2")
    n = len(labels)
    if n < k:
        raise InputError(f"need at least k={k} labels, got {n}")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    if mode == "random":
        folds[rng.permutation(n)] = np.arange(n) % k
    elif mode == "grid_grouped":
        cell = labels.y * (int(labels.x.max()) + 1) + labels.x
        uniq, inverse = np.unique(cell, return_inverse=True)
        if len(uniq) < k:
            raise InputError(f"need at least k={k} distinct cells for grid_grouped folds")
        cell_fold = np.empty(len(uniq), dtype=np.int64)
        cell_fold[rng.permutation(len(uniq))] = np.arange(len(uniq)) % k
        folds = cell_fold[inverse.reshape(-1)]
    else:
        raise InputError(f"unknown fold mode {mode!r}")
    return FoldAssignment(folds, k, seed, mode)


def holdout_split(labels: LabelSet, fraction: float = 0.15, seed: int = 0):
    """Independent test set: a seeded random ``fraction`` of all labels."""
    rng = np.random.default_rng(seed)
    n_test = int(round(fraction * len(labels)))
    perm = rng.permutation(len(labels))
    test = np.zeros(len(labels), dtype=bool)
    test[perm[:n_test]] = True
    return labels.subset(~test), labels.subset(test)


@dataclass
class MethodSpec:
    """What to run: method name, feature subset and its parameters."""

    method: str
    selection: Optional[str] = None
    gbdt_params: gbdt.GbdtParams = field(default_factory=gbdt.GbdtParams)
    knn_k: int = 10
    idw_power: float = 2.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.method in SPATIAL_METHODS:
            self.selection = None
        elif not self.selection:
            raise ConfigurationError(f"{self.method} needs a feature selection")
        else:
            self.selection = selection_name(self.selection)

    @property
    def features_label(self) -> str:
        return self.selection or "-"


def fit_predict(spec: MethodSpec, train: LabelSet, test: LabelSet, context: FeatureContext):
    """Predictions for ``test`` from a model trained on ``train``.

    Returns ``(predictions, truths, model)``; rows the features cannot cover
    (masked macro shifts) are left out of both vectors.
    """
    if spec.method in SPATIAL_METHODS:
        grid = context.spec
        tr_xy = np.column_stack(grid.cell_center_km(train.x, train.y))
        te_xy = np.column_stack(grid.cell_center_km(test.x, test.y))
        pred = baselines.interpolate_by_hour(spec.method, tr_xy, train.t, train.pm25, te_xy, test.t,
                                             power=spec.idw_power)
        return pred, test.pm25.copy(), None
    fm_train = context.assemble(train, spec.selection)
    fm_test = context.assemble(test, spec.selection)
    if spec.method == "knn":
        pred = baselines.knn_predict(fm_train.values, fm_train.response, fm_test.values, spec.knn_k)
        return pred, fm_test.response, None
    model = gbdt.fit(fm_train, fm_train.response, spec.gbdt_params)
    return gbdt.predict(model, fm_test), fm_test.response, model


@dataclass
class CVResult:
    method: str
    features: str
    pooled: Metrics
    mean: Metrics
    per_fold: list


def cross_validate(labels: LabelSet, spec: MethodSpec, context: FeatureContext, k: int = 5,
                   seed: int = 0, mode: str = "random") -> CVResult:
    """k-fold CV; reports pooled metrics over all held-out predictions and the fold mean."""
    folds = kfold_split(labels, k, seed, mode)
    keys = labels.keys()
    preds, truths, per_fold = [], [], []
    for f in range(k):
        tr_idx, te_idx = folds.train_test(f)
        train_keys = {keys[i] for i in tr_idx}
        if any(keys[i] in train_keys for i in te_idx):
            raise AssertionError("validation label leaked into training fold")
        p, y, _ = fit_predict(spec, labels.subset(tr_idx), labels.subset(te_idx), context)
        per_fold.append(compute_metrics(p, y))
        preds.append(p)
        truths.append(y)
    pooled = compute_metrics(np.concatenate(preds), np.concatenate(truths))
    mean = Metrics(*np.mean([m.as_row() for m in per_fold], axis=0).tolist())
    return CVResult(spec.method, spec.features_label, pooled, mean, per_fold)


def comparison_table(labels: LabelSet, context: FeatureContext, rows=TABLE_ROWS, k: int = 5,
                     seed: int = 0, mode: str = "random", gbdt_params: gbdt.GbdtParams = None,
                     knn_k: int = 10) -> list[CVResult]:
    """Cross-validated metrics for every (method, feature subset) row."""
    params = gbdt_params or gbdt.GbdtParams(seed=seed)
    results = []
    for method, features in rows:
        if method in ("deep_maps", "knn"):
            needed = parse_selection(features)
            if ("N" in needed and context.maps is None) or ("M" in needed and context.macro is None):
                log.warning("skipping %s %s: features unavailable", method, features)
                continue
        spec = MethodSpec(method, None if features == "-" else features, params, knn_k)
        start = time.perf_counter()
        results.append(cross_validate(labels, spec, context, k, seed, mode))
        log.info("%s %s done in %.1fs", method, features, time.perf_counter() - start)
    return results


def write_table_csv(results: Sequence[CVResult], path, header: str = "") -> None:
    lines = ["method,features,rmse,smape,r2"]
    for r in results:
        m = r.pooled
        lines.append(f"{r.method},{r.features},{m.rmse:.6f},{m.smape:.6f},{m.r_squared:.6f}")
    Path(path).write_text(header + "\n".join(lines) + "\n", encoding="utf-8")


def write_folds_csv(results: Sequence[CVResult], path, header: str = "") -> None:
    lines = ["method,features,fold,rmse,smape,r2"]
    for r in results:
        for i, m in enumerate(r.per_fold):
            lines.append(f"{r.method},{r.features},{i},{m.rmse:.6f},{m.smape:.6f},{m.r_squared:.6f}")
    Path(path).write_text(header + "\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class AblationCurve:
    seed: int
    fractions: list
    metrics: list
    train_sizes: list

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.fractions, self.fractions[1:])):
            raise InputError("ablation fractions must be strictly increasing")

    def rmse(self) -> np.ndarray:
        return np.array([m.rmse for m in self.metrics])


def ablation_training_set(pool: LabelSet, fraction: float, seed: int) -> LabelSet:
    """All fixed labels of ``pool`` plus a seeded ``fraction`` percent of its mobile labels.

    For one seed the mobile subsets are nested as the fraction grows.
    """
    if not 0 <= fraction <= 100:
        raise InputError(f"mobile fraction must be in [0, 100], got {fraction}")
    fixed = np.flatnonzero(pool.is_fixed)
    mobile = np.flatnonzero(~pool.is_fixed)
    order = np.random.default_rng(seed).permutation(len(mobile))
    n_take = int(round(fraction / 100.0 * len(mobile)))
    chosen = np.sort(np.concatenate([fixed, mobile[order[:n_take]]]))
    return pool.subset(chosen)


def coverage_ablation(labels: LabelSet, test_set: LabelSet, context: FeatureContext,
                      fractions: Sequence[float] = ABLATION_FRACTIONS, seeds: Sequence[int] = (0,),
                      selection: str = "L+M+N", gbdt_params: gbdt.GbdtParams = None) -> list[AblationCurve]:
    """Boosted model trained on fixed labels plus x% of mobile labels, scored on ``test_set``."""
    fractions = list(fractions)
    for x in fractions:
        if not 0 <= x <= 100:
            raise InputError(f"mobile fraction must be in [0, 100], got {x}")
    test_keys = set(test_set.keys())
    keep = np.array([k not in test_keys for k in labels.keys()], dtype=bool)
    pool = labels.subset(keep)
    base = gbdt_params or gbdt.GbdtParams()
    fm_test = context.assemble(test_set, selection)
    curves = []
    for seed in seeds:
        params = gbdt.GbdtParams(**{**base.__dict__, "seed": seed})
        metrics, sizes = [], []
        for x in fractions:
            train = ablation_training_set(pool, x, seed)
            fm = context.assemble(train, selection)
            model = gbdt.fit(fm, fm.response, params)
            metrics.append(compute_metrics(gbdt.predict(model, fm_test), fm_test.response))
            sizes.append(len(train))
        curves.append(AblationCurve(seed, fractions, metrics, sizes))
    return curves


def write_ablation_csv(curves: Sequence[AblationCurve], path, header: str = "") -> None:
    lines = ["fraction,rmse,smape,r2,seed"]
    for c in curves:
        for x, m in zip(c.fractions, c.metrics):
            lines.append(f"{x:g},{m.rmse:.6f},{m.smape:.6f},{m.r_squared:.6f},{c.seed}")
    Path(path).write_text(header + "\n".join(lines) + "\n", encoding="utf-8")


def infer_city(model: gbdt.GbdtModel, context: FeatureContext, selection: str,
               hours: Optional[Sequence[int]] = None) -> list[GridFrame]:
    """One clamped prediction raster per hour; cells without features are masked."""
    grid = context.spec
    hours = list(range(grid.num_hours)) if hours is None else [int(h) for h in hours]
    bad = [h for h in hours if not 0 <= h < grid.num_hours]
    if bad:
        raise InputError(f"hours outside the study window [0, {grid.num_hours}): {bad}")
    xs, ys = grid.all_cells()
    frames = []
    for t in hours:
        tt = np.full(len(xs), t)
        fm = context.assemble((xs, ys, tt), selection)
        values = np.zeros((grid.width, grid.height))
        mask = np.zeros((grid.width, grid.height), dtype=bool)
        if len(fm):
            values[fm.x, fm.y] = np.maximum(gbdt.predict(model, fm), 0.0)
            mask[fm.x, fm.y] = True
        frames.append(GridFrame(t, values, mask))
    return frames


def write_predictions_csv(frames: Sequence[GridFrame], path, header: str = "") -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write(header)
        fh.write("x,y,t,value\n")
        for fr in frames:
            w, h = fr.values.shape
            for y in range(h):
                for x in range(w):
                    if fr.mask[x, y]:
                        fh.write(f"{x},{y},{fr.t},{float(fr.values[x, y])!r}\n")
