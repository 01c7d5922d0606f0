"""Mobile-sensor calibration against co-located fixed readings, and label assembly."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .core import FIXED, MOBILE_CALIBRATED, CellIndex, DeepMapsError, InputError, Label, LabelSet
from .ingest import MobileAggregate

COVARIATES = ("intercept", "mobile_pm25", "hour_of_day", "cell_x", "cell_y", "temp", "rh")
RANK_TOL = 1e-10
PAIRS_PER_COVARIATE = 3


class SingularFitError(DeepMapsError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"rank-deficient calibration design; collinear columns: {', '.join(self.columns)}")


@dataclass(frozen=True)
class PairedSample:
    cell: CellIndex
    t: int
    fixed_pm25: float
    mobile_pm25: float
    hour_of_day: int
    temp: float
    rh: float


@dataclass(frozen=True)
class CalibrationModel:
    coefficients: dict
    r_squared: float
    f_statistic: float
    p_value: float
    n_pairs: int = 0

    def predict(self, mobile_pm25, hour_of_day, cell_x, cell_y, temp, rh):
        c = self.coefficients
        return (c["intercept"] + c["mobile_pm25"] * np.asarray(mobile_pm25, dtype=float)
                + c["hour_of_day"] * np.asarray(hour_of_day, dtype=float)
                + c["cell_x"] * np.asarray(cell_x, dtype=float)
                + c["cell_y"] * np.asarray(cell_y, dtype=float)
                + c["temp"] * np.asarray(temp, dtype=float)
                + c["rh"] * np.asarray(rh, dtype=float))

    def to_text(self) -> str:
        lines = [f"coef.{name} = {self.coefficients[name]!r}" for name in COVARIATES]
        lines += [f"r_squared = {self.r_squared!r}", f"f_statistic = {self.f_statistic!r}",
                  f"p_value = {self.p_value!r}", f"n_pairs = {self.n_pairs}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CalibrationModel":
        items = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            items[key] = value
        coefs = {name: float(items[f"coef.{name}"]) for name in COVARIATES}
        return cls(coefs, float(items["r_squared"]), float(items["f_statistic"]),
                   float(items["p_value"]), int(items.get("n_pairs", 0)))


def pair_colocated(fixed, mobile: Sequence[MobileAggregate], start_hour: int = 0) -> list[PairedSample]:
    """Inner join of fixed labels and mobile aggregates on (cell, t).

    ``start_hour`` is the study start in epoch hours; it anchors hour-of-day.
    """
    fixed_by_key = {lb.key: lb.pm25 for lb in fixed}
    pairs = []
    for agg in mobile:
        if agg.key in fixed_by_key:
            pairs.append(PairedSample(
                agg.cell, agg.t, fixed_by_key[agg.key], agg.pm25_median,
                (start_hour + agg.t) % 24, agg.temp_mean, agg.rh_mean,
            ))
    return pairs


def _design(pairs: Sequence[PairedSample]) -> np.ndarray:
    return np.array([
        [1.0, p.mobile_pm25, p.hour_of_day, p.cell.x, p.cell.y, p.temp, p.rh] for p in pairs
    ], dtype=float).reshape(len(pairs), len(COVARIATES))


def pivoted_cholesky(gram: np.ndarray, tol: float = RANK_TOL):
    """Diagonally pivoted Cholesky ``P^T G P = R^T R``; returns ``(R, perm, rank)``.

    Pivoting stops once the largest remaining diagonal falls below
    ``tol`` times the largest initial diagonal.
    """
    a = np.array(gram, dtype=float)
    n = a.shape[0]
    perm = np.arange(n)
    r = np.zeros_like(a)
    threshold = tol * np.max(np.diag(a))
    rank = 0
    for k in range(n):
        diag = np.diag(a)[k:] - np.sum(r[:k, k:] ** 2, axis=0)
        j = k + int(np.argmax(diag))
        if diag[j - k] <= threshold:
            break
        if j != k:
            a[:, [k, j]] = a[:, [j, k]]
            a[[k, j], :] = a[[j, k], :]
            r[:, [k, j]] = r[:, [j, k]]
            perm[[k, j]] = perm[[j, k]]
        r[k, k] = np.sqrt(diag[j - k])
        r[k, k + 1:] = (a[k, k + 1:] - r[:k, k] @ r[:k, k + 1:]) / r[k, k]
        rank += 1
    return r, perm, rank


def ols(design: np.ndarray, response: np.ndarray, names: Sequence[str]) -> np.ndarray:
    """Least squares via the normal equations of the column-equilibrated design."""
    scale = np.sqrt(np.sum(design ** 2, axis=0))
    scale[scale == 0] = 1.0
    xs = design / scale
    r, perm, rank = pivoted_cholesky(xs.T @ xs)
    p = design.shape[1]
    if rank < p:
        raise SingularFitError([names[i] for i in perm[rank:]])
    rhs = (xs.T @ response)[perm]
    z = np.linalg.solve(r.T, rhs)
    beta_perm = np.linalg.solve(r, z)
    beta = np.empty(p)
    beta[perm] = beta_perm
    # one refinement step against the original system
    resid = response - xs @ beta
    corr = np.empty(p)
    corr[perm] = np.linalg.solve(r, np.linalg.solve(r.T, (xs.T @ resid)[perm]))
    return (beta + corr) / scale


def f_test_pvalue(f_stat: float, df_model: int, df_resid: int) -> float:
    """Upper tail of the F distribution via the regularised incomplete beta."""
    if not np.isfinite(f_stat):
        return 0.0
    if f_stat <= 0:
        return 1.0
    return float(betainc(df_resid / 2.0, df_model / 2.0, df_resid / (df_resid + df_model * f_stat)))


def fit_calibration(pairs: Sequence[PairedSample]) -> CalibrationModel:
    """OLS of fixed PM2.5 on the mobile reading, hour of day, cell and temp/RH."""
    p = len(COVARIATES)
    if len(pairs) < PAIRS_PER_COVARIATE * p:
        raise InputError(f"need >= {PAIRS_PER_COVARIATE * p} co-located pairs, got {len(pairs)}")
    design = _design(pairs)
    if not np.all(np.isfinite(design)):
        raise InputError("non-finite covariates in calibration pairs")
    response = np.array([pr.fixed_pm25 for pr in pairs], dtype=float)
    beta = ols(design, response, COVARIATES)
    fitted = design @ beta
    sse = float(np.sum((response - fitted) ** 2))
    sst = float(np.sum((response - response.mean()) ** 2))
    n = len(pairs)
    df_model, df_resid = p - 1, n - p
    if sst <= 1e-12 * max(1.0, float(np.sum(response ** 2))):
        r2, f_stat, pval = 0.0, 0.0, 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - sse / sst))
        ssr = max(sst - sse, 0.0)
        f_stat = float("inf") if sse == 0 else (ssr / df_model) / (sse / df_resid)
        pval = f_test_pvalue(f_stat, df_model, df_resid)
    return CalibrationModel(dict(zip(COVARIATES, map(float, beta))), r2, f_stat, pval, n)


def apply_calibration(model: CalibrationModel, aggregates: Sequence[MobileAggregate],
                      start_hour: int = 0) -> tuple[list[Label], int]:
    """Fixed-equivalent labels from mobile aggregates, clamped at zero.

    Returns ``(labels, skipped)``; aggregates without temperature or humidity
    are skipped.
    """
    labels = []
    skipped = 0
    for agg in aggregates:
        if not (np.isfinite(agg.temp_mean) and np.isfinite(agg.rh_mean)):
            skipped += 1
            continue
        value = float(model.predict(agg.pm25_median, (start_hour + agg.t) % 24,
                                    agg.cell.x, agg.cell.y, agg.temp_mean, agg.rh_mean))
        labels.append(Label(agg.cell, agg.t, max(value, 0.0), MOBILE_CALIBRATED))
    return labels, skipped


def build_label_set(fixed: Sequence[Label], mobile_cal: Sequence[Label]) -> LabelSet:
    """Union of both label lists; a fixed label wins any (cell, t) collision."""
    merged = {lb.key: lb for lb in mobile_cal}
    for lb in fixed:
        merged[lb.key] = lb
    return LabelSet.from_labels(merged[k] for k in sorted(merged, key=lambda k: (k[2], k[1], k[0])))


def write_report(model: CalibrationModel, path, header: str = "") -> None:
    Path(path).write_text(header + model.to_text(), encoding="utf-8")
