"""Forecast metrics, fingerstick comparison and per-patient reports."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import StructuralError
from .ingest import EventStream, GriddedSeries, nearest_sample
from .train import Predictions

SUMMARY_COLUMNS = ("patient", "ph", "source", "n", "rmse_raw", "rmse_smoothed", "mae", "baseline")
ANCHOR_COLUMNS = ("anchor_ts", "mu", "sigma2", "ref_raw", "ref_smoothed")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise StructuralError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise StructuralError("metrics need at least one pair")
    return a, b


def rmse(pred, ref) -> float:
    """Root of the mean squared residual (no extra square on the prediction)."""
    a, b = _pair(pred, ref)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class FingerstickMatch:
    n_matched: int
    n_unmatched: int
    mae: float | None


def fingerstick_mae(
    series: GriddedSeries, fingerstick: EventStream | None, tolerance_minutes: int = 5
) -> FingerstickMatch:
    """MAE between fingerstick readings and the nearest in-tolerance grid value."""
    if tolerance_minutes < 0:
        raise ValueError("tolerance_minutes must be >= 0")
    if fingerstick is None or len(fingerstick) == 0:
        return FingerstickMatch(0, 0, None)
    diffs = []
    unmatched = 0
    for ts, ref in fingerstick.events:
        v = nearest_sample(series, ts, tolerance_minutes)
        if v is None:
            unmatched += 1
        else:
            diffs.append(abs(v - ref))
    return FingerstickMatch(len(diffs), unmatched, float(np.mean(diffs)) if diffs else None)


def persistence_baseline(glucose, ph_slots: int) -> tuple[np.ndarray, np.ndarray]:
    """Last-value forecasts: ``(anchors, predictions)`` with prediction = glucose[anchor].

    ``glucose`` is a :class:`ChannelBlock` or a 1-d array.  Only anchors
    whose own value and target value ``ph_slots`` later are present are
    returned.
    """
    g = np.asarray(getattr(glucose, "glucose", glucose), dtype=np.float64)
    if len(g) <= ph_slots:
        return np.empty(0, dtype=np.int64), np.empty(0)
    ok = ~np.isnan(g[:-ph_slots]) & ~np.isnan(g[ph_slots:])
    anchors = np.flatnonzero(ok)
    return anchors, g[anchors]


def persistence_rmse(glucose: np.ndarray, ph_slots: int, reference: np.ndarray | None = None) -> float:
    """RMSE of the persistence forecast against ``reference`` (default: ``glucose``) ``ph`` later."""
    g = np.asarray(getattr(glucose, "glucose", glucose), dtype=np.float64)
    ref = g if reference is None else np.asarray(reference, dtype=np.float64)
    anchors, pred = persistence_baseline(g, ph_slots)
    target = ref[anchors + ph_slots]
    ok = ~np.isnan(target)
    return rmse(pred[ok], target[ok])


def reference_at(ref: np.ndarray, slots: np.ndarray) -> np.ndarray:
    """``ref[slots]`` with out-of-range slots reported as missing."""
    ref = np.asarray(ref, dtype=np.float64)
    out = np.full(len(slots), np.nan)
    inside = (slots >= 0) & (slots < len(ref))
    out[inside] = ref[slots[inside]]
    return out


@dataclass
class EvalReport:
    patient_id: str
    ph_minutes: int
    glucose_source: str
    n_predictions: int
    rmse_vs_raw: float | None
    rmse_vs_smoothed: float | None
    mae: float | None
    baseline_rmse: float | None
    anchor_ts: np.ndarray = field(repr=False)
    mu: np.ndarray = field(repr=False)
    sigma2: np.ndarray = field(repr=False)
    ref_raw: np.ndarray = field(repr=False)
    ref_smoothed: np.ndarray = field(repr=False)
    fingerstick: FingerstickMatch | None = None

    def summary_row(self) -> tuple:
        return (
            self.patient_id, self.ph_minutes, self.glucose_source, self.n_predictions,
            self.rmse_vs_raw, self.rmse_vs_smoothed, self.mae, self.baseline_rmse,
        )

    def anchors_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(ANCHOR_COLUMNS) + "\n")
        for row in zip(self.anchor_ts.tolist(), self.mu.tolist(), self.sigma2.tolist(),
                       self.ref_raw.tolist(), self.ref_smoothed.tolist()):
            out.write(",".join(_cell(v) for v in row) + "\n")
        return out.getvalue()

    def plot_csv(self) -> str:
        """Mean, one-SD band and both references per anchor."""
        out = io.StringIO()
        out.write("anchor_ts,mu,lower,upper,ref_raw,ref_smoothed\n")
        sd = np.sqrt(self.sigma2)
        for row in zip(self.anchor_ts.tolist(), self.mu.tolist(), (self.mu - sd).tolist(),
                       (self.mu + sd).tolist(), self.ref_raw.tolist(), self.ref_smoothed.tolist()):
            out.write(",".join(_cell(v) for v in row) + "\n")
        return out.getvalue()


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _rmse_where(pred: np.ndarray, ref: np.ndarray) -> float | None:
    ok = ~np.isnan(ref)
    return rmse(pred[ok], ref[ok]) if ok.any() else None


def build_report(
    predictions: Predictions,
    raw_glucose: GriddedSeries,
    smoothed_glucose: np.ndarray | None,
    *,
    patient_id: str,
    ph_slots: int,
    glucose_source: str,
    fingerstick: EventStream | None = None,
    tolerance_minutes: int = 5,
) -> EvalReport:
    """Score forecasts against both glucose references.

    Each RMSE only uses anchors whose reference value at the target slot is
    present.  ``mae`` and the persistence baseline use the reference that
    matches ``glucose_source``; the baseline forecasts from that same
    channel at the anchor.
    """
    if len(predictions) == 0:
        raise StructuralError("cannot report on zero predictions")
    target = predictions.anchors + ph_slots
    ref_raw = reference_at(raw_glucose.values, target)
    smooth = None if smoothed_glucose is None else np.asarray(smoothed_glucose, dtype=np.float64)
    ref_smoothed = np.full(len(target), np.nan) if smooth is None else reference_at(smooth, target)
    source = smooth if glucose_source == "smoothed" and smooth is not None else raw_glucose.values
    ref_source = ref_smoothed if source is smooth else ref_raw

    mu = predictions.mu
    ok = ~np.isnan(ref_source)
    baseline = None
    if ok.any():
        last = reference_at(source, predictions.anchors)
        both = ok & ~np.isnan(last)
        baseline = rmse(last[both], ref_source[both]) if both.any() else None
    fs = None
    if fingerstick is not None:
        grid = raw_glucose if source is raw_glucose.values else GriddedSeries(raw_glucose.start, source)
        fs = fingerstick_mae(grid, fingerstick, tolerance_minutes)
    return EvalReport(
        patient_id=patient_id,
        ph_minutes=5 * ph_slots,
        glucose_source=glucose_source,
        n_predictions=len(predictions),
        rmse_vs_raw=_rmse_where(mu, ref_raw),
        rmse_vs_smoothed=None if smooth is None else _rmse_where(mu, ref_smoothed),
        mae=mae(mu[ok], ref_source[ok]) if ok.any() else None,
        baseline_rmse=baseline,
        anchor_ts=predictions.anchor_ts,
        mu=mu,
        sigma2=predictions.sigma2,
        ref_raw=ref_raw,
        ref_smoothed=ref_smoothed,
        fingerstick=fs,
    )


def _mean_of(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summary_rows(reports: Sequence[EvalReport], with_mean: bool = True) -> list[tuple]:
    """Report rows in input order, plus an arithmetic-mean row of the metrics."""
    rows = [r.summary_row() for r in reports]
    if with_mean and len(reports) > 1:
        rows.append((
            "mean", "", "", sum(r.n_predictions for r in reports),
            _mean_of([r.rmse_vs_raw for r in reports]),
            _mean_of([r.rmse_vs_smoothed for r in reports]),
            _mean_of([r.mae for r in reports]),
            _mean_of([r.baseline_rmse for r in reports]),
        ))
    return rows


def summary_csv(reports: Sequence[EvalReport]) -> str:
    out = io.StringIO()
    out.write(",".join(SUMMARY_COLUMNS) + "\n")
    for row in summary_rows(reports):
        out.write(",".join(_cell(v) for v in row) + "\n")
    return out.getvalue()


def summary_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text version of :func:`summary_csv` (metrics to 2 decimals)."""
    def show(v):
        if v is None:
            return "-"
        return f"{v:.2f}" if isinstance(v, float) else str(v)

    rows = [SUMMARY_COLUMNS] + [tuple(show(v) for v in row) for row in summary_rows(reports)]
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(SUMMARY_COLUMNS))]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
