"""Crafted input channels: effective carbs, effective insulin, weighted steps.

All channels are indexed by 5-minute grid slot.  With ``literal=True`` the
carbohydrate decay is measured from the meal time rather than the peak and
only the most recent meal or bolus is tracked.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import StructuralError
from .ingest import EventKind, GriddedSeries
from .kalman import SmoothedSeries


@dataclass(frozen=True)
class FeatureParams:
    beta_inc: float = 0.111
    beta_dec: float = 0.028
    delay_slots: int = 3
    peak_offset_slots: int = 12
    r_insulin: float = 0.07
    step_window_n: int = 10
    literal: bool = False

    def __post_init__(self) -> None:
        for name in ("beta_inc", "beta_dec", "r_insulin"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.delay_slots < self.peak_offset_slots:
            raise ValueError("need 0 < delay_slots < peak_offset_slots")
        if self.step_window_n < 1:
            raise ValueError("step_window_n must be >= 1")


def carb_fraction(delta: int, p: FeatureParams) -> float:
    """Fraction of a meal's carbohydrate active ``delta`` slots after it."""
    if delta <= p.delay_slots:
        return 0.0
    if delta <= p.peak_offset_slots:
        return min(1.0, (delta - p.delay_slots) * p.beta_inc)
    anchor = 0 if p.literal else p.peak_offset_slots
    return max(0.0, 1.0 - (delta - anchor) * p.beta_dec)


def insulin_remaining(dose: float, delta: int, p: FeatureParams) -> float:
    """Insulin still on board ``delta`` slots after a bolus of ``dose`` units."""
    if delta < 0 or dose <= 0:
        return 0.0
    # Beyond ceil(dose / r) the linear decay has crossed zero.
    if delta >= math.ceil(dose / p.r_insulin):
        return 0.0
    return max(0.0, dose - delta * p.r_insulin)


def _active(events: Iterable[tuple[int, float]], t_s: int, literal: bool) -> list[tuple[int, float]]:
    past = [(t, a) for t, a in events if t <= t_s]
    if literal and past:
        return [max(past, key=lambda e: e[0])]
    return past


def effective_carbs(meals: Iterable[tuple[int, float]], t_s: int, p: FeatureParams = FeatureParams()) -> float:
    total = 0.0
    for t_meal, grams in _active(meals, t_s, p.literal):
        total += grams * carb_fraction(t_s - t_meal, p)
    return max(0.0, total)


def effective_insulin(boluses: Iterable[tuple[int, float]], t_s: int, p: FeatureParams = FeatureParams()) -> float:
    total = 0.0
    for t_bolus, dose in _active(boluses, t_s, p.literal):
        total += insulin_remaining(dose, t_s - t_bolus, p)
    return max(0.0, total)


def weighted_steps(steps: GriddedSeries | np.ndarray, t_s: int, p: FeatureParams = FeatureParams()) -> float:
    """``(1/n) * sum_{i<n} (n - i) * steps[t_s - i]``; missing or out-of-range slots count 0."""
    values = steps.values if isinstance(steps, GriddedSeries) else np.asarray(steps, dtype=np.float64)
    n = p.step_window_n
    total = 0.0
    for i in range(n):
        k = t_s - i
        if 0 <= k < len(values) and not math.isnan(values[k]):
            total += (n - i) * values[k]
    return total / n


@dataclass
class ChannelBlock:
    """Four aligned model inputs over one grid.

    ``glucose`` may contain ``NaN`` for missing slots; the other channels are
    total.  ``source`` is ``"raw"`` or ``"smoothed"``.
    """

    start: int
    glucose: np.ndarray
    c_eff: np.ndarray
    i_eff: np.ndarray
    s_avg: np.ndarray
    source: str = "raw"

    def __post_init__(self) -> None:
        n = len(self.glucose)
        if not (len(self.c_eff) == len(self.i_eff) == len(self.s_avg) == n):
            raise StructuralError("channel lengths differ")

    def __len__(self) -> int:
        return len(self.glucose)

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + 5 * np.arange(len(self), dtype=np.int64)

    def matrix(self) -> np.ndarray:
        """``(T, 4)`` array in channel order glucose, c_eff, i_eff, s_avg."""
        return np.stack([self.glucose, self.c_eff, self.i_eff, self.s_avg], axis=1)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("slot_ts,glucose,c_eff,i_eff,s_avg,glucose_missing\n")
        for ts, g, c, i, s in zip(
            self.timestamps.tolist(), self.glucose.tolist(), self.c_eff.tolist(),
            self.i_eff.tolist(), self.s_avg.tolist(),
        ):
            missing = math.isnan(g)
            out.write(f"{ts},{'' if missing else repr(g)},{c!r},{i!r},{s!r},{int(missing)}\n")
        return out.getvalue()


def _impulses(g: GriddedSeries | None) -> list[tuple[int, float]]:
    if g is None:
        return []
    idx = np.flatnonzero(np.nan_to_num(g.values) != 0)
    return [(int(k), float(g.values[k])) for k in idx]


def carbs_channel(meals: list[tuple[int, float]], n: int, p: FeatureParams) -> np.ndarray:
    out = np.zeros(n)
    if p.literal:
        return np.array([effective_carbs(meals, t, p) for t in range(n)])
    # Superposition: add each meal's response curve until it decays to zero.
    horizon = p.peak_offset_slots + int(math.ceil(1.0 / p.beta_dec)) + 1
    curve = np.array([carb_fraction(d, p) for d in range(horizon)])
    for t_meal, grams in meals:
        stop = min(n, t_meal + horizon)
        out[t_meal:stop] += grams * curve[: stop - t_meal]
    return np.maximum(out, 0.0)


def insulin_channel(boluses: list[tuple[int, float]], n: int, p: FeatureParams) -> np.ndarray:
    out = np.zeros(n)
    if p.literal:
        return np.array([effective_insulin(boluses, t, p) for t in range(n)])
    for t_bolus, dose in boluses:
        horizon = math.ceil(dose / p.r_insulin) + 1
        stop = min(n, t_bolus + horizon)
        out[t_bolus:stop] += [insulin_remaining(dose, d, p) for d in range(stop - t_bolus)]
    return np.maximum(out, 0.0)


def steps_channel(steps: np.ndarray, p: FeatureParams) -> np.ndarray:
    n = p.step_window_n
    x = np.nan_to_num(np.asarray(steps, dtype=np.float64))
    weights = np.arange(n, 0, -1, dtype=np.float64)  # n, n-1, ..., 1 for lags 0..n-1
    return np.convolve(x, weights)[: len(x)] / n


def build_channels(
    gridded: Mapping[EventKind, GriddedSeries],
    glucose_source: str = "raw",
    smoothed: SmoothedSeries | None = None,
    p: FeatureParams = FeatureParams(),
) -> ChannelBlock:
    """Assemble the 4-channel block over the CGM grid."""
    cgm = gridded.get(EventKind.CGM)
    if cgm is None:
        raise StructuralError("gridded data has no cgm channel")
    n = len(cgm)
    if glucose_source == "smoothed":
        if smoothed is None:
            raise StructuralError("glucose_source='smoothed' requires a SmoothedSeries")
        if len(smoothed) != n:
            raise StructuralError(f"smoothed length {len(smoothed)} != grid length {n}")
        glucose = np.asarray(smoothed.mean, dtype=np.float64).copy()
    elif glucose_source == "raw":
        if smoothed is not None:
            raise StructuralError("smoothed series given with glucose_source='raw'")
        glucose = cgm.values.copy()
    else:
        raise ValueError(f"unknown glucose_source {glucose_source!r}")

    for kind in (EventKind.MEAL_CARBS, EventKind.BOLUS, EventKind.STEPS):
        g = gridded.get(kind)
        if g is not None and (len(g) != n or g.start != cgm.start):
            raise StructuralError(f"{kind.value} grid does not match the cgm grid")

    c_eff = carbs_channel(_impulses(gridded.get(EventKind.MEAL_CARBS)), n, p)
    i_eff = insulin_channel(_impulses(gridded.get(EventKind.BOLUS)), n, p)
    steps = gridded.get(EventKind.STEPS)
    s_avg = steps_channel(steps.values, p) if steps is not None else np.zeros(n)
    return ChannelBlock(cgm.start, glucose, c_eff, i_eff, s_avg, glucose_source)
