"""Seeded synthetic patients with injected CGM sensor faults.

The latent glucose follows a one-compartment relaxation towards ``G_b``
driven by the same carbohydrate and insulin kinetics used as model
features, so a forecaster fed those features faces a realisable task::

    G(t+1) = G(t) + k_c * dC(t) - k_i * dI(t) - k0 * (G(t) - G_b) + N(0, sigma_p^2)

``dC(t)`` is the rise of effective carbs into slot ``t`` (carb appearance)
and ``dI(t)`` the fall of insulin on board (insulin absorbed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureParams, carbs_channel, insulin_channel
from .ingest import (
    SLOT_MINUTES,
    SLOTS_PER_DAY,
    EventKind,
    GriddedSeries,
    PatientDataset,
    make_stream,
)

GLUCOSE_MIN = 40.0
GLUCOSE_MAX = 400.0
# 2021-12-07 00:00 UTC in epoch minutes; fixed so outputs depend only on the seed.
SYNTH_START = 27313920

MEAL_HOURS = (7.5, 12.5, 19.0)
NIGHT_SLOTS = 6 * 60 // SLOT_MINUTES  # 00:00 - 06:00


@dataclass(frozen=True)
class SynthConfig:
    days: int = 10
    seed: int = 0
    basal_glucose: float = 110.0
    k0: float = 0.02
    k_c: float = 0.4
    k_i: float = 2.0
    sigma_p: float = 1.0
    sigma_s: float = 5.0
    spike_prob: float = 0.002
    spike_range: tuple[float, float] = (40.0, 80.0)
    dropout_prob: float = 0.003
    dropout_len: tuple[int, int] = (1, 6)
    attenuation_prob: float = 0.001
    attenuation_depth: tuple[float, float] = (0.2, 0.4)
    attenuation_len: tuple[int, int] = (6, 24)
    meals_per_day: int = 3
    meal_grams: tuple[float, float] = (30.0, 90.0)
    meal_jitter_slots: int = 6
    bolus: bool = True
    carb_ratio: float = 10.0
    bolus_noise: float = 0.2
    fingersticks_per_day: int = 6
    fingerstick_sd: float = 2.0
    # Explicit (slot, grams) meals replace the random schedule when given.
    meals: tuple[tuple[int, float], ...] | None = None
    initial_glucose: float | None = None

    def __post_init__(self) -> None:
        if self.days < 1:
            raise ValueError("days must be >= 1")
        for name in ("spike_prob", "dropout_prob", "attenuation_prob", "bolus_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("k0", "k_c", "k_i", "carb_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.k0 >= 1:
            raise ValueError("k0 must be < 1 for a stable relaxation")
        if self.sigma_p < 0 or self.sigma_s < 0:
            raise ValueError("noise scales must be >= 0")

    @property
    def n_slots(self) -> int:
        return self.days * SLOTS_PER_DAY


@dataclass(frozen=True)
class Fault:
    kind: str  # "spike" | "dropout" | "attenuation"
    start: int  # slot index
    length: int = 1
    magnitude: float = 0.0  # spike offset (mg/dl) or attenuation depth

    def slots(self) -> range:
        return range(self.start, self.start + self.length)


@dataclass
class SynthOutput:
    latent_truth: GriddedSeries
    dataset: PatientDataset
    faults: list[Fault] = field(default_factory=list)
    clean_cgm: GriddedSeries | None = None  # sensor noise only, before faults


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def _meal_schedule(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[int, float]]:
    if cfg.meals is not None:
        return [(int(k), float(g)) for k, g in cfg.meals if 0 <= k < cfg.n_slots]
    meals = []
    hours = MEAL_HOURS[: cfg.meals_per_day] if cfg.meals_per_day <= 3 else tuple(
        7.0 + 14.0 * i / (cfg.meals_per_day - 1) for i in range(cfg.meals_per_day)
    )
    for day in range(cfg.days):
        for h in hours:
            jitter = int(rng.integers(-cfg.meal_jitter_slots, cfg.meal_jitter_slots + 1))
            slot = day * SLOTS_PER_DAY + int(round(h * 60 / SLOT_MINUTES)) + jitter
            grams = float(np.round(rng.uniform(*cfg.meal_grams)))
            if 0 <= slot < cfg.n_slots:
                meals.append((slot, grams))
    return meals


def _bolus_schedule(
    cfg: SynthConfig, meals: list[tuple[int, float]], rng: np.random.Generator
) -> list[tuple[int, float]]:
    if not cfg.bolus:
        return []
    out = []
    for slot, grams in meals:
        dose = grams / cfg.carb_ratio * (1.0 + rng.uniform(-cfg.bolus_noise, cfg.bolus_noise))
        dose = float(np.round(dose, 1))
        if dose > 0:
            out.append((slot, dose))
    return out


def _steps(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Integer counts per slot: light daytime background plus 2-4 walking bouts a day."""
    steps = np.zeros(cfg.n_slots)
    day_lo, day_hi = 7 * 12, 22 * 12
    for day in range(cfg.days):
        base = day * SLOTS_PER_DAY
        steps[base + day_lo : base + day_hi] = rng.poisson(15.0, day_hi - day_lo)
        for _ in range(int(rng.integers(2, 5))):
            length = int(rng.integers(3, 13))
            start = base + int(rng.integers(day_lo, day_hi - length))
            steps[start : start + length] += rng.integers(300, 601, length)
    return steps


def simulate_latent(
    cfg: SynthConfig,
    meals: list[tuple[int, float]],
    boluses: list[tuple[int, float]],
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Integrate the latent glucose recursion over ``cfg.n_slots`` slots."""
    n = cfg.n_slots
    fp = FeatureParams()
    c_eff = carbs_channel(meals, n, fp)
    i_eff = insulin_channel(boluses, n, fp)
    carb_in = np.maximum(np.diff(c_eff, prepend=0.0), 0.0)
    insulin_in = np.maximum(-np.diff(i_eff, prepend=0.0), 0.0)
    noise = np.zeros(n) if cfg.sigma_p == 0 or rng is None else rng.normal(0.0, cfg.sigma_p, n)

    g = np.empty(n)
    g[0] = cfg.basal_glucose if cfg.initial_glucose is None else cfg.initial_glucose
    g[0] = min(max(g[0], GLUCOSE_MIN), GLUCOSE_MAX)
    for t in range(n - 1):
        nxt = (
            g[t]
            + cfg.k_c * carb_in[t]
            - cfg.k_i * insulin_in[t]
            - cfg.k0 * (g[t] - cfg.basal_glucose)
            + noise[t]
        )
        g[t + 1] = min(max(nxt, GLUCOSE_MIN), GLUCOSE_MAX)
    return g


def draw_faults(n: int, cfg: SynthConfig, seed: int) -> list[Fault]:
    """Sample a fault log for an ``n``-slot series.

    The first and last slot are never dropped so the CGM stream spans the
    whole grid.  Spikes land only on slots that survive dropout.
    """
    rng = _rng(seed, 4)
    faults: list[Fault] = []

    k = 0
    while k < n:
        if k % SLOTS_PER_DAY < NIGHT_SLOTS and rng.random() < cfg.attenuation_prob:
            length = min(int(rng.integers(cfg.attenuation_len[0], cfg.attenuation_len[1] + 1)), n - k)
            depth = float(rng.uniform(*cfg.attenuation_depth))
            faults.append(Fault("attenuation", k, length, depth))
            k += length
        else:
            k += 1

    dropped = np.zeros(n, dtype=bool)
    k = 1
    while k < n - 1:
        if rng.random() < cfg.dropout_prob:
            length = min(int(rng.integers(cfg.dropout_len[0], cfg.dropout_len[1] + 1)), n - 1 - k)
            faults.append(Fault("dropout", k, length))
            dropped[k : k + length] = True
            k += length
        else:
            k += 1

    draws = rng.random(n)
    signs = rng.choice([-1.0, 1.0], n)
    mags = rng.uniform(cfg.spike_range[0], cfg.spike_range[1], n)
    for k in np.flatnonzero((draws < cfg.spike_prob) & ~dropped):
        faults.append(Fault("spike", int(k), 1, float(signs[k] * mags[k])))
    return faults


def apply_faults(clean: GriddedSeries, faults: list[Fault]) -> tuple[GriddedSeries, list[Fault]]:
    """Apply attenuation, then spikes, then dropouts; clip to the sensor range.

    Returns the faulted series and the log of faults that left a trace.  A
    spike whose offset is entirely swallowed by clipping, or that hits a
    dropped slot, is not logged; a clipped spike is logged with its
    realised offset.
    """
    v = clean.values.copy()
    n = len(v)
    kept: list[Fault] = []
    for f in faults:
        if f.kind == "attenuation" and f.length > 0 and 0 <= f.start < n:
            sl = slice(f.start, min(n, f.start + f.length))
            v[sl] *= 1.0 - f.magnitude
            kept.append(Fault(f.kind, f.start, sl.stop - sl.start, f.magnitude))
    v = np.clip(v, GLUCOSE_MIN, GLUCOSE_MAX)
    dropped = np.zeros(n, dtype=bool)
    for f in faults:
        if f.kind == "dropout" and 0 <= f.start < n:
            dropped[f.start : f.start + f.length] = True
    for f in faults:
        if f.kind == "spike" and 0 <= f.start < n and not dropped[f.start]:
            before = v[f.start]
            v[f.start] = min(max(before + f.magnitude, GLUCOSE_MIN), GLUCOSE_MAX)
            if v[f.start] != before:
                kept.append(Fault("spike", f.start, 1, float(v[f.start] - before)))
    for f in faults:
        if f.kind == "dropout" and 0 <= f.start < n:
            stop = min(n, f.start + f.length)
            v[f.start : stop] = np.nan
            kept.append(Fault("dropout", f.start, stop - f.start))
    for f in faults:
        if f.kind not in ("spike", "dropout", "attenuation"):
            raise ValueError(f"unknown fault kind {f.kind!r}")
    kept.sort(key=lambda f: (f.start, f.kind))
    return GriddedSeries(clean.start, v), kept


def inject_faults(
    clean: GriddedSeries, cfg: SynthConfig, seed: int, faults: list[Fault] | None = None
) -> tuple[GriddedSeries, list[Fault]]:
    """Draw (or take the given) faults and apply them to ``clean``."""
    if faults is None:
        faults = draw_faults(len(clean), cfg, seed)
    return apply_faults(clean, faults)


def generate(cfg: SynthConfig) -> SynthOutput:
    """One synthetic patient, fully determined by ``cfg`` (including its seed)."""
    n = cfg.n_slots
    meals = _meal_schedule(cfg, _rng(cfg.seed, 0))
    boluses = _bolus_schedule(cfg, meals, _rng(cfg.seed, 1))
    latent = simulate_latent(cfg, meals, boluses, _rng(cfg.seed, 2))

    sensor_rng = _rng(cfg.seed, 3)
    noisy = latent + (sensor_rng.normal(0.0, cfg.sigma_s, n) if cfg.sigma_s > 0 else 0.0)
    clean = GriddedSeries(SYNTH_START, np.clip(noisy, GLUCOSE_MIN, GLUCOSE_MAX))
    cgm, faults = inject_faults(clean, cfg, cfg.seed)

    steps = _steps(cfg, _rng(cfg.seed, 5))
    ts = SYNTH_START + SLOT_MINUTES * np.arange(n, dtype=np.int64)

    fs_rng = _rng(cfg.seed, 6)
    finger = []
    for day in range(cfg.days):
        # Waking hours only, at 1-2 minutes past a slot so readings sit off the grid.
        picks = np.sort(fs_rng.choice(np.arange(7 * 12, 23 * 12), cfg.fingersticks_per_day, replace=False))
        for k in picks + day * SLOTS_PER_DAY:
            value = latent[k] + fs_rng.normal(0.0, cfg.fingerstick_sd)
            finger.append((int(ts[k]) + int(fs_rng.integers(1, 3)), float(np.round(value, 1))))

    present = ~np.isnan(cgm.values)
    streams = {
        EventKind.CGM: make_stream(EventKind.CGM, zip(ts[present].tolist(), cgm.values[present].tolist())),
        EventKind.MEAL_CARBS: make_stream(EventKind.MEAL_CARBS, [(int(ts[k]), g) for k, g in meals]),
        EventKind.STEPS: make_stream(EventKind.STEPS, zip(ts.tolist(), steps.tolist())),
        EventKind.FINGERSTICK: make_stream(EventKind.FINGERSTICK, finger),
    }
    if boluses:
        streams[EventKind.BOLUS] = make_stream(EventKind.BOLUS, [(int(ts[k]), d) for k, d in boluses])
    dataset = PatientDataset(f"synth-{cfg.seed}", streams)
    return SynthOutput(GriddedSeries(SYNTH_START, latent), dataset, faults, clean)
