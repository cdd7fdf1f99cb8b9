import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyco.ingest import SLOTS_PER_DAY, EventKind, GriddedSeries, align_to_grid, dataset_to_csv
from glyco.synth import (
    GLUCOSE_MAX,
    GLUCOSE_MIN,
    SYNTH_START,
    Fault,
    SynthConfig,
    apply_faults,
    draw_faults,
    generate,
    inject_faults,
    simulate_latent,
)

QUIET = dict(sigma_p=0.0, sigma_s=0.0, spike_prob=0.0, dropout_prob=0.0, attenuation_prob=0.0)


def test_equilibrium_is_constant():
    cfg = SynthConfig(days=1, meals=(), **QUIET)
    out = generate(cfg)
    assert np.all(out.latent_truth.values == cfg.basal_glucose)
    assert len(out.latent_truth) == SLOTS_PER_DAY


def test_latent_relaxes_to_basal():
    cfg = SynthConfig(days=1, meals=(), initial_glucose=200.0, **QUIET)
    g = simulate_latent(cfg, [], [])
    dev = g - cfg.basal_glucose
    assert np.all(np.diff(dev) < 0)
    # Pure relaxation: dev(t) = dev(0) (1 - k0)^t.
    np.testing.assert_allclose(dev, 90.0 * (1 - cfg.k0) ** np.arange(len(g)), rtol=1e-10)


def test_single_meal_peaks_within_an_hour_or_two():
    cfg = SynthConfig(days=1, meals=((24, 60.0),), bolus=False, **QUIET)
    g = generate(cfg).latent_truth.values
    peak = int(np.argmax(g))
    assert 60 <= (peak - 24) * 5 <= 120
    assert g[peak] > cfg.basal_glucose
    assert np.all(g[:24] == cfg.basal_glucose)
    assert abs(g[-1] - cfg.basal_glucose) < abs(g[peak] - cfg.basal_glucose) / 10


def test_same_seed_same_bytes():
    a = generate(SynthConfig(days=2, seed=5))
    b = generate(SynthConfig(days=2, seed=5))
    assert dataset_to_csv(a.dataset) == dataset_to_csv(b.dataset)
    assert a.latent_truth.values.tobytes() == b.latent_truth.values.tobytes()
    assert a.faults == b.faults
    c = generate(SynthConfig(days=2, seed=6))
    assert dataset_to_csv(c.dataset) != dataset_to_csv(a.dataset)


def test_dataset_layout():
    out = generate(SynthConfig(days=3, seed=1))
    grid = align_to_grid(out.dataset)
    cgm = grid[EventKind.CGM]
    assert cgm.start == out.latent_truth.start == SYNTH_START
    assert len(cgm) == 3 * SLOTS_PER_DAY
    assert not np.isnan(cgm.values[[0, -1]]).any()
    assert len(out.dataset.streams[EventKind.FINGERSTICK]) == 3 * 6
    assert len(out.dataset.streams[EventKind.MEAL_CARBS]) == 9


def test_fingersticks_track_latent():
    out = generate(SynthConfig(days=5, seed=2))
    lat = out.latent_truth
    diffs = [v - lat.values[(ts - lat.start) // 5] for ts, v in out.dataset.streams[EventKind.FINGERSTICK].events]
    assert np.std(diffs) < 4.0 and abs(np.mean(diffs)) < 1.5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 10.0), st.floats(0.1, 5.0))
def test_latent_total_and_in_range(seed, sigma_p, k_c):
    out = generate(SynthConfig(days=2, seed=seed, sigma_p=sigma_p, k_c=k_c))
    g = out.latent_truth.values
    assert not np.isnan(g).any()
    assert g.min() >= GLUCOSE_MIN and g.max() <= GLUCOSE_MAX


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_noise_free_fault_free_cgm_equals_latent(seed):
    out = generate(SynthConfig(days=1, seed=seed, sigma_s=0.0, spike_prob=0.0,
                               dropout_prob=0.0, attenuation_prob=0.0))
    cgm = align_to_grid(out.dataset)[EventKind.CGM]
    np.testing.assert_array_equal(cgm.values, out.latent_truth.values)
    assert out.faults == []


# -- faults ------------------------------------------------------------------


def clean_series(n=100, seed=0):
    return GriddedSeries(0, 150 + np.random.default_rng(seed).normal(0, 10, n))


def test_zero_rates_identity():
    clean = clean_series()
    cfg = SynthConfig(spike_prob=0.0, dropout_prob=0.0, attenuation_prob=0.0)
    out, log = inject_faults(clean, cfg, seed=3)
    np.testing.assert_array_equal(out.values, clean.values)
    assert log == []


def test_forced_spike_is_local():
    clean = clean_series()
    out, log = apply_faults(clean, [Fault("spike", 40, 1, 60.0)])
    diff = np.flatnonzero(out.values != clean.values)
    assert diff.tolist() == [40]
    assert out.values[40] == pytest.approx(clean.values[40] + 60.0)
    assert log == [Fault("spike", 40, 1, pytest.approx(60.0))]


def test_forced_dropout_run_of_four():
    clean = clean_series()
    out, _ = apply_faults(clean, [Fault("dropout", 10, 4)])
    missing = np.flatnonzero(np.isnan(out.values))
    assert missing.tolist() == [10, 11, 12, 13]


def test_attenuation_scales_run():
    clean = clean_series()
    out, _ = apply_faults(clean, [Fault("attenuation", 5, 3, 0.25)])
    np.testing.assert_allclose(out.values[5:8], 0.75 * clean.values[5:8], rtol=1e-15)
    np.testing.assert_array_equal(out.values[8:], clean.values[8:])


def test_clipped_spike_logs_realised_offset():
    clean = GriddedSeries(0, np.array([390.0, 390.0]))
    out, log = apply_faults(clean, [Fault("spike", 0, 1, 50.0)])
    assert out.values[0] == GLUCOSE_MAX and log[0].magnitude == pytest.approx(10.0)
    out, log = apply_faults(GriddedSeries(0, np.array([400.0])), [Fault("spike", 0, 1, 50.0)])
    assert log == []


def test_unknown_fault_kind():
    with pytest.raises(ValueError):
        apply_faults(clean_series(), [Fault("melt", 0)])


def explain(clean: np.ndarray, log: list[Fault]) -> np.ndarray:
    """Rebuild the faulted series from the log alone."""
    v = clean.copy()
    for f in log:
        if f.kind == "attenuation":
            v[f.start : f.start + f.length] *= 1 - f.magnitude
    v = np.clip(v, GLUCOSE_MIN, GLUCOSE_MAX)
    for f in log:
        if f.kind == "spike":
            v[f.start] += f.magnitude
    for f in log:
        if f.kind == "dropout":
            v[f.start : f.start + f.length] = np.nan
    return v


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fault_log_consistent_with_series(seed):
    cfg = SynthConfig(spike_prob=0.05, dropout_prob=0.03, attenuation_prob=0.05)
    clean = clean_series(n=SLOTS_PER_DAY, seed=seed)
    out, log = inject_faults(clean, cfg, seed)
    np.testing.assert_allclose(explain(clean.values, log), out.values, rtol=0, atol=1e-9)
    # Every logged fault leaves a trace.
    for f in log:
        if f.kind == "dropout":
            assert np.isnan(out.values[f.slots()]).all()
        elif f.kind == "spike":
            assert f.magnitude != 0.0
    assert not np.isnan(out.values[[0, -1]]).any()


def test_attenuation_only_starts_at_night():
    cfg = SynthConfig(days=4, attenuation_prob=0.5)
    faults = draw_faults(cfg.n_slots, cfg, seed=0)
    att = [f for f in faults if f.kind == "attenuation"]
    assert att and all(f.start % SLOTS_PER_DAY < 72 for f in att)
    assert all(6 <= f.length <= 24 and 0.2 <= f.magnitude <= 0.4 for f in att)


def test_generated_faults_visible_in_dataset():
    out = generate(SynthConfig(days=10, seed=4))
    cgm = align_to_grid(out.dataset)[EventKind.CGM].values
    drop = {k for f in out.faults if f.kind == "dropout" for k in f.slots()}
    assert set(np.flatnonzero(np.isnan(cgm)).tolist()) == drop
    assert {f.kind for f in out.faults} >= {"dropout", "spike"}


@pytest.mark.parametrize("kw", [dict(days=0), dict(spike_prob=1.5), dict(k_c=0.0), dict(sigma_s=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)
