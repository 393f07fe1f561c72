"""Spatial clustering EM: phase model, initialization, convergence, masks."""

import numpy as np
import pytest

from arraysep import (
    DataError,
    MesslConfig,
    NumericalError,
    SceneSpec,
    SourceSpec,
    Spectrogram,
    StftConfig,
    binarize,
    default_delay_grid,
    observed_ipd,
    render_scene,
    run_em,
    speechlike_signal,
    stft,
)
from arraysep.signal import MaskGrid, Waveform
from arraysep.spatial_em import _wrap


def _delayed_scene(delay: float, seed: int = 0, noise: float = 0.0,
                   duration: float = 0.5, n_channels: int = 2):
    sig = speechlike_signal(duration, 16000, np.random.default_rng(seed))
    delays = tuple(0.0 if c == 0 else delay for c in range(n_channels))
    gains = (1.0,) * n_channels
    spec = SceneSpec(
        sources=(SourceSpec(signal=sig, delays=delays, gains=gains),),
        n_channels=n_channels, sample_rate=16000,
        diffuse_noise_level=noise, seed=seed,
    )
    return render_scene(spec)


def _channel_specs(render, cfg):
    return [stft(render.mixture.channel(c), cfg) for c in
            range(render.mixture.n_channels)]


SMALL = StftConfig(window_size=64, hop_size=16)


# ------------------------------------------------------------------- wrap

def test_wrap_basic_values():
    assert _wrap(np.array([0.1]))[0] == pytest.approx(0.1)
    assert _wrap(np.array([2.0 * np.pi + 0.1]))[0] == pytest.approx(0.1)
    assert _wrap(np.array([-2.0 * np.pi - 0.1]))[0] == pytest.approx(-0.1)
    assert _wrap(np.array([3.0]))[0] == pytest.approx(3.0)


def test_wrap_range_property():
    gen = np.random.default_rng(0)
    x = gen.uniform(-50.0, 50.0, size=1000)
    w = _wrap(x)
    assert np.all(w <= np.pi + 1e-12) and np.all(w >= -np.pi - 1e-12)
    # Wrapped values differ from the input by an exact multiple of 2 pi.
    k = (x - w) / (2.0 * np.pi)
    np.testing.assert_allclose(k, np.round(k), atol=1e-9)


# -------------------------------------------------------------------- ipd

def test_ipd_constant_phase_offset():
    cfg = StftConfig(window_size=16, hop_size=4)
    gen = np.random.default_rng(1)
    base = gen.standard_normal((9, 5)) + 1j * gen.standard_normal((9, 5))
    s0 = Spectrogram(bins=base, config=cfg, sample_rate=16000)
    s1 = Spectrogram(bins=base * np.exp(0.3j), config=cfg, sample_rate=16000)
    phi, pairs = observed_ipd([s0, s1])
    assert pairs == (1,)
    np.testing.assert_allclose(phi[0], 0.3, atol=1e-12)


def test_ipd_antisymmetric_in_reference():
    render = _delayed_scene(1.5, noise=0.01)
    specs = _channel_specs(render, SMALL)
    phi_a, _ = observed_ipd(specs, reference_channel=0)
    phi_b, _ = observed_ipd(specs, reference_channel=1)
    np.testing.assert_allclose(_wrap(phi_a[0] + phi_b[0]), 0.0, atol=1e-12)


def test_ipd_slope_matches_delay():
    """Oracle: a pure delay d gives phase -omega d; regress the slope."""
    d = 2.0
    render = _delayed_scene(d)
    specs = _channel_specs(render, SMALL)
    phi, _ = observed_ipd(specs)
    omega = 2.0 * np.pi * np.arange(SMALL.n_freq) / SMALL.window_size

    # Use bins where both wrapping and low energy are no concern.
    mags = np.abs(specs[0].bins) * np.abs(specs[1].bins)
    slopes = []
    for f in range(2, 8):  # |omega d| < pi/2 for d = 2
        w = mags[f]
        if w.sum() > 0:
            slopes.append(np.sum(w * phi[0][f]) / np.sum(w) / omega[f])
    est = np.mean(slopes)
    assert est == pytest.approx(-d, abs=0.1)


def test_ipd_requires_matching_shapes():
    cfg = StftConfig(window_size=16, hop_size=4)
    a = Spectrogram(bins=np.ones((9, 4), dtype=complex), config=cfg,
                    sample_rate=16000)
    b = Spectrogram(bins=np.ones((9, 5), dtype=complex), config=cfg,
                    sample_rate=16000)
    with pytest.raises(DataError, match="share shape"):
        observed_ipd([a, b])
    with pytest.raises(DataError, match="at least two"):
        observed_ipd([a])


# --------------------------------------------------------------------- em

def test_em_matches_exhaustive_scan_oracle():
    """One component, one iteration: the fitted delay must equal the
    exhaustive minimizer of the wrapped squared residual on the grid."""
    render = _delayed_scene(1.75, seed=3)
    specs = _channel_specs(render, SMALL)
    cfg = MesslConfig(n_sources=1, n_iterations=1, use_garbage=False)
    result = run_em(specs, cfg)

    phi, _ = observed_ipd(specs)
    omega = 2.0 * np.pi * np.arange(SMALL.n_freq) / SMALL.window_size
    grid = cfg.delay_grid
    costs = []
    for tau in grid:
        r = _wrap(phi[0] + tau * omega[:, None])
        costs.append(np.sum(r * r))
    oracle = grid[int(np.argmin(costs))]
    assert result.params.delays[0, 0] == oracle


def test_em_recovers_known_delays():
    for d in (-3.0, -0.5, 1.25, 4.0):
        render = _delayed_scene(d, seed=int(abs(d) * 10), noise=0.005)
        specs = _channel_specs(render, SMALL)
        cfg = MesslConfig(n_sources=1, n_iterations=8)
        result = run_em(specs, cfg)
        est = result.params.delays[result.target_index, 0]
        assert est == pytest.approx(d, abs=cfg.grid_step), f"true {d} est {est}"


def test_em_loglik_monotone():
    render = _delayed_scene(2.5, seed=5, noise=0.05)
    specs = _channel_specs(render, SMALL)
    result = run_em(specs, MesslConfig(n_sources=2, n_iterations=10))
    trace = result.loglik_trace
    assert len(trace) >= 2
    assert np.all(np.diff(trace) >= -1e-9 * (np.abs(trace[:-1]) + 1.0))


def test_em_posteriors_sum_to_one():
    render = _delayed_scene(1.0, seed=6, noise=0.1)
    specs = _channel_specs(render, SMALL)
    result = run_em(specs, MesslConfig(n_sources=2, n_iterations=5))
    total = np.zeros(result.masks[0].values.shape)
    for m in result.masks:
        assert m.values.min() >= 0.0 and m.values.max() <= 1.0
        total += m.values
    np.testing.assert_allclose(total, 1.0, atol=1e-9)
    assert len(result.masks) == 3  # two sources plus garbage


def test_em_scale_invariant_power_of_two():
    # Scaling every channel by 4 shifts only float exponents, so phases
    # and therefore the whole EM run are bit identical.
    render = _delayed_scene(1.5, seed=7, noise=0.02)
    specs = _channel_specs(render, SMALL)
    scaled = [Spectrogram(bins=4.0 * s.bins, config=s.config,
                          sample_rate=s.sample_rate) for s in specs]
    cfg = MesslConfig(n_sources=1, n_iterations=6)
    a = run_em(specs, cfg)
    b = run_em(scaled, cfg)
    np.testing.assert_array_equal(a.target_mask.values, b.target_mask.values)
    np.testing.assert_array_equal(a.params.delays, b.params.delays)


def test_em_scale_invariant_generic():
    render = _delayed_scene(1.5, seed=8, noise=0.02)
    specs = _channel_specs(render, SMALL)
    scaled = [Spectrogram(bins=1.7 * s.bins, config=s.config,
                          sample_rate=s.sample_rate) for s in specs]
    cfg = MesslConfig(n_sources=1, n_iterations=6)
    a = run_em(specs, cfg)
    b = run_em(scaled, cfg)
    np.testing.assert_allclose(a.target_mask.values, b.target_mask.values,
                               atol=1e-7)


def test_em_two_sources_find_both_delays():
    sig_a = speechlike_signal(0.6, 16000, np.random.default_rng(10))
    sig_b = speechlike_signal(0.6, 16000, np.random.default_rng(11))
    spec = SceneSpec(
        sources=(
            SourceSpec(signal=sig_a, delays=(0.0, 3.0), gains=(1.0, 1.0)),
            SourceSpec(signal=sig_b, delays=(0.0, -3.0), gains=(1.0, 1.0)),
        ),
        n_channels=2, sample_rate=16000, diffuse_noise_level=0.003, seed=12,
    )
    render = render_scene(spec)
    specs = _channel_specs(render, SMALL)
    result = run_em(specs, MesslConfig(n_sources=2, n_iterations=10))
    fitted = np.sort(result.params.delays[:, 0])
    assert fitted[0] == pytest.approx(-3.0, abs=0.5)
    assert fitted[1] == pytest.approx(3.0, abs=0.5)


def test_em_component_masks_track_their_source():
    sig_a = speechlike_signal(0.6, 16000, np.random.default_rng(20))
    sig_b = speechlike_signal(0.6, 16000, np.random.default_rng(21))
    spec = SceneSpec(
        sources=(
            SourceSpec(signal=sig_a, delays=(0.0, 3.0), gains=(1.0, 1.0)),
            SourceSpec(signal=sig_b, delays=(0.0, -3.0), gains=(1.0, 1.0)),
        ),
        n_channels=2, sample_rate=16000, diffuse_noise_level=0.003, seed=22,
    )
    render = render_scene(spec)
    specs = _channel_specs(render, SMALL)
    result = run_em(specs, MesslConfig(n_sources=2, n_iterations=10))

    # Identify the component fitted near +3: it belongs to source A.
    k_a = int(np.argmin(np.abs(result.params.delays[:, 0] - 3.0)))
    mag_a = np.abs(stft(render.per_source_images[0].channel(0), SMALL).bins)
    mag_b = np.abs(stft(render.per_source_images[1].channel(0), SMALL).bins)
    a_dominant = mag_a > 2.0 * mag_b
    b_dominant = mag_b > 2.0 * mag_a
    mask = result.masks[k_a].values
    assert mask[a_dominant].mean() > mask[b_dominant].mean() + 0.2


def test_em_target_dominates_energetic_bins():
    # Pauses and noise-dominated bins belong to the outlier component, so
    # the meaningful claim is energy weighted: where the signal actually
    # lives, the coherent component owns the posterior.
    render = _delayed_scene(2.0, seed=30, noise=0.01)
    specs = _channel_specs(render, SMALL)
    result = run_em(specs, MesslConfig(n_sources=1, n_iterations=8))
    energy = np.abs(specs[0].bins) ** 2
    hot = energy > np.quantile(energy, 0.8)
    assert result.target_mask.values[hot].mean() > 0.8
    assert result.params.priors[0] > 0.5


def test_em_multichannel_pairs():
    render = _delayed_scene(2.0, seed=31, noise=0.01, n_channels=4)
    specs = _channel_specs(render, SMALL)
    result = run_em(specs, MesslConfig(n_sources=1, n_iterations=6))
    assert result.pair_channels == (1, 2, 3)
    assert result.params.delays.shape == (1, 3)
    np.testing.assert_allclose(result.params.delays[0], 2.0, atol=0.25)


def test_em_target_selection_prefers_small_delay():
    sig_a = speechlike_signal(0.6, 16000, np.random.default_rng(40))
    sig_b = speechlike_signal(0.6, 16000, np.random.default_rng(41))
    spec = SceneSpec(
        sources=(
            SourceSpec(signal=sig_a, delays=(0.0, 0.5), gains=(1.0, 1.0)),
            SourceSpec(signal=sig_b, delays=(0.0, 5.0), gains=(1.0, 1.0)),
        ),
        n_channels=2, sample_rate=16000, diffuse_noise_level=0.003, seed=42,
    )
    render = render_scene(spec)
    specs = _channel_specs(render, SMALL)
    result = run_em(specs, MesslConfig(n_sources=2, n_iterations=10))
    picked = result.params.delays[result.target_index, 0]
    assert abs(picked) < 2.0

    forced = run_em(specs, MesslConfig(n_sources=2, n_iterations=10,
                                       target_source=1))
    assert forced.target_index == 1


def test_em_convergence_stops_early():
    render = _delayed_scene(1.0, seed=50, noise=0.02)
    specs = _channel_specs(render, SMALL)
    eager = run_em(specs, MesslConfig(n_sources=1, n_iterations=16,
                                      convergence_tol=1e10))
    assert len(eager.loglik_trace) == 3  # two in-loop passes plus the final
    full = run_em(specs, MesslConfig(n_sources=1, n_iterations=4,
                                     convergence_tol=0.0))
    assert len(full.loglik_trace) == 5


def test_em_silent_input_raises():
    cfg = StftConfig(window_size=16, hop_size=4)
    zero = Spectrogram(bins=np.zeros((9, 6), dtype=complex), config=cfg,
                       sample_rate=16000)
    with pytest.raises(NumericalError, match="silent"):
        run_em([zero, zero], MesslConfig())


def test_em_reference_channel_variant():
    render = _delayed_scene(2.0, seed=60, noise=0.01)
    specs = _channel_specs(render, SMALL)
    result = run_em(specs, MesslConfig(n_sources=1, n_iterations=8,
                                       reference_channel=1))
    # Channel 0 now leads the reference by 2 samples.
    assert result.pair_channels == (0,)
    assert result.params.delays[0, 0] == pytest.approx(-2.0, abs=0.25)


# ------------------------------------------------------------------ config

def test_config_validation():
    with pytest.raises(DataError, match="zero"):
        MesslConfig(delay_grid=np.array([1.0, 2.0]))
    with pytest.raises(DataError, match="at least one source"):
        MesslConfig(n_sources=0)
    with pytest.raises(DataError, match="out of range"):
        MesslConfig(n_sources=2, target_source=2)
    assert MesslConfig().grid_step == pytest.approx(0.25)


def test_default_delay_grid():
    grid = default_delay_grid(4.0, 0.5)
    assert grid[0] == -4.0 and grid[-1] == 4.0
    assert 0.0 in grid
    assert len(grid) == 17


def test_binarize_strict_threshold():
    grid = MaskGrid(values=np.array([[0.2, 0.5, 0.8]]))
    hard = binarize(grid, threshold=0.5)
    np.testing.assert_array_equal(hard.values, [[0.0, 0.0, 1.0]])
