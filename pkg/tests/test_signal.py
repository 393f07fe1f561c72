"""STFT analysis/synthesis, masks, features, and file IO."""

import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arraysep import (
    DataError,
    FeatureStats,
    MaskGrid,
    Spectrogram,
    StftConfig,
    Waveform,
    apply_mask,
    istft,
    load_mask,
    read_wav,
    save_mask,
    stft,
    to_log_features,
    write_wav,
)
from arraysep.signal import (
    MASK_EPS,
    check_ratio_mask,
    logit_mask,
    make_window,
    mask_config_digest,
    sigmoid,
)
from conftest import make_noise, make_tone


# ---------------------------------------------------------------- analysis

def test_stft_matches_direct_dft(small_cfg):
    """Oracle: frame 0 of the STFT equals a literal windowed DFT sum."""
    wave = make_tone(1000.0, duration=0.05)
    spec = stft(wave, small_cfg)

    size = small_cfg.window_size
    window = make_window(small_cfg.window, size)
    frame = wave.samples[:size] * window
    n_freq = size // 2 + 1
    direct = np.zeros(n_freq, dtype=complex)
    for k in range(n_freq):
        for n in range(size):
            direct[k] += frame[n] * np.exp(-2j * np.pi * k * n / size)
    np.testing.assert_allclose(spec.bins[:, 0], direct, atol=1e-9)


def test_stft_sine_peaks_at_expected_bin():
    # Window 64 at 16 kHz puts bin spacing at 250 Hz; a 2 kHz sine is bin 8.
    cfg = StftConfig(window_size=64, hop_size=16)
    spec = stft(make_tone(2000.0), cfg)
    mean_mag = np.abs(spec.bins).mean(axis=1)
    assert int(np.argmax(mean_mag)) == 8


def test_stft_frame_count_and_shape(small_cfg):
    n = 400
    wave = make_noise(n)
    spec = stft(wave, small_cfg)
    expected_frames = (n - small_cfg.window_size) // small_cfg.hop_size + 1
    assert spec.bins.shape == (small_cfg.n_freq, expected_frames)


def test_stft_parseval_per_frame(small_cfg):
    """One-sided Parseval: windowed frame energy survives the transform."""
    wave = make_noise(256, seed=3)
    spec = stft(wave, small_cfg)
    size = small_cfg.window_size
    window = make_window(small_cfg.window, size)
    frame = wave.samples[:size] * window
    time_energy = np.sum(frame ** 2)
    mags = np.abs(spec.bins[:, 0]) ** 2
    freq_energy = (mags[0] + 2.0 * mags[1:-1].sum() + mags[-1]) / size
    np.testing.assert_allclose(freq_energy, time_energy, rtol=1e-10)


def test_stft_too_short_raises(small_cfg):
    with pytest.raises(DataError, match="insufficient samples"):
        stft(Waveform(samples=np.zeros(32), sample_rate=16000), small_cfg)


def test_stft_linear(small_cfg):
    a, b = make_noise(300, seed=1), make_noise(300, seed=2)
    both = Waveform(samples=a.samples + b.samples, sample_rate=16000)
    total = stft(both, small_cfg).bins
    parts = stft(a, small_cfg).bins + stft(b, small_cfg).bins
    np.testing.assert_allclose(total, parts, atol=1e-12)


# --------------------------------------------------------------- synthesis

def test_round_trip_interior(small_cfg):
    wave = make_noise(1000, seed=9)
    back = istft(stft(wave, small_cfg))
    size, hop = small_cfg.window_size, small_cfg.hop_size
    lo, hi = size, len(back) - size
    np.testing.assert_allclose(back.samples[lo:hi], wave.samples[lo:hi],
                               atol=1e-6)


def test_round_trip_default_config():
    cfg = StftConfig()
    wave = make_noise(8192, seed=11)
    back = istft(stft(wave, cfg))
    lo, hi = cfg.window_size, len(back) - cfg.window_size
    err = np.max(np.abs(back.samples[lo:hi] - wave.samples[lo:hi]))
    assert err < 1e-6


def test_istft_output_length(small_cfg):
    spec = stft(make_noise(500), small_cfg)
    out = istft(spec)
    expected = small_cfg.window_size + (spec.n_frames - 1) * small_cfg.hop_size
    assert len(out) == expected


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_round_trip_property(seed):
    cfg = StftConfig(window_size=64, hop_size=16)
    gen = np.random.default_rng(seed)
    wave = Waveform(samples=gen.uniform(-1.0, 1.0, size=320), sample_rate=8000)
    back = istft(stft(wave, cfg))
    lo = cfg.window_size
    hi = len(back) - cfg.window_size
    assert np.max(np.abs(back.samples[lo:hi] - wave.samples[lo:hi])) < 1e-6


# ------------------------------------------------------------------ config

def test_cola_rejects_rect_with_nondividing_hop():
    with pytest.raises(DataError, match="COLA"):
        StftConfig(window_size=64, hop_size=48, window="rect")


def test_rect_with_dividing_hop_ok():
    StftConfig(window_size=64, hop_size=32, window="rect")


def test_hop_bounds():
    with pytest.raises(DataError):
        StftConfig(window_size=64, hop_size=0)
    with pytest.raises(DataError):
        StftConfig(window_size=64, hop_size=65)


def test_unknown_window_rejected():
    with pytest.raises(DataError, match="unknown window"):
        StftConfig(window_size=64, hop_size=16, window="kaiser")


def test_sqrt_hann_window_values():
    w = make_window("sqrt_hann", 8)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(8) / 8)
    np.testing.assert_allclose(w * w, hann, atol=1e-15)


# ------------------------------------------------------------------- masks

def test_check_ratio_mask_tolerates_roundoff():
    vals = np.array([[0.0, 1.0], [-5e-10, 1.0 + 5e-10]])
    clipped = check_ratio_mask(MaskGrid(values=vals))
    assert clipped.min() == 0.0 and clipped.max() == 1.0


def test_check_ratio_mask_rejects_out_of_range():
    with pytest.raises(DataError, match="out of"):
        check_ratio_mask(MaskGrid(values=np.array([[1.5]])))


def test_mask_rejects_non_finite():
    with pytest.raises(DataError, match="non-finite"):
        MaskGrid(values=np.array([[np.nan]]))


def test_logit_sigmoid_inverse():
    gen = np.random.default_rng(0)
    vals = gen.uniform(MASK_EPS, 1.0 - MASK_EPS, size=(5, 7))
    back = sigmoid(logit_mask(MaskGrid(values=vals)))
    np.testing.assert_allclose(back, vals, atol=1e-12)


def test_logit_clamps_extremes():
    grid = MaskGrid(values=np.array([[0.0, 1.0]]))
    lo, hi = logit_mask(grid)[0]
    assert lo == pytest.approx(np.log(MASK_EPS / (1.0 - MASK_EPS)))
    assert hi == pytest.approx(-lo, rel=1e-12)


def test_apply_mask_scales_bins(small_cfg):
    spec = stft(make_noise(200), small_cfg)
    half = MaskGrid(values=np.full(spec.bins.shape, 0.5))
    out = apply_mask(half, spec)
    np.testing.assert_allclose(out.bins, 0.5 * spec.bins)


def test_apply_mask_shape_mismatch(small_cfg):
    spec = stft(make_noise(200), small_cfg)
    with pytest.raises(DataError, match="does not match"):
        apply_mask(MaskGrid(values=np.zeros((3, 3))), spec)


# ---------------------------------------------------------------- features

def test_log_features_self_normalize(small_cfg):
    spec = stft(make_noise(2000, seed=4), small_cfg)
    stats = FeatureStats.from_spectrograms([spec])
    feats = to_log_features(spec, stats)
    np.testing.assert_allclose(feats.mean(axis=1), 0.0, atol=1e-9)
    assert np.all(feats.std(axis=1) < 1.5)


def test_feature_stats_floor():
    stats = FeatureStats(mean=np.zeros(4), std=np.zeros(4))
    assert np.all(stats.std >= 1e-3)


def test_log_features_length_mismatch(small_cfg):
    spec = stft(make_noise(200), small_cfg)
    stats = FeatureStats(mean=np.zeros(3), std=np.ones(3))
    with pytest.raises(DataError, match="does not match"):
        to_log_features(spec, stats)


# --------------------------------------------------------------------- wav

def test_wav_float32_round_trip(tmp_path):
    wave = make_noise(500, seed=5)
    path = tmp_path / "x.wav"
    write_wav(path, wave)
    back = read_wav(path)
    assert back.n_channels == 1
    assert back.sample_rate == wave.sample_rate
    np.testing.assert_allclose(back.channel(0).samples, wave.samples, atol=1e-7)


def test_wav_pcm16_round_trip(tmp_path):
    wave = make_tone(440.0, duration=0.02)
    path = tmp_path / "t.wav"
    write_wav(path, wave, encoding="pcm16")
    back = read_wav(path)
    np.testing.assert_allclose(back.channel(0).samples, wave.samples,
                               atol=1.5 / 32768.0)


def test_wav_multichannel_round_trip(tmp_path, two_channel_render):
    mix = two_channel_render.mixture
    path = tmp_path / "m.wav"
    write_wav(path, mix)
    back = read_wav(path)
    assert back.n_channels == 2
    np.testing.assert_allclose(back.as_array(), mix.as_array(), atol=1e-7)


def test_wav_missing_file():
    with pytest.raises(FileNotFoundError):
        read_wav("/nonexistent/file.wav")


def test_wav_bad_encoding(tmp_path):
    with pytest.raises(DataError, match="unsupported encoding"):
        write_wav(tmp_path / "x.wav", make_noise(10), encoding="mp3")


# -------------------------------------------------------------- mask files

def test_mask_file_round_trip(tmp_path):
    gen = np.random.default_rng(8)
    vals = gen.uniform(0.0, 1.0, size=(33, 17)).astype(np.float32)
    grid = MaskGrid(values=vals.astype(np.float64))
    path = tmp_path / "m.mask"
    save_mask(grid, path, config_digest="abc123")
    back = load_mask(path)
    # float32 payload: values that are exactly representable survive bitwise
    np.testing.assert_array_equal(back.values.astype(np.float32), vals)
    assert mask_config_digest(path) == "abc123"


def test_mask_file_truncated(tmp_path):
    path = tmp_path / "m.mask"
    save_mask(MaskGrid(values=np.zeros((4, 4))), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(DataError, match="payload"):
        load_mask(path)


def test_mask_file_wrong_magic(tmp_path):
    path = tmp_path / "m.mask"
    path.write_bytes(b"NOTAMASK" + b"\x00" * 32)
    with pytest.raises(DataError, match="not a mask file"):
        load_mask(path)


@settings(max_examples=20, deadline=None)
@given(
    st.integers(min_value=1, max_value=12),
    st.integers(min_value=1, max_value=12),
    st.integers(min_value=0, max_value=2 ** 31 - 1),
)
def test_mask_file_round_trip_property(n_freq, n_frames, seed):
    gen = np.random.default_rng(seed)
    vals = gen.uniform(0.0, 1.0, size=(n_freq, n_frames)).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.mask")
        save_mask(MaskGrid(values=vals.astype(np.float64)), path)
        back = load_mask(path)
    np.testing.assert_array_equal(back.values.astype(np.float32), vals)


# ------------------------------------------------------------- dataclasses

def test_waveform_validation():
    with pytest.raises(DataError):
        Waveform(samples=np.zeros((2, 2)), sample_rate=16000)
    with pytest.raises(DataError):
        Waveform(samples=np.zeros(4), sample_rate=0)


def test_spectrogram_freq_axis_checked(small_cfg):
    with pytest.raises(DataError, match="inconsistent"):
        Spectrogram(bins=np.zeros((5, 4), dtype=complex), config=small_cfg,
                    sample_rate=16000)
