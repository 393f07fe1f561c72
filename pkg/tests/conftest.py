"""Shared fixtures: small STFT configs and quick synthetic scenes.

Unit tests run on deliberately small windows so the suite stays fast; the
acceptance tests exercise the full default sizes.
"""

import numpy as np
import pytest

from arraysep import MesslConfig, StftConfig, Waveform, random_scene_spec, render_scene


@pytest.fixture
def small_cfg():
    return StftConfig(window_size=64, hop_size=16)


@pytest.fixture
def tiny_cfg():
    return StftConfig(window_size=16, hop_size=4)


@pytest.fixture
def fast_messl():
    return MesslConfig(n_iterations=6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_tone(freq_hz: float, duration: float = 0.25, sample_rate: int = 16000,
              amplitude: float = 0.5) -> Waveform:
    t = np.arange(int(duration * sample_rate)) / sample_rate
    return Waveform(samples=amplitude * np.sin(2.0 * np.pi * freq_hz * t),
                    sample_rate=sample_rate)


def make_noise(n: int, seed: int = 0, sample_rate: int = 16000,
               scale: float = 0.3) -> Waveform:
    gen = np.random.default_rng(seed)
    return Waveform(samples=scale * gen.standard_normal(n), sample_rate=sample_rate)


@pytest.fixture
def two_channel_render():
    spec = random_scene_spec(np.random.default_rng(7), n_channels=2,
                             duration=0.6, snr_db=10.0)
    return render_scene(spec)
