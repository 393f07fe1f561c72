"""Synthetic multichannel scenes with exact speech/noise decompositions.

Each source is placed by per-channel fractional delays (windowed-sinc
interpolation) and gains over an anechoic direct path; diffuse noise is
independent white Gaussian per channel. The identity

    mixture = sum of source images + noise image

holds samplewise by construction, which gives downstream stages usable
ground truth for oracle masks and scoring references.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import DataError
from .signal import (
    MultichannelWaveform,
    StftConfig,
    Waveform,
    read_wav,
    stft,
    write_wav,
)
from .targets import TargetContext, TargetKind, compute_target

DELAY_TAPS = 32
DELAY_KAISER_BETA = 8.6
MANIFEST_NAME = "manifest.yaml"


@dataclass
class SourceSpec:
    """One source signal and its per-channel placement."""

    signal: Waveform
    delays: tuple
    gains: tuple

    def __post_init__(self):
        self.delays = tuple(float(d) for d in self.delays)
        self.gains = tuple(float(g) for g in self.gains)
        if len(self.delays) != len(self.gains):
            raise DataError("delays and gains must have one entry per channel")
        if not all(np.isfinite(self.delays)):
            raise DataError("delays must be finite")
        if any(g <= 0 for g in self.gains):
            raise DataError("gains must be positive")


@dataclass
class SceneSpec:
    """Full description of a synthetic capture; deterministic given seed."""

    sources: tuple
    n_channels: int
    sample_rate: int
    diffuse_noise_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.sources = tuple(self.sources)
        if not self.sources:
            raise DataError("scene needs at least one source")
        if self.n_channels < 2:
            raise DataError("scene needs at least two channels")
        if self.diffuse_noise_level < 0:
            raise DataError("noise level must be nonnegative")
        for src in self.sources:
            if len(src.delays) != self.n_channels:
                raise DataError(
                    f"source has {len(src.delays)} channel placements, "
                    f"scene has {self.n_channels} channels"
                )
            if src.signal.sample_rate != self.sample_rate:
                raise DataError("source sample rate does not match scene")


@dataclass
class SceneRender:
    """Rendered mixture plus the exact per-source and noise images."""

    mixture: MultichannelWaveform
    per_source_images: tuple
    noise_image: MultichannelWaveform

    @property
    def sample_rate(self) -> int:
        return self.mixture.sample_rate


def fractional_delay(
    x: np.ndarray,
    delay: float,
    taps: int = DELAY_TAPS,
    beta: float = DELAY_KAISER_BETA,
) -> np.ndarray:
    """Delay a signal by a possibly fractional number of samples.

    Integer delays are exact shifts. Fractional parts are interpolated with
    a Kaiser-windowed sinc kernel of the given tap count, so the result is
    accurate for signals whose energy sits below roughly 0.6 of Nyquist.
    Output has the same length as the input, zero-filled at the exposed end.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    shift = int(np.floor(delay))
    frac = delay - shift
    if frac > 0.0:
        half = taps // 2
        offsets = np.arange(-half + 1, half + 1)
        arg = offsets - frac
        scaled = arg / half
        window = np.zeros_like(arg, dtype=np.float64)
        inside = np.abs(scaled) <= 1.0
        window[inside] = np.i0(beta * np.sqrt(1.0 - scaled[inside] ** 2)) / np.i0(beta)
        kernel = np.sinc(arg) * window
        x = np.convolve(x, kernel)[half - 1:half - 1 + n]
    out = np.zeros(n)
    if shift >= 0:
        out[shift:] = x[:n - shift] if shift else x
    else:
        out[:n + shift] = x[-shift:]
    return out


def render_scene(spec: SceneSpec) -> SceneRender:
    """Render a scene into mixture, source images, and the noise image."""
    n = max(len(src.signal) for src in spec.sources)
    rate = spec.sample_rate
    images = []
    for src in spec.sources:
        padded = np.zeros(n)
        padded[:len(src.signal)] = src.signal.samples
        rows = np.stack(
            [
                gain * fractional_delay(padded, delay)
                for delay, gain in zip(src.delays, src.gains)
            ]
        )
        images.append(MultichannelWaveform.from_array(rows, rate))
    rng = np.random.default_rng(spec.seed)
    noise_rows = spec.diffuse_noise_level * rng.standard_normal((spec.n_channels, n))
    noise = MultichannelWaveform.from_array(noise_rows, rate)
    mix_rows = noise_rows + np.sum([img.as_array() for img in images], axis=0)
    return SceneRender(
        mixture=MultichannelWaveform.from_array(mix_rows, rate),
        per_source_images=tuple(images),
        noise_image=noise,
    )


def ideal_masks(render: SceneRender, cfg: StftConfig) -> list:
    """Per-channel oracle targets for the first (target) source.

    Returns one dict per channel mapping TargetKind to its grid, computed
    from the exact source image and the mixture at that channel.
    """
    target = render.per_source_images[0]
    out = []
    for c in range(render.mixture.n_channels):
        clean = stft(target.channel(c), cfg)
        noisy = stft(render.mixture.channel(c), cfg)
        ctx = TargetContext.from_spectrograms(clean, noisy)
        out.append({kind: compute_target(ctx, kind) for kind in TargetKind})
    return out


def speechlike_signal(
    duration: float,
    sample_rate: int,
    rng: np.random.Generator,
    f0_range: tuple = (110.0, 220.0),
    pause_fraction: float = 0.15,
    noise_level: float = 0.12,
    rms: float = 0.15,
) -> Waveform:
    """Amplitude-modulated harmonic tones plus colored noise bursts.

    The signal alternates voiced stretches and true silences (for noise
    floor estimation), keeps its energy below about 0.55 of Nyquist so
    fractional delays stay accurate, and is deterministic given the rng.
    """
    n = int(round(duration * sample_rate))
    if n <= 0:
        raise DataError("duration must be positive")

    # Smooth fundamental contour from coarse random knots.
    knot_hop = max(1, int(0.2 * sample_rate))
    n_knots = n // knot_hop + 2
    knots = rng.uniform(f0_range[0], f0_range[1], size=n_knots)
    f0 = np.interp(np.arange(n), np.arange(n_knots) * knot_hop, knots)
    phase = np.cumsum(2.0 * np.pi * f0 / sample_rate)

    f_max = 0.55 * sample_rate / 2.0
    n_harm = max(1, int(f_max / f0_range[1]))
    voiced = np.zeros(n)
    for h in range(1, n_harm + 1):
        amp = rng.uniform(0.5, 1.0) / h
        voiced += amp * np.sin(h * phase + rng.uniform(0.0, 2.0 * np.pi))

    # Syllabic on/off envelope with raised-cosine edges and hard pauses.
    envelope = np.zeros(n)
    edge = max(1, int(0.02 * sample_rate))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    pos = int(rng.uniform(0.4, 1.0) * pause_fraction * 0.5 * n)
    while pos < n:
        on = int(rng.uniform(0.12, 0.3) * sample_rate)
        off = int(rng.uniform(0.3, 1.0) * on * pause_fraction / max(1e-6, 1.0 - pause_fraction) * 2.0)
        hi = min(n, pos + on)
        envelope[pos:hi] = 1.0
        if hi - pos > 2 * edge:
            envelope[pos:pos + edge] = ramp
            envelope[hi - edge:hi] = ramp[::-1]
        pos = hi + max(edge, off)
    if pause_fraction > 0:
        tail = max(1, int(pause_fraction * 0.25 * n))
        envelope[-tail:] = 0.0
    if not envelope.any():
        envelope[: max(2 * edge, n // 2)] = 1.0

    sig = voiced * envelope

    if noise_level > 0:
        # One-pole lowpassed noise gated by short bursts inside voiced spans.
        white = rng.standard_normal(n)
        alpha = np.exp(-2.0 * np.pi * 3500.0 / sample_rate)
        colored = np.empty(n)
        acc = 0.0
        b = np.sqrt(1.0 - alpha * alpha)
        for i in range(n):
            acc = alpha * acc + b * white[i]
            colored[i] = acc
        sig += noise_level * colored * envelope

    active = sig[envelope > 0.5]
    scale = rms / max(np.sqrt(np.mean(active ** 2)) if active.size else 1.0, 1e-12)
    sig = np.clip(sig * scale, -0.99, 0.99)
    return Waveform(samples=sig, sample_rate=sample_rate)


def random_scene_spec(
    rng: np.random.Generator,
    n_channels: int = 2,
    duration: float = 2.0,
    sample_rate: int = 16000,
    snr_db: float = 10.0,
    target_delay_range: tuple = (-4.0, 4.0),
    n_interferers: int = 0,
    interferer_delay_range: tuple = (-6.0, 6.0),
    gain_jitter: float = 0.1,
) -> SceneSpec:
    """Draw a random scene: target source, optional interferers, diffuse noise.

    The first channel of every source is the undelayed unit-gain anchor;
    remaining channels get random delays and mild gain jitter. snr_db sets
    the diffuse noise level relative to the target signal power.
    """

    def placement(delay_range):
        delays = [0.0] + [rng.uniform(*delay_range) for _ in range(n_channels - 1)]
        gains = [1.0] + [
            1.0 + gain_jitter * rng.uniform(-1.0, 1.0) for _ in range(n_channels - 1)
        ]
        return tuple(delays), tuple(gains)

    sources = []
    target_signal = speechlike_signal(duration, sample_rate, rng)
    delays, gains = placement(target_delay_range)
    sources.append(SourceSpec(signal=target_signal, delays=delays, gains=gains))
    for _ in range(n_interferers):
        sig = speechlike_signal(duration, sample_rate, rng)
        delays, gains = placement(interferer_delay_range)
        sources.append(SourceSpec(signal=sig, delays=delays, gains=gains))

    noise_level = target_signal.rms() * 10.0 ** (-snr_db / 20.0)
    return SceneSpec(
        sources=tuple(sources),
        n_channels=n_channels,
        sample_rate=sample_rate,
        diffuse_noise_level=float(noise_level),
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def _source_from_dict(entry: dict, scene: dict, index: int) -> SourceSpec:
    kind = entry.get("kind", "speechlike")
    rate = int(scene.get("sample_rate", 16000))
    if kind == "speechlike":
        seed = int(scene.get("seed", 0)) * 1000 + index
        signal = speechlike_signal(
            duration=float(entry.get("duration", 2.0)),
            sample_rate=rate,
            rng=np.random.default_rng(seed),
        )
    elif kind == "wav":
        multi = read_wav(entry["path"])
        signal = multi.channel(0)
    else:
        raise DataError(f"unknown source kind '{kind}'")
    level = entry.get("level")
    if level is not None:
        current = signal.rms()
        if current > 0:
            signal = Waveform(
                samples=signal.samples * float(level) / current,
                sample_rate=signal.sample_rate,
            )
    return SourceSpec(
        signal=signal,
        delays=tuple(entry["delays"]),
        gains=tuple(entry.get("gains", [1.0] * len(entry["delays"]))),
    )


def load_scene_specs(path) -> list:
    """Read scene specs from a YAML config.

    Two layouts are accepted: an explicit scene (keys sample_rate,
    n_channels, seed, diffuse_noise_level, sources) or a batch descriptor
    under a 'batch' key (n_scenes, seed, n_channels, duration, snr_db,
    n_interferers, delay_range) expanded through random_scene_spec.
    """
    with open(path) as handle:
        doc = yaml.safe_load(handle)
    if not isinstance(doc, dict):
        raise DataError(f"scene config {path} must be a mapping")
    if "batch" in doc:
        batch = doc["batch"]
        rng = np.random.default_rng(int(batch.get("seed", 0)))
        snr = batch.get("snr_db", 10.0)
        specs = []
        for _ in range(int(batch.get("n_scenes", 1))):
            snr_value = (
                rng.uniform(snr[0], snr[1]) if isinstance(snr, (list, tuple)) else snr
            )
            specs.append(
                random_scene_spec(
                    rng,
                    n_channels=int(batch.get("n_channels", 2)),
                    duration=float(batch.get("duration", 2.0)),
                    sample_rate=int(batch.get("sample_rate", 16000)),
                    snr_db=float(snr_value),
                    target_delay_range=tuple(batch.get("delay_range", (-4.0, 4.0))),
                    n_interferers=int(batch.get("n_interferers", 0)),
                )
            )
        return specs
    sources = [
        _source_from_dict(entry, doc, i) for i, entry in enumerate(doc["sources"])
    ]
    return [
        SceneSpec(
            sources=tuple(sources),
            n_channels=int(doc.get("n_channels", len(sources[0].delays))),
            sample_rate=int(doc.get("sample_rate", 16000)),
            diffuse_noise_level=float(doc.get("diffuse_noise_level", 0.0)),
            seed=int(doc.get("seed", 0)),
        )
    ]


def save_render(render: SceneRender, directory, extras: dict | None = None) -> None:
    """Write a render as a WAV set plus a manifest naming each role."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "sample_rate": render.sample_rate,
        "n_channels": render.mixture.n_channels,
        "mixture": "mixture.wav",
        "sources": [],
        "noise": "noise.wav",
    }
    write_wav(os.path.join(directory, "mixture.wav"), render.mixture)
    for i, image in enumerate(render.per_source_images):
        name = f"source_{i:02d}.wav"
        write_wav(os.path.join(directory, name), image)
        manifest["sources"].append(name)
    write_wav(os.path.join(directory, "noise.wav"), render.noise_image)
    if extras:
        manifest.update(extras)
    with open(os.path.join(directory, MANIFEST_NAME), "w") as handle:
        yaml.safe_dump(manifest, handle, sort_keys=False)


def load_render(directory) -> SceneRender:
    """Read back a render written by save_render."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DataError(f"no scene manifest at {manifest_path}")
    with open(manifest_path) as handle:
        manifest = yaml.safe_load(handle)
    try:
        mixture = read_wav(os.path.join(directory, manifest["mixture"]))
        sources = tuple(
            read_wav(os.path.join(directory, name)) for name in manifest["sources"]
        )
        noise = read_wav(os.path.join(directory, manifest["noise"]))
    except KeyError as exc:
        raise DataError(f"scene manifest {manifest_path} is missing {exc}") from exc
    return SceneRender(mixture=mixture, per_source_images=sources, noise_image=noise)
