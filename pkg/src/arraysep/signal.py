"""Waveform containers, STFT analysis/synthesis, and mask-domain transforms.

Analysis and synthesis both use the configured window; their product must
satisfy constant overlap-add (COLA) at the configured hop so that masked
resynthesis is free of frame-rate modulation. Inverse synthesis divides by
the accumulated analysis-synthesis window product, which makes the
unmodified round trip exact away from the signal edges.

Axis convention: spectrograms and masks are (n_freq, n_frames).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile
from scipy.special import expit

from .errors import DataError

AMP_FLOOR = 1e-8      # linear magnitude floor before dB conversion
MASK_EPS = 1e-3       # clamp for ratio masks entering logit or log
STATS_FLOOR = 1e-3    # dB floor on per-frequency feature deviation
WINDOW_NAMES = ("sqrt_hann", "hann", "rect")

_COLA_RTOL = 1e-8
_NORM_FLOOR = 1e-12


@dataclass
class Waveform:
    """A single-channel signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")
        self.sample_rate = int(self.sample_rate)
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples ** 2)))


@dataclass
class MultichannelWaveform:
    """Time-aligned channels of one capture, equal length and rate."""

    channels: tuple

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if not self.channels:
            raise DataError("need at least one channel")
        n = len(self.channels[0])
        rate = self.channels[0].sample_rate
        for ch in self.channels:
            if len(ch) != n or ch.sample_rate != rate:
                raise DataError("channels must share length and sample rate")

    @classmethod
    def from_array(cls, arr: np.ndarray, sample_rate: int) -> "MultichannelWaveform":
        """Build from a (n_channels, n_samples) array."""
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        return cls(tuple(Waveform(row, sample_rate) for row in arr))

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_samples(self) -> int:
        return len(self.channels[0])

    @property
    def sample_rate(self) -> int:
        return self.channels[0].sample_rate

    def channel(self, index: int) -> Waveform:
        return self.channels[index]

    def as_array(self) -> np.ndarray:
        return np.stack([ch.samples for ch in self.channels])


def make_window(name: str, size: int) -> np.ndarray:
    """Return a periodic window of the given size."""
    if size <= 0:
        raise DataError(f"window size must be positive, got {size}")
    if name == "rect":
        return np.ones(size)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / size)
    if name == "hann":
        return hann
    if name == "sqrt_hann":
        return np.sqrt(hann)
    raise DataError(f"unknown window '{name}', expected one of {WINDOW_NAMES}")


def _check_cola(window: np.ndarray, hop: int) -> None:
    # The analysis-synthesis product (window squared here) must sum to a
    # constant across hops on the fully overlapped interior.
    size = window.shape[0]
    product = window * window
    reps = 2 * size // hop + 2
    buf = np.zeros(size + reps * hop)
    for k in range(reps):
        buf[k * hop:k * hop + size] += product
    seg = buf[size:size + hop]
    if seg.min() <= 0 or (seg.max() - seg.min()) > _COLA_RTOL * seg.mean():
        raise DataError(
            f"window does not satisfy COLA at hop {hop} (overlap-add sum varies)"
        )


@dataclass(frozen=True)
class StftConfig:
    """Frame size, hop, and window family for analysis and synthesis."""

    window_size: int = 1024
    hop_size: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.window_size <= 0:
            raise DataError(f"window_size must be positive, got {self.window_size}")
        if not 0 < self.hop_size <= self.window_size:
            raise DataError(
                f"hop_size must be in (0, window_size], got {self.hop_size}"
            )
        _check_cola(make_window(self.window, self.window_size), self.hop_size)

    @property
    def n_freq(self) -> int:
        return self.window_size // 2 + 1


@dataclass
class Spectrogram:
    """One-sided complex STFT, shape (n_freq, n_frames)."""

    bins: np.ndarray
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2:
            raise DataError(f"spectrogram must be 2-D, got shape {self.bins.shape}")
        if self.bins.shape[0] != self.config.n_freq:
            raise DataError(
                f"frequency axis {self.bins.shape[0]} inconsistent with window "
                f"size {self.config.window_size}"
            )
        if not np.all(np.isfinite(self.bins)):
            raise DataError("spectrogram contains non-finite bins")

    @property
    def n_freq(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


@dataclass
class MaskGrid:
    """Real-valued time-frequency grid, shape (n_freq, n_frames)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("mask contains non-finite values")

    @property
    def shape(self) -> tuple:
        return self.values.shape


def check_ratio_mask(mask: MaskGrid) -> np.ndarray:
    """Validate a [0, 1] ratio mask, tolerating round-off overshoot."""
    v = mask.values
    if v.min() < -1e-9 or v.max() > 1.0 + 1e-9:
        raise DataError(
            f"ratio mask out of [0, 1]: min {v.min():.3g}, max {v.max():.3g}"
        )
    return np.clip(v, 0.0, 1.0)


@dataclass
class FeatureStats:
    """Per-frequency mean and deviation of dB-scale features."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.ndim != 1 or self.mean.shape != self.std.shape:
            raise DataError("stats must be matching 1-D vectors")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise DataError("stats contain non-finite values")
        # Deviation is floored so that normalization never divides by ~0.
        self.std = np.maximum(self.std, STATS_FLOOR)

    @classmethod
    def from_spectrograms(cls, specs) -> "FeatureStats":
        """Pool dB features of a training set into per-frequency stats."""
        specs = list(specs)
        if not specs:
            raise DataError("need at least one spectrogram for stats")
        feats = np.concatenate(
            [20.0 * np.log10(np.maximum(np.abs(s.bins), AMP_FLOOR)) for s in specs],
            axis=1,
        )
        return cls(mean=feats.mean(axis=1), std=feats.std(axis=1))


def stft(wave: Waveform, cfg: StftConfig) -> Spectrogram:
    """Analyze a waveform into a one-sided complex spectrogram.

    Frames are hop-spaced slices of length window_size; no padding is added,
    so a signal shorter than one window is an error and trailing samples
    that do not fill a frame are dropped.
    """
    x = wave.samples
    size, hop = cfg.window_size, cfg.hop_size
    if len(x) < size:
        raise DataError(
            f"insufficient samples: {len(x)} < window size {size}"
        )
    window = make_window(cfg.window, size)
    frames = np.lib.stride_tricks.sliding_window_view(x, size)[::hop]
    bins = np.fft.rfft(frames * window, axis=1).T
    return Spectrogram(bins=bins, config=cfg, sample_rate=wave.sample_rate)


def istft(spec: Spectrogram) -> Waveform:
    """Weighted overlap-add synthesis, exact inverse on the interior.

    Output length is window_size + (n_frames - 1) * hop_size. Samples where
    the accumulated window product vanishes (the very signal edges) are
    left at zero.
    """
    cfg = spec.config
    size, hop = cfg.window_size, cfg.hop_size
    window = make_window(cfg.window, size)
    frames = np.fft.irfft(spec.bins.T, n=size, axis=1)
    n_frames = frames.shape[0]
    out = np.zeros(size + (n_frames - 1) * hop)
    norm = np.zeros_like(out)
    wsq = window * window
    for t in range(n_frames):
        lo = t * hop
        out[lo:lo + size] += frames[t] * window
        norm[lo:lo + size] += wsq
    covered = norm > _NORM_FLOOR
    out[covered] /= norm[covered]
    out[~covered] = 0.0
    return Waveform(samples=out, sample_rate=spec.sample_rate)


def to_log_features(spec: Spectrogram, stats: FeatureStats) -> np.ndarray:
    """dB magnitudes normalized per frequency with the given stats."""
    if stats.mean.shape[0] != spec.n_freq:
        raise DataError(
            f"stats length {stats.mean.shape[0]} does not match {spec.n_freq} bins"
        )
    level_db = 20.0 * np.log10(np.maximum(np.abs(spec.bins), AMP_FLOOR))
    return (level_db - stats.mean[:, None]) / stats.std[:, None]


def logit_mask(mask: MaskGrid) -> np.ndarray:
    """Log-odds of a ratio mask, clamped away from {0, 1}."""
    p = np.clip(check_ratio_mask(mask), MASK_EPS, 1.0 - MASK_EPS)
    return np.log(p / (1.0 - p))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def apply_mask(mask: MaskGrid, spec: Spectrogram) -> Spectrogram:
    """Pointwise product of a real mask with a complex spectrogram."""
    if mask.values.shape != spec.bins.shape:
        raise DataError(
            f"mask shape {mask.values.shape} does not match "
            f"spectrogram shape {spec.bins.shape}"
        )
    return Spectrogram(
        bins=mask.values * spec.bins, config=spec.config, sample_rate=spec.sample_rate
    )


def read_wav(path) -> MultichannelWaveform:
    """Read a RIFF/WAVE file (PCM16, PCM32, float32/64) as float64 channels."""
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise DataError(f"unsupported WAV sample format {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    return MultichannelWaveform.from_array(data.T, rate)


def write_wav(path, wave, encoding: str = "float32") -> None:
    """Write a Waveform or MultichannelWaveform as PCM16 or float32."""
    if isinstance(wave, Waveform):
        arr = wave.samples[:, None]
        rate = wave.sample_rate
    else:
        arr = wave.as_array().T
        rate = wave.sample_rate
    if arr.shape[1] == 1:
        arr = arr[:, 0]
    if encoding == "float32":
        scipy.io.wavfile.write(path, rate, arr.astype(np.float32))
    elif encoding == "pcm16":
        clipped = np.clip(arr, -1.0, 1.0)
        scipy.io.wavfile.write(path, rate, (clipped * 32767.0).astype(np.int16))
    else:
        raise DataError(f"unsupported encoding '{encoding}'")


MASK_MAGIC = b"ASMASK1"


def save_mask(mask: MaskGrid, path, config_digest: str = "-") -> None:
    """Write a mask as a text header plus flat little-endian float32 values."""
    n_freq, n_frames = mask.values.shape
    header = MASK_MAGIC + (
        f"\nshape {n_freq} {n_frames}\nconfig {config_digest}\nend\n"
    ).encode("ascii")
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(mask.values.astype("<f4").tobytes())


def load_mask(path) -> MaskGrid:
    """Read a mask written by save_mask."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if not blob.startswith(MASK_MAGIC + b"\n"):
        raise DataError(f"{path} is not a mask file")
    try:
        head, payload = blob.split(b"end\n", 1)
        fields = dict(
            line.split(b" ", 1) for line in head.splitlines()[1:] if b" " in line
        )
        n_freq, n_frames = (int(v) for v in fields[b"shape"].split())
    except (ValueError, KeyError) as exc:
        raise DataError(f"malformed mask header in {path}") from exc
    values = np.frombuffer(payload, dtype="<f4")
    if values.size != n_freq * n_frames:
        raise DataError(
            f"mask payload has {values.size} values, header says "
            f"{n_freq}x{n_frames}"
        )
    return MaskGrid(values=values.reshape(n_freq, n_frames).astype(np.float64))


def mask_config_digest(path) -> str:
    """Return the config digest recorded in a mask file header."""
    with open(path, "rb") as handle:
        head = handle.read(256)
    for line in head.splitlines():
        if line.startswith(b"config "):
            return line.split(b" ", 1)[1].decode("ascii")
    raise DataError(f"no config digest in {path}")
