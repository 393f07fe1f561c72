"""Mask-driven spatial covariance estimation and MVDR beamforming.

Speech and noise covariance matrices are mask-weighted outer-product
averages per frequency. The distortionless-response weights are computed
with Hermitian positive-definite solves against the steering vector (the
principal eigenvector of the speech covariance); no matrix is ever
explicitly inverted. Frequencies whose covariances are degenerate fall
back to a reference-channel selector and are flagged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DataError
from .signal import AMP_FLOOR, MaskGrid, Spectrogram, apply_mask, check_ratio_mask, istft

LOAD_FACTOR = 1e-6     # diagonal loading relative to mean eigenvalue
WEIGHT_FLOOR = 1e-3    # minimum mask weight (in frames) per frequency
WEIGHTS_MAGIC = b"ASBFW01"


@dataclass
class CovarianceField:
    """Per-frequency speech and noise covariances with degeneracy flags."""

    speech: np.ndarray
    noise: np.ndarray
    degenerate_speech: np.ndarray
    degenerate_noise: np.ndarray

    @property
    def n_freq(self) -> int:
        return self.speech.shape[0]

    @property
    def n_channels(self) -> int:
        return self.speech.shape[1]


@dataclass
class BeamformerWeights:
    """Complex weights and steering vectors per frequency.

    passthrough marks frequencies where the solve was degenerate and the
    weights select the reference channel instead.
    """

    weights: np.ndarray
    steering: np.ndarray
    passthrough: np.ndarray
    reference_channel: int


def _weighted_covariances(bins: np.ndarray, weights: np.ndarray):
    """Mask-weighted outer-product average per frequency.

    bins: (n_channels, n_freq, n_frames) complex. weights: (n_freq,
    n_frames) in [0, 1]. Returns (covariances, degenerate flags).
    """
    n_channels, n_freq, _ = bins.shape
    weight_sum = weights.sum(axis=1)
    degenerate = weight_sum < WEIGHT_FLOOR
    cov = np.einsum("ft,mft,nft->fmn", weights, bins, np.conj(bins))
    safe = np.where(degenerate, 1.0, weight_sum)
    cov /= safe[:, None, None]
    if degenerate.any():
        # Identity scaled by the mean per-channel power keeps the field usable.
        power = np.mean(np.abs(bins) ** 2, axis=(0, 2))
        eye = np.eye(n_channels)
        for f in np.nonzero(degenerate)[0]:
            cov[f] = max(power[f], AMP_FLOOR ** 2) * eye
    # Diagonal loading and exact Hermitian symmetry.
    trace = np.real(np.trace(cov, axis1=1, axis2=2))
    load = LOAD_FACTOR * trace / n_channels
    cov += load[:, None, None] * np.eye(n_channels)
    cov = 0.5 * (cov + np.conj(np.swapaxes(cov, 1, 2)))
    return cov, degenerate


def estimate_covariances(specs, mask: MaskGrid) -> CovarianceField:
    """Speech covariances weighted by the mask, noise by its complement."""
    specs = list(specs)
    if len(specs) < 1:
        raise DataError("need at least one channel")
    shape = specs[0].bins.shape
    for s in specs:
        if s.bins.shape != shape:
            raise DataError("channel spectrograms must share shape")
    m = check_ratio_mask(mask)
    if m.shape != shape:
        raise DataError(
            f"mask shape {m.shape} does not match spectrogram shape {shape}"
        )
    bins = np.stack([s.bins for s in specs])
    speech, deg_s = _weighted_covariances(bins, m)
    noise, deg_n = _weighted_covariances(bins, 1.0 - m)
    return CovarianceField(
        speech=speech, noise=noise, degenerate_speech=deg_s, degenerate_noise=deg_n
    )


def mvdr_weights(cov: CovarianceField, reference_channel: int = 0) -> BeamformerWeights:
    """Minimum-variance distortionless-response weights per frequency.

    The steering vector is the principal eigenvector of the speech
    covariance, scaled to norm sqrt(n_channels) with a real positive
    reference entry. Valid frequencies satisfy weights^H steering = 1;
    degenerate ones pass the reference channel through unchanged.
    """
    n_freq, n_channels = cov.n_freq, cov.n_channels
    if not 0 <= reference_channel < n_channels:
        raise DataError(f"reference channel {reference_channel} out of range")
    selector = np.zeros(n_channels, dtype=np.complex128)
    selector[reference_channel] = 1.0

    weights = np.tile(selector, (n_freq, 1))
    steering = np.tile(selector, (n_freq, 1))
    passthrough = np.ones(n_freq, dtype=bool)

    _, eigvecs = np.linalg.eigh(cov.speech)
    principal = eigvecs[:, :, -1]
    for f in range(n_freq):
        if cov.degenerate_speech[f] or cov.degenerate_noise[f]:
            continue
        d = principal[f]
        ref = d[reference_channel]
        if np.abs(ref) > 1e-12:
            d = d * (np.conj(ref) / np.abs(ref))
        d = d * np.sqrt(n_channels)
        try:
            factor = scipy.linalg.cho_factor(cov.noise[f])
            solved = scipy.linalg.cho_solve(factor, d)
        except (scipy.linalg.LinAlgError, ValueError):
            continue
        denom = np.real(np.vdot(d, solved))
        if not np.isfinite(denom) or denom <= 0:
            continue
        w = solved / denom
        if not np.all(np.isfinite(w)):
            continue
        weights[f] = w
        steering[f] = d
        passthrough[f] = False
    return BeamformerWeights(
        weights=weights,
        steering=steering,
        passthrough=passthrough,
        reference_channel=reference_channel,
    )


def beamform(specs, bw: BeamformerWeights) -> Spectrogram:
    """Apply weights: output bin = weights^H observations."""
    specs = list(specs)
    if len(specs) != bw.weights.shape[1]:
        raise DataError(
            f"{len(specs)} channels but weights expect {bw.weights.shape[1]}"
        )
    shape = specs[0].bins.shape
    for s in specs:
        if s.bins.shape != shape:
            raise DataError("channel spectrograms must share shape")
    if shape[0] != bw.weights.shape[0]:
        raise DataError("weights frequency axis does not match spectrograms")
    bins = np.stack([s.bins for s in specs])
    out = np.einsum("fm,mft->ft", np.conj(bw.weights), bins)
    return Spectrogram(bins=out, config=specs[0].config, sample_rate=specs[0].sample_rate)


def supervised_mvdr_reference(
    close_mic: Spectrogram,
    specs,
    threshold_db: float = 6.0,
    reference_channel: int = 0,
):
    """Close-mic-driven MVDR reference signal.

    A per-frequency noise floor is the 10th percentile of the close mic's
    dB levels over time; bins more than threshold_db above the floor form
    a binary voice-activity mask that drives the covariances, the MVDR
    weights, and the post filter. Returns the time-domain reference.
    """
    from .errors import NumericalError

    if float(np.sum(np.abs(close_mic.bins) ** 2)) == 0.0:
        raise NumericalError("no speech activity detected: close mic is silent")
    level = 20.0 * np.log10(np.maximum(np.abs(close_mic.bins), AMP_FLOOR))
    floor = np.percentile(level, 10, axis=1)
    vad = MaskGrid(values=(level > floor[:, None] + threshold_db).astype(np.float64))
    cov = estimate_covariances(specs, vad)
    bw = mvdr_weights(cov, reference_channel)
    filtered = apply_mask(vad, beamform(specs, bw))
    return istft(filtered)


def save_weights(bw: BeamformerWeights, path) -> None:
    """Debug dump: text header plus interleaved float32 re/im pairs for the
    weights and then the steering vectors."""
    n_freq, n_channels = bw.weights.shape
    header = WEIGHTS_MAGIC + (
        f"\nshape {n_freq} {n_channels}\nref {bw.reference_channel}\nend\n"
    ).encode("ascii")
    with open(path, "wb") as handle:
        handle.write(header)
        for field in (bw.weights, bw.steering):
            inter = np.empty((n_freq, n_channels, 2), dtype="<f4")
            inter[..., 0] = field.real
            inter[..., 1] = field.imag
            handle.write(inter.tobytes())
        handle.write(bw.passthrough.astype("<f4").tobytes())


def load_weights(path) -> BeamformerWeights:
    """Read back a save_weights dump."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if not blob.startswith(WEIGHTS_MAGIC + b"\n"):
        raise DataError(f"{path} is not a weights file")
    head, payload = blob.split(b"end\n", 1)
    fields = dict(line.split(b" ", 1) for line in head.splitlines()[1:] if b" " in line)
    n_freq, n_channels = (int(v) for v in fields[b"shape"].split())
    ref = int(fields[b"ref"])
    flat = np.frombuffer(payload, dtype="<f4")
    per_field = n_freq * n_channels * 2
    if flat.size != 2 * per_field + n_freq:
        raise DataError(f"weights payload size mismatch in {path}")
    def complex_field(start):
        pairs = flat[start:start + per_field].reshape(n_freq, n_channels, 2)
        return (pairs[..., 0] + 1j * pairs[..., 1]).astype(np.complex128)
    return BeamformerWeights(
        weights=complex_field(0),
        steering=complex_field(per_field),
        passthrough=flat[2 * per_field:] > 0.5,
        reference_channel=ref,
    )
