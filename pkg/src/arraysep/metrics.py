"""Objective separation scoring.

The estimate is decomposed by least-squares projection onto shifted copies
of the references: projection onto the speech reference's shifts gives the
target component, extending the basis with the noise references' shifts
gives the interference component, and the remainder is artifacts. The
three components sum to the estimate exactly by construction. Ratios are
reported in dB, clamped to +-100. A segmental SNR over fixed frames is
provided as a perceptual proxy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.linalg

from .errors import DataError
from .signal import Waveform

FILTER_TAPS = 512
DB_CLAMP = 100.0
SEG_SNR_MIN = -10.0
SEG_SNR_MAX = 35.0


@dataclass
class EvalScores:
    """Separation quality in dB; seg_snr is filled by the pipeline."""

    sdr: float
    sir: float
    sar: float
    seg_snr: float = float("nan")


def _safe_db(num: float, den: float) -> float:
    if den == 0.0:
        return DB_CLAMP if num > 0 else 0.0
    if num == 0.0:
        return -DB_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CLAMP, DB_CLAMP))


def _correlate(a: np.ndarray, b: np.ndarray, nfft: int) -> np.ndarray:
    """Linear correlation c[m] = sum_n a(n) b(n+m) via FFT, length nfft."""
    fa = np.fft.rfft(a, nfft)
    fb = np.fft.rfft(b, nfft)
    return np.fft.irfft(np.conj(fa) * fb, nfft)


def _gram_block(c: np.ndarray, taps: int) -> np.ndarray:
    """Toeplitz block G[a, b] = c[a - b] from a circular correlation."""
    col = c[:taps]
    row = np.concatenate(([c[0]], c[-1:-taps:-1]))
    return scipy.linalg.toeplitz(col, row)


def _solve(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(gram, rhs, rcond=None)[0]


def _project(refs, coeffs, taps: int, length: int) -> np.ndarray:
    out = np.zeros(length)
    for i, ref in enumerate(refs):
        filt = coeffs[i * taps:(i + 1) * taps]
        out += np.convolve(ref, filt)[:length]
    return out


def decompose(
    estimate: Waveform,
    speech_ref: Waveform,
    noise_refs,
    filters_len: int = FILTER_TAPS,
):
    """Split an estimate into target, interference, and artifact components.

    All three returned arrays live on the zero-padded domain of length
    len(estimate) + filters_len - 1 and sum to the padded estimate exactly.
    """
    noise_refs = list(noise_refs)
    refs = [speech_ref] + noise_refs
    n = len(estimate)
    for ref in refs:
        if len(ref) != n:
            raise DataError("references must match the estimate length")
        if ref.sample_rate != estimate.sample_rate:
            raise DataError("references must match the estimate sample rate")
        if float(np.sum(ref.samples ** 2)) == 0.0:
            raise DataError("zero-energy reference")
    taps = int(filters_len)
    if taps < 1:
        raise DataError("filters_len must be positive")

    length = n + taps - 1
    nfft = scipy.fft.next_fast_len(n + taps)
    signals = [ref.samples for ref in refs]
    est = np.zeros(length)
    est[:n] = estimate.samples

    n_refs = len(signals)
    gram = np.empty((n_refs * taps, n_refs * taps))
    for i in range(n_refs):
        for j in range(i, n_refs):
            block = _gram_block(_correlate(signals[i], signals[j], nfft), taps)
            gram[i * taps:(i + 1) * taps, j * taps:(j + 1) * taps] = block
            if j > i:
                gram[j * taps:(j + 1) * taps, i * taps:(i + 1) * taps] = block.T
    rhs = np.concatenate(
        [_correlate(sig, estimate.samples, nfft)[:taps] for sig in signals]
    )

    speech_coeffs = _solve(gram[:taps, :taps], rhs[:taps])
    s_target = _project(signals[:1], speech_coeffs, taps, length)
    if noise_refs:
        all_coeffs = _solve(gram, rhs)
        full_proj = _project(signals, all_coeffs, taps, length)
    else:
        full_proj = s_target
    e_interf = full_proj - s_target
    e_artif = est - full_proj
    return s_target, e_interf, e_artif


def bss_eval(
    estimate: Waveform,
    speech_ref: Waveform,
    noise_refs,
    filters_len: int = FILTER_TAPS,
) -> EvalScores:
    """Projection-based SDR, SIR, and SAR of an estimate."""
    s_target, e_interf, e_artif = decompose(
        estimate, speech_ref, noise_refs, filters_len
    )
    target_energy = float(np.sum(s_target ** 2))
    interf_energy = float(np.sum(e_interf ** 2))
    artif_energy = float(np.sum(e_artif ** 2))
    distortion = float(np.sum((e_interf + e_artif) ** 2))
    return EvalScores(
        sdr=_safe_db(target_energy, distortion),
        sir=_safe_db(target_energy, interf_energy),
        sar=_safe_db(target_energy + interf_energy, artif_energy),
    )


def seg_snr(
    estimate: Waveform,
    reference: Waveform,
    frame_len: int = 256,
) -> float:
    """Mean per-frame SNR in dB, each frame clamped to [-10, 35].

    Frames are non-overlapping; frames where the reference is silent are
    skipped. An all-silent reference is an error.
    """
    if len(estimate) != len(reference):
        raise DataError("estimate and reference lengths differ")
    if frame_len < 1:
        raise DataError("frame length must be positive")
    n_frames = len(reference) // frame_len
    if n_frames == 0:
        raise DataError("signal shorter than one frame")
    ref = reference.samples[:n_frames * frame_len].reshape(n_frames, frame_len)
    est = estimate.samples[:n_frames * frame_len].reshape(n_frames, frame_len)
    ref_energy = np.sum(ref ** 2, axis=1)
    err_energy = np.sum((ref - est) ** 2, axis=1)
    keep = ref_energy > 0.0
    if not keep.any():
        raise DataError("reference is silent in every frame")
    values = np.full(n_frames, SEG_SNR_MAX)
    nonzero = keep & (err_energy > 0.0)
    values[nonzero] = np.clip(
        10.0 * np.log10(ref_energy[nonzero] / err_energy[nonzero]),
        SEG_SNR_MIN,
        SEG_SNR_MAX,
    )
    return float(np.mean(values[keep]))
