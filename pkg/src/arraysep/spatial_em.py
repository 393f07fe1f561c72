"""EM spatial clustering over interchannel phase differences.

Each time-frequency bin's observed phase differences (every channel paired
with a reference channel) are modeled per source as a wrapped delay
prediction plus a per-frequency Gaussian residual; an optional uniform
outlier component absorbs diffuse noise. Posterior source probabilities
double as soft separation masks (MESSL-style clustering, phase only).

Delays are updated by grid search over a fixed candidate set that always
contains the incumbent, so every M step is a coordinate ascent on the
expected complete-data log likelihood and the log likelihood trace is
non-decreasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DataError, NumericalError
from .signal import MaskGrid

VAR_FLOOR = 1e-4          # rad^2, keeps residual Gaussians proper
_LOG_UNIFORM = -np.log(2.0 * np.pi)
_PRIOR_FLOOR = 1e-300


def default_delay_grid(max_delay: float = 8.0, step: float = 0.25) -> np.ndarray:
    """Symmetric candidate delays in samples, always including zero."""
    n = int(round(max_delay / step))
    return np.arange(-n, n + 1) * step


@dataclass
class MesslConfig:
    """Clustering model size, delay search grid, and stopping rule."""

    n_sources: int = 1
    n_iterations: int = 16
    delay_grid: np.ndarray = field(default_factory=default_delay_grid)
    reference_channel: int = 0
    convergence_tol: float = 1e-5
    use_garbage: bool = True
    target_source: int | None = None

    def __post_init__(self):
        self.delay_grid = np.asarray(self.delay_grid, dtype=np.float64)
        if self.n_sources < 1:
            raise DataError("need at least one source")
        if self.n_iterations < 1:
            raise DataError("need at least one EM iteration")
        if self.delay_grid.size == 0:
            raise DataError("delay grid must be nonempty")
        if np.abs(self.delay_grid).min() > 1e-12:
            raise DataError("delay grid must contain zero")
        if self.target_source is not None and not (
            0 <= self.target_source < self.n_sources
        ):
            raise DataError("target source index out of range")

    @property
    def grid_step(self) -> float:
        if self.delay_grid.size < 2:
            return 0.0
        return float(np.min(np.diff(np.sort(self.delay_grid))))


@dataclass
class MesslParams:
    """Fitted model parameters.

    delays: (n_sources, n_pairs) in samples.
    residual_mean, residual_var: (n_sources, n_freq) in rad and rad^2.
    priors: mixing weights over components, garbage (if any) last.
    """

    delays: np.ndarray
    residual_mean: np.ndarray
    residual_var: np.ndarray
    priors: np.ndarray


@dataclass
class MesslResult:
    """Posterior masks (components in order, garbage last), parameters,
    the log likelihood trace, and the selected target component."""

    masks: tuple
    params: MesslParams
    loglik_trace: np.ndarray
    target_index: int
    pair_channels: tuple

    @property
    def target_mask(self) -> MaskGrid:
        return self.masks[self.target_index]


def _wrap(x: np.ndarray) -> np.ndarray:
    """Wrap phases to (-pi, pi] up to the sign of the boundary."""
    return x - 2.0 * np.pi * np.round(x / (2.0 * np.pi))


def observed_ipd(specs, reference_channel: int = 0):
    """Phase of each channel against the reference channel.

    Returns:
        phi: (n_pairs, n_freq, n_frames) wrapped phase differences in
            (-pi, pi], pair p being channel pair_channels[p] minus the
            reference.
        pair_channels: tuple of non-reference channel indices in order.
    """
    specs = list(specs)
    if len(specs) < 2:
        raise DataError("need at least two channels for phase differences")
    if not 0 <= reference_channel < len(specs):
        raise DataError(f"reference channel {reference_channel} out of range")
    shape = specs[0].bins.shape
    for s in specs:
        if s.bins.shape != shape:
            raise DataError("channel spectrograms must share shape")
    ref = specs[reference_channel].bins
    pairs = tuple(c for c in range(len(specs)) if c != reference_channel)
    phi = np.stack([np.angle(specs[c].bins * np.conj(ref)) for c in pairs])
    return phi, pairs


def _phat_correlation(cross: np.ndarray, omega: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Summed phase-transform cross-correlation evaluated on the delay grid."""
    total = np.zeros(grid.size)
    for p in range(cross.shape[0]):
        mag = np.abs(cross[p])
        normed = np.where(mag > 0, cross[p] / np.maximum(mag, 1e-30), 0.0)
        spectrum = normed.sum(axis=1)
        steering = np.exp(1j * np.outer(grid, omega))
        total += np.real(steering @ spectrum)
    return total


def _top_peaks(values: np.ndarray, grid: np.ndarray, count: int, min_sep: float) -> np.ndarray:
    """Greedy selection of the strongest grid points with minimum spacing."""
    order = np.argsort(values)[::-1]
    chosen = []
    for idx in order:
        if all(abs(grid[idx] - grid[j]) >= min_sep for j in chosen):
            chosen.append(idx)
        if len(chosen) == count:
            break
    while len(chosen) < count:
        for idx in order:
            if idx not in chosen:
                chosen.append(idx)
                break
    return grid[np.array(chosen[:count])]


def run_em(specs, cfg: MesslConfig) -> MesslResult:
    """Fit the clustering model and return posterior masks.

    The trace holds one log likelihood per E step including a final pass
    after the last M step, so masks and parameters are consistent.
    """
    specs = list(specs)
    phi, pairs = observed_ipd(specs, cfg.reference_channel)
    if sum(float(np.sum(np.abs(s.bins) ** 2)) for s in specs) == 0.0:
        raise NumericalError("silent input: no energy in any channel")

    window_size = specs[0].config.window_size
    n_freq, n_frames = specs[0].bins.shape
    n_pairs = len(pairs)
    k_total = cfg.n_sources + (1 if cfg.use_garbage else 0)
    omega = 2.0 * np.pi * np.arange(n_freq) / window_size

    ref_bins = specs[cfg.reference_channel].bins
    cross = np.stack([specs[c].bins * np.conj(ref_bins) for c in pairs])
    grid = np.asarray(cfg.delay_grid, dtype=np.float64)
    if grid.size < cfg.n_sources:
        raise DataError(
            f"delay grid has {grid.size} candidates for {cfg.n_sources} sources"
        )

    peaks = _top_peaks(
        _phat_correlation(cross, omega, grid),
        grid,
        cfg.n_sources,
        min_sep=max(cfg.grid_step, 1.0),
    )
    delays = np.tile(peaks[:, None], (1, n_pairs))
    mean = np.zeros((cfg.n_sources, n_freq))
    var = np.ones((cfg.n_sources, n_freq))
    log_priors = np.full(k_total, -np.log(k_total))

    def residuals(k: int) -> np.ndarray:
        # A channel lagging the reference by tau samples shows the phase
        # difference -omega * tau, so the residual adds the prediction back.
        pred = np.outer(delays[k], omega)          # (n_pairs, n_freq)
        return _wrap(phi + pred[:, :, None])

    def e_step():
        log_post = np.empty((k_total, n_freq, n_frames))
        for k in range(cfg.n_sources):
            r = residuals(k)
            dev = r - mean[k][None, :, None]
            log_norm = -0.5 * np.log(2.0 * np.pi * var[k])
            log_post[k] = (
                log_norm[None, :, None]
                - dev * dev / (2.0 * var[k][None, :, None])
            ).sum(axis=0)
        if cfg.use_garbage:
            log_post[-1] = n_pairs * _LOG_UNIFORM
        log_post += log_priors[:, None, None]
        total = logsumexp(log_post, axis=0)
        gamma = np.exp(log_post - total[None])
        return gamma, float(np.sum(total))

    trace = []
    gamma = None
    for iteration in range(cfg.n_iterations):
        gamma, loglik = e_step()
        trace.append(loglik)
        if iteration >= 1:
            prev = trace[-2]
            if abs(loglik - prev) <= cfg.convergence_tol * (abs(prev) + 1.0):
                break

        # M step, coordinate ascent: delays first (old mean/var), then the
        # residual Gaussians in closed form, then the priors.
        for k in range(cfg.n_sources):
            weight = gamma[k] / (2.0 * var[k][:, None])       # (n_freq, n_frames)
            for p in range(n_pairs):
                cand = grid
                if not np.any(np.abs(grid - delays[k, p]) < 1e-12):
                    cand = np.append(grid, delays[k, p])
                pred = np.outer(cand, omega)                  # (n_cand, n_freq)
                r = _wrap(phi[p][None] + pred[:, :, None])
                dev = r - mean[k][None, :, None]
                score = -np.einsum("gft,ft->g", dev * dev, weight)
                delays[k, p] = cand[int(np.argmax(score))]

        for k in range(cfg.n_sources):
            r = residuals(k)
            denom = n_pairs * gamma[k].sum(axis=1)            # (n_freq,)
            ok = denom > 1e-12
            num_mean = np.einsum("pft,ft->f", r, gamma[k])
            mean[k][ok] = num_mean[ok] / denom[ok]
            dev = r - mean[k][None, :, None]
            num_var = np.einsum("pft,ft->f", dev * dev, gamma[k])
            var[k][ok] = np.maximum(num_var[ok] / denom[ok], VAR_FLOOR)

        priors = gamma.reshape(k_total, -1).mean(axis=1)
        log_priors = np.log(np.maximum(priors, _PRIOR_FLOOR))

    gamma, loglik = e_step()
    trace.append(loglik)

    if cfg.target_source is not None:
        target_index = cfg.target_source
    else:
        target_index = int(np.argmin(np.mean(np.abs(delays), axis=1)))

    masks = tuple(MaskGrid(values=gamma[k]) for k in range(k_total))
    params = MesslParams(
        delays=delays,
        residual_mean=mean,
        residual_var=var,
        priors=np.exp(log_priors),
    )
    return MesslResult(
        masks=masks,
        params=params,
        loglik_trace=np.asarray(trace),
        target_index=target_index,
        pair_channels=tuple(pairs),
    )


def binarize(mask: MaskGrid, threshold: float = 0.5) -> MaskGrid:
    """Hard 0/1 mask: one where the value strictly exceeds the threshold."""
    return MaskGrid(values=(mask.values > threshold).astype(np.float64))
