"""Real-input Fourier analysis and top/bottom amplitude decomposition.

A window is split per channel into three additive parts: the bins with the
largest amplitudes reconstruct the non-stationary term, the smallest
meaningful amplitudes reconstruct the noise term, and the stationary term
is the exact remainder. Selection is per channel and per window, with
deterministic tie-breaking so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

# Bins whose amplitude is below this fraction of the channel's peak
# amplitude carry no signal content; they are excluded from bottom-K
# candidacy (reconstructing from an empty bin contributes nothing, and
# numerically-zero bins would otherwise always win the "smallest" rank).
ZERO_AMPLITUDE_RTOL = 1e-9


@dataclass
class Spectrum:
    """Half-spectrum of a real signal.

    ``bins`` holds the unnormalized forward DFT at frequencies
    0..floor(n/2), one column per channel; ``amplitudes`` the modulus per
    bin. ``length`` is the original series length n.
    """

    bins: np.ndarray
    amplitudes: np.ndarray
    length: int

    @property
    def bin_count(self):
        return self.length // 2 + 1


@dataclass
class Decomposition:
    """Additive (non, stat, noise) split of a window, plus the bins used."""

    non: np.ndarray
    stat: np.ndarray
    noise: np.ndarray
    top_bins: list = field(default_factory=list)
    bottom_bins: list = field(default_factory=list)


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected a 1-D series or 2-D window, got shape {x.shape}")


def dft_real(x):
    """Forward DFT of a real series, non-negative frequencies only.

    Accepts shape (n,) or (n, D); the transform runs along the time axis.
    Round-tripping through ``idft_real`` with all bins kept reproduces the
    input.
    """
    arr, _ = _as_2d(x)  # a 1-D series keeps its channel axis in the spectrum
    n = arr.shape[0]
    if n < 2:
        raise ShapeError(f"series must have at least 2 samples, got {n}")
    bins = np.fft.rfft(arr, axis=0)
    return Spectrum(bins=bins, amplitudes=np.abs(bins), length=n)


def idft_real(spectrum, keep_bins=None):
    """Reconstruct a real series from a subset of half-spectrum bins.

    ``keep_bins`` is a per-channel sequence of bin-index collections (or a
    single collection applied to every channel, or None for all bins).
    Each kept positive-frequency bin implicitly contributes its conjugate
    mirror.
    """
    bins = spectrum.bins
    n = spectrum.length
    n_bins, channels = bins.shape
    if keep_bins is None:
        return np.fft.irfft(bins, n=n, axis=0)

    per_channel = keep_bins
    if len(per_channel) and np.isscalar(per_channel[0]):
        per_channel = [per_channel] * channels
    if len(per_channel) != channels:
        raise ShapeError(
            f"keep_bins must list {channels} channels, got {len(per_channel)}")
    masked = np.zeros_like(bins)
    for d, keep in enumerate(per_channel):
        for j in keep:
            if not 0 <= j < n_bins:
                raise IndexError(f"bin index {j} out of range [0, {n_bins})")
            masked[j, d] = bins[j, d]
    return np.fft.irfft(masked, n=n, axis=0)


def _select_bins(amplitudes, k1, k2):
    """Rank one channel's amplitudes into top-k1 and bottom-k2 index sets.

    Top ties break toward the lower frequency index; bottom ties toward the
    higher. Bottom candidates exclude numerically-zero bins, which carry no
    signal to reconstruct.
    """
    order = np.argsort(-amplitudes, kind="stable")  # stable: ties keep lower index first
    top = order[:k1]
    remaining = order[k1:]
    floor = ZERO_AMPLITUDE_RTOL * (amplitudes.max() if amplitudes.size else 0.0)
    candidates = remaining[amplitudes[remaining] > floor]
    rev = candidates[::-1]  # ties keep higher index first under stable sort
    bottom = rev[np.argsort(amplitudes[rev], kind="stable")[:k2]]
    return top.tolist(), bottom.tolist()


def decompose(x, k1, k2):
    """Split a window into non-stationary, stationary and noise terms.

    Per channel, the k1 largest-amplitude bins reconstruct ``non``; from
    the remaining bins the k2 smallest meaningful amplitudes reconstruct
    ``noise``; ``stat`` is the exact pointwise remainder, so the three
    parts always sum back to the input.
    """
    arr, squeeze = _as_2d(x)
    n = arr.shape[0]
    n_bins = n // 2 + 1
    if k1 < 0 or k2 < 0:
        raise ConfigError(f"bin counts must be non-negative, got k1={k1}, k2={k2}")
    if k1 + k2 > n_bins:
        raise ConfigError(
            f"k1 + k2 = {k1 + k2} exceeds the {n_bins} available bins for length {n}")

    spectrum = dft_real(arr)
    top, bottom = [], []
    for d in range(arr.shape[1]):
        t, b = _select_bins(spectrum.amplitudes[:, d], k1, k2)
        top.append(t)
        bottom.append(b)
    non = idft_real(spectrum, top)
    noise = idft_real(spectrum, bottom)
    stat = arr - non - noise
    if squeeze:
        non, stat, noise = non[:, 0], stat[:, 0], noise[:, 0]
    return Decomposition(non=non, stat=stat, noise=noise, top_bins=top, bottom_bins=bottom)
