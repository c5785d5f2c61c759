"""Point and probabilistic metrics over forecast ensembles.

All metrics run on the standardized scale the model was trained on; the
ensemble carries its scale metadata so raw-scale numbers can be recovered.
The CRPS estimator is the energy form
(1/N) sum |x_i - y| - 1/(2 N^2) sum |x_i - x_j|, evaluated per cell via
order statistics; a one-sample ensemble therefore scores exactly its
absolute error. Empirical quantiles interpolate linearly between order
statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EnsembleError, ShapeError

REPORT_VERSION = 1


@dataclass
class ForecastEnsemble:
    """Sampled future trajectories plus the metadata metrics need.

    ``samples`` has shape (N, S, D); the point forecast is the per-element
    median across samples. ``truth`` is filled during evaluation;
    ``scale_mean``/``scale_std`` record the standardization the values
    live in.
    """

    samples: np.ndarray
    truth: np.ndarray = None
    scale_mean: np.ndarray = None
    scale_std: np.ndarray = None

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def point(self):
        return np.median(self.samples, axis=0)


@dataclass
class MetricReport:
    mse: float
    mae: float
    crps: float
    crps_sum: float
    crps_sum_raw: float
    picp: float
    qice: float
    n_samples: int
    m_bins: int
    interval_lo: float = 2.5
    interval_hi: float = 97.5

    KEYS = ("mse", "mae", "crps", "crps_sum", "crps_sum_raw", "picp", "qice",
            "n_samples", "m_bins", "interval_lo", "interval_hi")

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.render())

    def render(self):
        lines = [f"format_version: {REPORT_VERSION}"]
        for key in self.KEYS:
            value = getattr(self, key)
            if isinstance(value, int):
                lines.append(f"{key}: {value}")
            else:
                lines.append(f"{key}: {value:.10g}")
        return "\n".join(lines) + "\n"


def _check_same_shape(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def mse_mae(pred, truth):
    """Element-mean squared and absolute errors."""
    pred, truth = _check_same_shape(pred, truth)
    diff = pred - truth
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def _check_ensemble(samples, truth, minimum=1):
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim < 1 or samples.shape[0] == 0:
        raise EnsembleError("empty ensemble")
    if samples.shape[0] < minimum:
        raise EnsembleError(
            f"need at least {minimum} ensemble members, got {samples.shape[0]}")
    if samples.shape[1:] != truth.shape:
        raise ShapeError(
            f"ensemble cells {samples.shape[1:]} do not match truth {truth.shape}")
    return samples, truth


def crps_cells(samples, truth):
    """Per-cell energy-form CRPS, shape equal to ``truth``.

    The pairwise term comes from sorted-sample gaps: the gap between order
    statistics m and m+1 is crossed by (m+1)(N-m-1) pairs, so
    sum_{i<j} |x_i - x_j| = sum_m gap_m (m+1)(N-m-1). Cost is O(N log N)
    per cell and ties contribute exactly zero.
    """
    samples, truth = _check_ensemble(samples, truth)
    n = samples.shape[0]
    term1 = np.mean(np.abs(samples - truth[None]), axis=0)
    if n == 1:
        return term1
    gaps = np.diff(np.sort(samples, axis=0), axis=0)
    m = np.arange(1, n, dtype=np.float64)
    term2 = np.tensordot(m * (n - m), gaps, axes=(0, 0)) / (n * n)
    # rounding can leave tiny negatives near-perfect ensembles; the score is >= 0
    return np.maximum(term1 - term2, 0.0)


def crps_empirical(samples, truth):
    """Mean CRPS over all cells (scalar truth and 1-D samples allowed)."""
    return float(np.mean(crps_cells(samples, truth)))


def crps_sum(samples, truth):
    """(normalized, raw) CRPS of the channel-summed series.

    Samples and truth are summed across channels, scored per time step,
    and averaged; the normalized value divides by the mean absolute summed
    truth (left raw when that mean is zero).
    """
    samples, truth = _check_ensemble(samples, truth)
    if samples.ndim != 3:
        raise ShapeError(f"expected samples of shape (N, S, D), got {samples.shape}")
    summed = samples.sum(axis=-1)
    truth_sum = truth.sum(axis=-1)
    raw = float(np.mean(crps_cells(summed, truth_sum)))
    denom = float(np.mean(np.abs(truth_sum)))
    return (raw / denom if denom > 0 else raw), raw


def interval_mask(samples, truth, lo=2.5, hi=97.5):
    """Boolean grid: truth inside the per-cell empirical percentile interval."""
    samples, truth = _check_ensemble(samples, truth, minimum=2)
    lower = np.percentile(samples, lo, axis=0)
    upper = np.percentile(samples, hi, axis=0)
    return (truth >= lower) & (truth <= upper)


def picp(samples, truth, lo=2.5, hi=97.5):
    """Percent of cells whose truth falls inside the central interval."""
    return float(100.0 * np.mean(interval_mask(samples, truth, lo, hi)))


def quantile_bin_indices(samples, truth, m_bins=10):
    """Which of ``m_bins`` equal-probability ensemble bins holds each truth.

    Truths below the lowest inner quantile land in bin 0 and above the
    highest in bin m-1, so every cell is counted exactly once.
    """
    samples, truth = _check_ensemble(samples, truth, minimum=max(m_bins, 1))
    if m_bins < 1:
        raise EnsembleError(f"need at least one bin, got {m_bins}")
    if m_bins == 1:
        return np.zeros(truth.shape, dtype=int)
    inner = np.percentile(samples, 100.0 * np.arange(1, m_bins) / m_bins, axis=0)
    return (truth[None] >= inner).sum(axis=0)


def qice_from_counts(counts, m_bins):
    counts = np.asarray(counts, dtype=np.float64)
    rho = counts / counts.sum()
    return float(np.mean(np.abs(rho - 1.0 / m_bins)))


def qice(samples, truth, m_bins=10):
    """Mean absolute deviation of per-bin coverage from the uniform 1/M."""
    bins = quantile_bin_indices(samples, truth, m_bins)
    counts = np.bincount(bins.reshape(-1), minlength=m_bins)
    return qice_from_counts(counts, m_bins)


def report_for_ensemble(ensemble, m_bins=10, lo=2.5, hi=97.5):
    """All six metrics for a single ensemble with its truth attached."""
    samples, truth = ensemble.samples, ensemble.truth
    mse, mae = mse_mae(ensemble.point, truth)
    normalized, raw = crps_sum(samples, truth)
    return MetricReport(
        mse=mse, mae=mae,
        crps=crps_empirical(samples, truth),
        crps_sum=normalized, crps_sum_raw=raw,
        picp=picp(samples, truth, lo, hi),
        qice=qice(samples, truth, m_bins),
        n_samples=ensemble.n_samples, m_bins=m_bins,
        interval_lo=lo, interval_hi=hi)


class MetricAccumulator:
    """Pools per-window ensembles into one test-set report.

    Cell-mean metrics average exactly (every window contributes the same
    number of cells); interval coverage and quantile bins pool across all
    cells before the final ratio, matching the whole-test-set convention.
    """

    def __init__(self, m_bins=10, lo=2.5, hi=97.5):
        self.m_bins = m_bins
        self.lo = lo
        self.hi = hi
        self.n_samples = 0
        self._mse = []
        self._mae = []
        self._crps = []
        self._crps_sum_raw = []
        self._crps_sum_scale = []
        self._inside = 0
        self._cells = 0
        self._bin_counts = np.zeros(m_bins, dtype=np.int64)

    def add(self, ensemble):
        samples, truth = ensemble.samples, ensemble.truth
        self.n_samples = ensemble.n_samples
        mse, mae = mse_mae(ensemble.point, truth)
        self._mse.append(mse)
        self._mae.append(mae)
        self._crps.append(crps_empirical(samples, truth))
        summed = samples.sum(axis=-1)
        truth_sum = truth.sum(axis=-1)
        self._crps_sum_raw.append(float(np.mean(crps_cells(summed, truth_sum))))
        self._crps_sum_scale.append(float(np.mean(np.abs(truth_sum))))
        mask = interval_mask(samples, truth, self.lo, self.hi)
        self._inside += int(mask.sum())
        self._cells += mask.size
        bins = quantile_bin_indices(samples, truth, self.m_bins)
        self._bin_counts += np.bincount(bins.reshape(-1), minlength=self.m_bins)

    def report(self):
        if not self._mse:
            raise EnsembleError("no ensembles accumulated")
        raw = float(np.mean(self._crps_sum_raw))
        denom = float(np.mean(self._crps_sum_scale))
        return MetricReport(
            mse=float(np.mean(self._mse)), mae=float(np.mean(self._mae)),
            crps=float(np.mean(self._crps)),
            crps_sum=raw / denom if denom > 0 else raw, crps_sum_raw=raw,
            picp=100.0 * self._inside / self._cells,
            qice=qice_from_counts(self._bin_counts, self.m_bins),
            n_samples=self.n_samples, m_bins=self.m_bins,
            interval_lo=self.lo, interval_hi=self.hi)
