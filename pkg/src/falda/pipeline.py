"""Dataset ingestion, synthetic data, forecasting, evaluation, plotting.

The ingest format is delimited text with a header row, a leading ``date``
column, and numeric value columns. Splits are contiguous train/val/test
slices; standardization statistics come from the train slice only and
every window lives entirely inside its split, so the window count per
split is split_len - lookback - horizon + 1 at stride 1.

All randomness is derived from (seed, purpose, window index, ...) paths,
so outputs are pure functions of inputs, configuration and seed, and test
windows may be evaluated in any order.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffusion, spectral
from .errors import ConfigError, DataError, ShapeError
from .gradcore import Tensor, no_grad
from .metrics import ForecastEnsemble, MetricAccumulator

DUMP_VERSION = 1
SIDE_CAR_VERSION = 1


def derive_rng(seed, *path):
    """Generator for one purpose; disjoint paths give independent streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


# -- ingestion ----------------------------------------------------------------


@dataclass
class DatasetSpec:
    lookback: int
    horizon: int
    stride: int = 1
    split_train: float = 0.7
    split_val: float = 0.1


@dataclass
class Scale:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        return (values - self.mean) / self.std

    def invert(self, values):
        return values * self.std + self.mean


class WindowSet:
    """Sliding (lookback, target) pairs over one standardized split."""

    def __init__(self, values, lookback, horizon, stride=1):
        self.values = values
        self.lookback = lookback
        self.horizon = horizon
        self.stride = stride
        span = values.shape[0] - lookback - horizon + 1
        self.count = max(0, -(-span // stride)) if span > 0 else 0

    def __len__(self):
        return self.count

    def window(self, i):
        if not 0 <= i < self.count:
            raise IndexError(f"window {i} out of range [0, {self.count})")
        start = i * self.stride
        x = self.values[start:start + self.lookback]
        y = self.values[start + self.lookback:start + self.lookback + self.horizon]
        return x, y


@dataclass
class StandardizedDataset:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    scale: Scale
    spec: DatasetSpec
    channel_names: list

    @property
    def channels(self):
        return self.train.values.shape[1]


def read_series(path):
    """Parse a benchmark-style CSV: header, date column, numeric channels."""
    rows = []
    names = None
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}")
    with fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if names is None:
                if len(row) < 2:
                    raise DataError(f"{path}: header must have a date column plus channels")
                names = [c.strip() for c in row[1:]]
                continue
            if len(row) != len(names) + 1:
                raise DataError(
                    f"{path}:{lineno}: expected {len(names) + 1} columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})")
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64), names


def ingest(path, spec):
    """Load, split and standardize a series into window sets."""
    values, names = read_series(path)
    n = values.shape[0]
    n_train = int(n * spec.split_train)
    n_val = int(n * spec.split_val)
    n_test = n - n_train - n_val
    need = spec.lookback + spec.horizon
    for label, length in (("train", n_train), ("val", n_val), ("test", n_test)):
        if length - need + 1 <= 0:
            raise ConfigError(
                f"{label} split of length {length} admits no windows of "
                f"lookback {spec.lookback} + horizon {spec.horizon}")

    train_slice = values[:n_train]
    mean = train_slice.mean(axis=0)
    std = train_slice.std(axis=0)
    flat = std < 1e-12
    if np.any(flat):
        warnings.warn(
            f"{int(flat.sum())} constant channel(s); standardizing with std = 1")
        std = np.where(flat, 1.0, std)
    scale = Scale(mean=mean, std=std)

    def windows(segment):
        return WindowSet(scale.apply(segment), spec.lookback, spec.horizon, spec.stride)

    return StandardizedDataset(
        train=windows(train_slice),
        val=windows(values[n_train:n_train + n_val]),
        test=windows(values[n_train + n_val:]),
        scale=scale, spec=spec, channel_names=names)


# -- synthetic data ------------------------------------------------------------

SYNTH_KINDS = ("sinusoid-trend", "ar1-seasonal")


def synth(kind, length, channels, sigma, seed, out_path,
          period=24, rho=0.7, amplitude=2.0):
    """Write a reproducible synthetic series in the ingest format.

    sinusoid-trend: two bin-aligned sinusoids (3 and 17 cycles over the
    full length) plus a mild centered linear drift and white noise.
    ar1-seasonal: a bin-alignable seasonal cycle plus an AR(1) component
    with unit marginal variance scaled by ``sigma``.

    Generator parameters (including the per-channel phases) go to a
    ``<out>.meta`` sidecar so tests can reconstruct the components.
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if channels < 1 or length < 8:
        raise ConfigError("need at least 1 channel and 8 samples")
    rng = derive_rng(seed, 9)
    t = np.arange(length)
    meta = {
        "format_version": SIDE_CAR_VERSION, "kind": kind, "length": length,
        "channels": channels, "sigma": sigma, "seed": seed,
    }
    values = np.empty((length, channels))
    if kind == "sinusoid-trend":
        cycles = (3, 17)
        amps = (4.0, 2.0)
        rise = 0.3
        if length <= 2 * max(cycles):
            raise ConfigError(f"length {length} too short for {max(cycles)} cycles")
        phases = rng.uniform(0.0, 2.0 * math.pi, size=(channels, 2))
        for d in range(channels):
            base = sum(a * np.sin(2.0 * math.pi * c * t / length + phases[d, i])
                       for i, (a, c) in enumerate(zip(amps, cycles)))
            trend = rise * (t / (length - 1) - 0.5)
            values[:, d] = base + trend + sigma * rng.normal(size=length)
        meta.update({
            "cycles": " ".join(map(str, cycles)),
            "amplitudes": " ".join(format(a, ".17g") for a in amps),
            "rise": rise,
            "phases": " ".join(format(p, ".17g") for p in phases.reshape(-1)),
        })
    else:
        phases = rng.uniform(0.0, 2.0 * math.pi, size=channels)
        for d in range(channels):
            seasonal = amplitude * np.sin(2.0 * math.pi * t / period + phases[d])
            u = np.empty(length)
            u[0] = rng.normal()
            shocks = rng.normal(size=length)
            damp = math.sqrt(1.0 - rho * rho)
            for i in range(1, length):
                u[i] = rho * u[i - 1] + damp * shocks[i]
            values[:, d] = seasonal + sigma * u
        meta.update({
            "period": period, "rho": rho, "amplitude": amplitude,
            "phases": " ".join(format(p, ".17g") for p in phases),
        })

    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date"] + [f"ch{d}" for d in range(channels)])
        for i in range(length):
            writer.writerow([str(i)] + [format(v, ".17g") for v in values[i]])
    with open(str(out_path) + ".meta", "w") as fh:
        for key, value in meta.items():
            fh.write(f"{key} = {value}\n")
    return out_path


def read_sidecar(path):
    values = {}
    with open(path) as fh:
        for line in fh:
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


# -- forecasting --------------------------------------------------------------


def forecast(model, x, n_samples, rng):
    """Sample an ensemble of future trajectories for one lookback window.

    The point prediction (adapter + backbone on the decomposed window) is
    computed once; the residual is then sampled n_samples times through
    the accelerated reverse subsequence conditioned on the window's noise
    term. The starting noise is drawn once and shared across samples, so
    eta exactly interpolates from a collapsed deterministic ensemble
    (eta = 0) to ancestral-like diversity (eta = 1).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.lookback, model.channels):
        raise ShapeError(
            f"window shape {x.shape} does not match the model's "
            f"({model.lookback}, {model.channels})")
    if n_samples < 1:
        raise ConfigError(f"need at least one sample, got {n_samples}")
    dec = spectral.decompose(x, model.k1, model.k2)
    with no_grad():
        point = model.point_forecast(
            Tensor(dec.non), Tensor(dec.stat), Tensor(x)).data
        cond = Tensor(dec.noise[None])
        shape = (n_samples, model.horizon, model.channels)
        state = np.broadcast_to(rng.normal(size=shape[1:]), shape).copy()
        levels = diffusion.ddim_subsequence(model.schedule.K, model.ddim_steps)
        for i, k in enumerate(levels):
            k_prev = levels[i + 1] if i + 1 < len(levels) else 0
            r0_hat = model.denoiser.forward(Tensor(state), k, cond).data
            z = rng.normal(size=shape)
            state = diffusion.ddim_step(state, r0_hat, k, k_prev, model.eta,
                                        model.schedule, z)
    return ForecastEnsemble(samples=point[None] + state,
                            scale_mean=model.scale_mean, scale_std=model.scale_std)


def forecast_window(model, window_set, index, n_samples, seed):
    """Forecast one indexed window with the canonical seed derivation."""
    x, y = window_set.window(index)
    ensemble = forecast(model, x, n_samples, derive_rng(seed, 2, index))
    ensemble.truth = y
    return ensemble


def evaluate(model, window_set, n_samples, seed, m_bins=10, lo=2.5, hi=97.5,
             dump_dir=None):
    """Score every window of a split and pool the metrics.

    Optionally dumps each window's ensemble as delimited text (one file
    per window, one row per sample, time-major flattening).
    """
    if len(window_set) == 0:
        raise ConfigError("no windows to evaluate")
    accumulator = MetricAccumulator(m_bins=m_bins, lo=lo, hi=hi)
    for i in range(len(window_set)):
        ensemble = forecast_window(model, window_set, i, n_samples, seed)
        accumulator.add(ensemble)
        if dump_dir is not None:
            dump_ensemble(ensemble, f"{dump_dir}/window{i:05d}.txt")
    return accumulator.report()


def dump_ensemble(ensemble, path):
    n, s, d = ensemble.samples.shape
    with open(path, "w") as fh:
        fh.write(f"# ensemble format_version={DUMP_VERSION} samples={n} "
                 f"horizon={s} channels={d} layout=row-per-sample,time-major\n")
        for row in ensemble.samples.reshape(n, s * d):
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


# -- plotting -------------------------------------------------------------------


def plot_ensemble(ensemble, out_path):
    """Render truth, median, and 50%/90% interval bands as an SVG."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    samples = ensemble.samples
    if samples.shape[0] == 0:
        raise ConfigError("cannot plot an empty ensemble")
    q05, q25, q50, q75, q95 = np.percentile(samples, [5, 25, 50, 75, 95], axis=0)
    steps = np.arange(samples.shape[1])
    d = samples.shape[2]
    fig, axes = plt.subplots(d, 1, figsize=(8, 2.2 * d), sharex=True, squeeze=False)
    for c in range(d):
        ax = axes[c, 0]
        ax.fill_between(steps, q05[:, c], q95[:, c], color="#b8e0c2", label="90% interval")
        ax.fill_between(steps, q25[:, c], q75[:, c], color="#5aa86e", label="50% interval")
        ax.plot(steps, q50[:, c], color="black", lw=1.2, label="median")
        if ensemble.truth is not None:
            ax.plot(steps, ensemble.truth[:, c], color="#c23b3b", lw=1.2, label="truth")
        ax.set_ylabel(f"ch{c}")
        if c == 0:
            ax.legend(loc="upper right", fontsize=7)
    axes[-1, 0].set_xlabel("forecast step")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path
