"""The three component networks and the bundled forecaster.

All maps act along the time (or latent) axis with weights shared across
channels, so arrays flow through the networks channel-major internally:
a (T, D) window becomes (D, T) before its projection and the result is
transposed back. Latents are therefore (D, hidden) where the math reads
(hidden, D); content is identical up to that transpose.
"""

from __future__ import annotations

import numpy as np

from . import diffusion
from .errors import ConfigError, ShapeError
from .gradcore import (Tensor, concat_last, layer_norm, linear,
                       moving_average, sinusoidal_embedding)


def _init_weight(rng, fan_in, fan_out):
    return Tensor(rng.normal(0.0, fan_in ** -0.5, size=(fan_in, fan_out)),
                  requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _check_window(x, length, channels, what):
    if x.data.ndim < 2 or x.data.shape[-2] != length or x.data.shape[-1] != channels:
        raise ShapeError(
            f"{what} must have trailing shape ({length}, {channels}), got {x.data.shape}")


class NsAdapter:
    """Per-channel MLP predicting the non-stationary future component.

    Takes both the non-stationary part of the lookback and the full
    lookback: out = W3 ReLU(W2 concat(ReLU(W1 x_non), x)), applied along
    the time axis with weights shared across channels. No biases.
    """

    def __init__(self, lookback, horizon, hidden=64, rng=None):
        rng = rng or np.random.default_rng(0)
        self.lookback = lookback
        self.horizon = horizon
        self.hidden = hidden
        self.w1 = _init_weight(rng, lookback, hidden)
        self.w2 = _init_weight(rng, hidden + lookback, hidden)
        self.w3 = _init_weight(rng, hidden, horizon)

    def forward(self, x_non, x):
        if x_non.data.shape != x.data.shape:
            raise ShapeError(
                f"x_non shape {x_non.data.shape} differs from x shape {x.data.shape}")
        _check_window(x, self.lookback, x.data.shape[-1], "adapter input")
        u = (x_non.swap_last2() @ self.w1).relu()
        z = concat_last([u, x.swap_last2()])
        h = (z @ self.w2).relu()
        return (h @ self.w3).swap_last2()

    def named_parameters(self):
        return [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)]


class LinearBackbone:
    """One linear map from lookback to horizon per channel.

    Weights are shared across channels by default; ``per_channel=True``
    gives every channel its own map.
    """

    variant = "linear"

    def __init__(self, lookback, horizon, channels=None, per_channel=False, rng=None):
        rng = rng or np.random.default_rng(0)
        self.lookback = lookback
        self.horizon = horizon
        self.per_channel = per_channel
        self.channels = channels
        if per_channel:
            if not channels:
                raise ConfigError("per-channel backbone needs the channel count")
            self.weights = [_init_weight(rng, lookback, horizon) for _ in range(channels)]
            self.biases = [_zeros(horizon) for _ in range(channels)]
        else:
            self.weight = _init_weight(rng, lookback, horizon)
            self.bias = _zeros(horizon)

    def forward(self, x_stat):
        d = x_stat.data.shape[-1]
        _check_window(x_stat, self.lookback, d, "backbone input")
        if not self.per_channel:
            return (x_stat.swap_last2() @ self.weight + self.bias).swap_last2()
        if d != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {d}")
        cols = []
        for c in range(d):
            col = x_stat.slice_last(c, c + 1).swap_last2()  # (..., 1, T)
            cols.append((col @ self.weights[c] + self.biases[c]).swap_last2())
        return concat_last(cols)

    def named_parameters(self):
        if self.per_channel:
            out = []
            for c in range(self.channels):
                out.append((f"w.{c}", self.weights[c]))
                out.append((f"b.{c}", self.biases[c]))
            return out
        return [("w", self.weight), ("b", self.bias)]


class MlpBackbone:
    """Two-layer ReLU map from lookback to horizon, shared across channels."""

    variant = "mlp"

    def __init__(self, lookback, horizon, hidden=256, rng=None):
        rng = rng or np.random.default_rng(0)
        self.lookback = lookback
        self.horizon = horizon
        self.hidden = hidden
        self.w1 = _init_weight(rng, lookback, hidden)
        self.b1 = _zeros(hidden)
        self.w2 = _init_weight(rng, hidden, horizon)
        self.b2 = _zeros(horizon)

    def forward(self, x_stat):
        _check_window(x_stat, self.lookback, x_stat.data.shape[-1], "backbone input")
        h = linear(x_stat.swap_last2(), self.w1, self.b1).relu()
        return linear(h, self.w2, self.b2).swap_last2()

    def named_parameters(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


class _EncoderLayer:
    """One trend/season block with adaptive modulation.

    The latent splits exactly into a moving-average trend and its season
    remainder; each branch is layer-normalized and modulated by scale,
    shift and gating factors derived from the conditioning embedding; the
    merged branches re-enter through a gated residual connection.
    Modulation maps start at zero, so the layer is born as the identity.
    """

    def __init__(self, hidden, kernel, rng):
        self.kernel = kernel
        self.mod_season_w = _zeros(hidden, 3 * hidden)
        self.mod_season_b = _zeros(3 * hidden)
        self.mod_trend_w = _zeros(hidden, 3 * hidden)
        self.mod_trend_b = _zeros(3 * hidden)
        self.merge_w = _init_weight(rng, hidden, hidden)
        self.merge_b = _zeros(hidden)

    def forward(self, h, cond_act):
        hidden = h.data.shape[-1]
        trend = moving_average(h, self.kernel)
        season = h - trend

        def modulate(branch, w, b):
            mods = linear(cond_act, w, b)
            gamma = mods.slice_last(0, hidden)
            beta = mods.slice_last(hidden, 2 * hidden)
            gate = mods.slice_last(2 * hidden, 3 * hidden)
            return (gamma + 1.0) * layer_norm(branch) + beta, gate

        season_bar, season_gate = modulate(season, self.mod_season_w, self.mod_season_b)
        trend_bar, trend_gate = modulate(trend, self.mod_trend_w, self.mod_trend_b)
        merged = linear(season_bar + trend_bar, self.merge_w, self.merge_b)
        return h + (season_gate + trend_gate) * merged

    def named_parameters(self, prefix):
        return [
            (f"{prefix}.season.w", self.mod_season_w),
            (f"{prefix}.season.b", self.mod_season_b),
            (f"{prefix}.trend.w", self.mod_trend_w),
            (f"{prefix}.trend.b", self.mod_trend_b),
            (f"{prefix}.merge.w", self.merge_w),
            (f"{prefix}.merge.b", self.merge_b),
        ]


class DemaDenoiser:
    """Decomposition MLP with adaptive layer normalization.

    Directly reconstructs the clean residual from its noised version, the
    diffusion step, and the noise term of the lookback window. Modulation
    and output projections start at zero, so a fresh denoiser is the zero
    map and leaves the surrounding model's behavior unchanged.
    """

    def __init__(self, lookback, horizon, hidden=128, layers=2, kernel=25, rng=None):
        if kernel < 1 or kernel % 2 == 0:
            raise ConfigError(f"moving-average kernel must be odd, got {kernel}")
        if hidden % 2 != 0:
            raise ConfigError(f"hidden width must be even for the step embedding, got {hidden}")
        rng = rng or np.random.default_rng(0)
        self.lookback = lookback
        self.horizon = horizon
        self.hidden = hidden
        self.kernel = kernel
        self.input_w = _init_weight(rng, horizon, hidden)
        self.input_b = _zeros(hidden)
        self.cond_w = _init_weight(rng, lookback, hidden)
        self.cond_b = _zeros(hidden)
        self.step_w = _init_weight(rng, hidden, hidden)
        self.step_b = _zeros(hidden)
        self.layers = [_EncoderLayer(hidden, kernel, rng) for _ in range(layers)]
        self.dec_mod_w = _zeros(hidden, 2 * hidden)
        self.dec_mod_b = _zeros(2 * hidden)
        self.out_w = _zeros(hidden, horizon)
        self.out_b = _zeros(horizon)

    def embed(self, rk, k, cond):
        """Project the noisy residual and build the conditioning embedding.

        Returns channel-major latents: the residual embedding and the sum
        of the step embedding (broadcast across channels) with the
        projected condition.
        """
        _check_window(rk, self.horizon, rk.data.shape[-1], "noisy residual")
        _check_window(cond, self.lookback, cond.data.shape[-1], "condition")
        h0 = linear(rk.swap_last2(), self.input_w, self.input_b)
        pe = sinusoidal_embedding(k, self.hidden)
        e = linear(cond.swap_last2(), self.cond_w, self.cond_b) \
            + linear(pe, self.step_w, self.step_b)
        return h0, e

    def forward(self, rk, k, cond):
        h, e = self.embed(rk, k, cond)
        cond_act = e.silu()
        for layer in self.layers:
            h = layer.forward(h, cond_act)
        mods = linear(cond_act, self.dec_mod_w, self.dec_mod_b)
        gamma = mods.slice_last(0, self.hidden)
        beta = mods.slice_last(self.hidden, 2 * self.hidden)
        h = (gamma + 1.0) * layer_norm(h) + beta
        return linear(h, self.out_w, self.out_b).swap_last2()

    def named_parameters(self):
        params = [
            ("input.w", self.input_w), ("input.b", self.input_b),
            ("cond.w", self.cond_w), ("cond.b", self.cond_b),
            ("step.w", self.step_w), ("step.b", self.step_b),
        ]
        for i, layer in enumerate(self.layers):
            params.extend(layer.named_parameters(f"enc{i}"))
        params.extend([
            ("dec.w", self.dec_mod_w), ("dec.b", self.dec_mod_b),
            ("out.w", self.out_w), ("out.b", self.out_b),
        ])
        return params


BACKBONES = ("linear", "mlp")


class FaldaModel:
    """Adapter + backbone + denoiser with their shared settings.

    Holds everything a forecast needs: the decomposition bin counts, the
    noise schedule, the sampler settings, and the standardization scale of
    the data the model was fit on.
    """

    def __init__(self, lookback, horizon, channels, k1, k2,
                 backbone="linear", per_channel=False, mlp_hidden=256,
                 ns_hidden=64, hidden=128, layers=2, kernel=25,
                 steps=1000, finetune_step=100, ddim_steps=10, eta=1.0,
                 seed=0, scale_mean=None, scale_std=None, rng=None):
        if backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {backbone!r}; choose from {BACKBONES}")
        if not 1 <= finetune_step <= steps:
            raise ConfigError(
                f"finetune step {finetune_step} outside [1, {steps}]")
        n_bins = min(lookback, horizon) // 2 + 1
        if k1 + k2 > n_bins:
            raise ConfigError(
                f"k1 + k2 = {k1 + k2} exceeds the {n_bins} bins of the shorter window")
        rng = rng or np.random.default_rng(seed)
        self.lookback = lookback
        self.horizon = horizon
        self.channels = channels
        self.k1 = k1
        self.k2 = k2
        self.backbone_variant = backbone
        self.per_channel = per_channel
        self.mlp_hidden = mlp_hidden
        self.ns_hidden = ns_hidden
        self.hidden = hidden
        self.n_layers = layers
        self.kernel = kernel
        self.steps = steps
        self.finetune_step = finetune_step
        self.ddim_steps = ddim_steps
        self.eta = eta
        self.seed = seed
        self.scale_mean = (np.zeros(channels) if scale_mean is None
                           else np.asarray(scale_mean, dtype=np.float64))
        self.scale_std = (np.ones(channels) if scale_std is None
                          else np.asarray(scale_std, dtype=np.float64))

        self.adapter = NsAdapter(lookback, horizon, ns_hidden, rng)
        if backbone == "linear":
            self.backbone = LinearBackbone(lookback, horizon, channels, per_channel, rng)
        else:
            self.backbone = MlpBackbone(lookback, horizon, mlp_hidden, rng)
        self.denoiser = DemaDenoiser(lookback, horizon, hidden, layers, kernel, rng)
        self.schedule = diffusion.linear_schedule(steps)

    def point_forecast(self, x_non, x_stat, x):
        """Sum of the adapter and backbone predictions (tensors in/out)."""
        return self.adapter.forward(x_non, x) + self.backbone.forward(x_stat)

    def named_parameters(self):
        params = [(f"adapter.{n}", p) for n, p in self.adapter.named_parameters()]
        params += [(f"backbone.{n}", p) for n, p in self.backbone.named_parameters()]
        params += [(f"denoiser.{n}", p) for n, p in self.denoiser.named_parameters()]
        return params

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def config_dict(self):
        return {
            "backbone": self.backbone_variant,
            "lookback": self.lookback,
            "horizon": self.horizon,
            "channels": self.channels,
            "k1": self.k1,
            "k2": self.k2,
            "per_channel": self.per_channel,
            "mlp_hidden": self.mlp_hidden,
            "ns_hidden": self.ns_hidden,
            "hidden": self.hidden,
            "layers": self.n_layers,
            "kernel": self.kernel,
            "steps": self.steps,
            "finetune_step": self.finetune_step,
            "ddim_steps": self.ddim_steps,
            "eta": self.eta,
            "seed": self.seed,
        }


# -- manifest ------------------------------------------------------------

MANIFEST_VERSION = 1


def save_manifest(model, path):
    """Write the model as a named-section text document.

    A flat header records the variant and every hyperparameter, followed by
    one ``[param <name>]`` section per parameter with its shape and values
    at full float64 precision.
    """
    lines = [f"format_version = {MANIFEST_VERSION}", "kind = falda-forecaster"]
    for key, value in model.config_dict().items():
        lines.append(f"{key} = {_fmt_value(value)}")
    lines.append("scale_mean = " + " ".join(format(v, ".17g") for v in model.scale_mean))
    lines.append("scale_std = " + " ".join(format(v, ".17g") for v in model.scale_std))
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        lines.append(f"[param {name}]")
        lines.append("shape = " + " ".join(str(s) for s in p.data.shape))
        for start in range(0, flat.size, 8):
            lines.append(" ".join(format(v, ".17g") for v in flat[start:start + 8]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def load_manifest(path):
    """Rebuild a model from a manifest written by ``save_manifest``."""
    header = {}
    sections = {}
    current = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[param ") and line.endswith("]"):
                current = line[len("[param "):-1]
                sections[current] = {"shape": None, "values": []}
            elif current is None:
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
            elif line.startswith("shape ="):
                sections[current]["shape"] = tuple(
                    int(t) for t in line.partition("=")[2].split())
            else:
                sections[current]["values"].extend(float(t) for t in line.split())

    if header.get("format_version") != str(MANIFEST_VERSION):
        raise ConfigError(
            f"unsupported manifest format_version {header.get('format_version')!r}")
    if header.get("kind") != "falda-forecaster":
        raise ConfigError(f"not a forecaster manifest: kind={header.get('kind')!r}")

    def geti(key):
        return int(header[key])

    model = FaldaModel(
        lookback=geti("lookback"), horizon=geti("horizon"), channels=geti("channels"),
        k1=geti("k1"), k2=geti("k2"), backbone=header["backbone"],
        per_channel=header.get("per_channel", "false") == "true",
        mlp_hidden=geti("mlp_hidden"), ns_hidden=geti("ns_hidden"),
        hidden=geti("hidden"), layers=geti("layers"), kernel=geti("kernel"),
        steps=geti("steps"), finetune_step=geti("finetune_step"),
        ddim_steps=geti("ddim_steps"), eta=float(header["eta"]), seed=geti("seed"),
        scale_mean=np.array([float(t) for t in header["scale_mean"].split()]),
        scale_std=np.array([float(t) for t in header["scale_std"].split()]),
    )
    named = dict(model.named_parameters())
    if set(named) != set(sections):
        missing = set(named) ^ set(sections)
        raise ConfigError(f"manifest parameter sections do not match the model: {sorted(missing)}")
    for name, blob in sections.items():
        values = np.array(blob["values"])
        if blob["shape"] is None or values.size != int(np.prod(blob["shape"], initial=1)):
            raise ConfigError(f"parameter section {name!r} is malformed")
        if named[name].data.shape != blob["shape"]:
            raise ConfigError(
                f"parameter {name!r} shape {blob['shape']} does not match "
                f"model shape {named[name].data.shape}")
        named[name].data[...] = values.reshape(blob["shape"])
    return model
