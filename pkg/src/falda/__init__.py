"""Probabilistic time-series forecasting with Fourier decomposition and
residual diffusion.

A window is split into non-stationary, stationary and noise terms; small
point models predict the first two, and a conditional diffusion model with
a lightweight trend/season denoiser samples the residual, which is added
back onto the point forecast.
"""

from .diffusion import (NoiseSchedule, card_forward_chain, ddim_step,
                        ddpm_posterior_step, linear_schedule, q_sample,
                        verify_equivalence)
from .gradcore import (Adam, Tensor, detach, layer_norm, linear,
                       moving_average, no_grad, silu, sinusoidal_embedding)
from .metrics import (ForecastEnsemble, MetricReport, crps_empirical,
                      crps_sum, mse_mae, picp, qice)
from .nets import (DemaDenoiser, FaldaModel, LinearBackbone, MlpBackbone,
                   NsAdapter, load_manifest, save_manifest)
from .spectral import Decomposition, Spectrum, decompose, dft_real, idft_real
from .training import TrainConfig, schedule_flags, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "Tensor", "detach", "layer_norm", "linear", "moving_average",
    "no_grad", "silu", "sinusoidal_embedding",
    "Spectrum", "Decomposition", "dft_real", "idft_real", "decompose",
    "NoiseSchedule", "linear_schedule", "q_sample", "ddpm_posterior_step",
    "ddim_step", "card_forward_chain", "verify_equivalence",
    "NsAdapter", "LinearBackbone", "MlpBackbone", "DemaDenoiser",
    "FaldaModel", "save_manifest", "load_manifest",
    "TrainConfig", "schedule_flags", "train",
    "ForecastEnsemble", "MetricReport", "mse_mae", "crps_empirical",
    "crps_sum", "picp", "qice",
    "__version__",
]
