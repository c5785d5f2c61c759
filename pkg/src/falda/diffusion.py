"""Noise schedules, forward diffusion, DDPM/DDIM sampling, and the
numerical harness checking that a prior-guided chain shifted by its prior
is the plain residual chain.

All samplers take externally supplied noise so that shared-noise
equivalence tests and seeded reproducibility are possible; given the noise
they are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError

BETA_START = 1e-4
BETA_END = 0.02


class NoiseSchedule:
    """Per-step noise parameters for a K-step diffusion.

    ``beta[k]``, ``alpha[k] = 1 - beta[k]`` are 1-indexed (index 0 unused);
    ``alpha_bar`` is the running product with ``alpha_bar[0] = 1``.
    """

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("need a 1-D array with at least one beta")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        self.K = betas.size
        self.beta = np.concatenate([[np.nan], betas])
        self.alpha = np.concatenate([[np.nan], 1.0 - betas])
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    def check_step(self, k):
        if not 1 <= k <= self.K:
            raise RangeError(f"step {k} outside [1, {self.K}]")


def linear_schedule(steps):
    """Betas linearly spaced from 1e-4 to 0.02 inclusive."""
    if steps < 1:
        raise ConfigError(f"need at least 1 diffusion step, got {steps}")
    return NoiseSchedule(np.linspace(BETA_START, BETA_END, steps))


def q_sample(r0, k, eps, schedule):
    """Jump the clean target straight to noise level k.

    Returns sqrt(abar_k) * r0 + sqrt(1 - abar_k) * eps; ``eps`` is a caller
    supplied standard-normal draw of the same shape.
    """
    schedule.check_step(k)
    abar = schedule.alpha_bar[k]
    return np.sqrt(abar) * np.asarray(r0) + np.sqrt(1.0 - abar) * np.asarray(eps)


def posterior_coefficients(schedule, k):
    """Coefficients (on the clean estimate, on the noisy state) and the
    posterior variance for one reverse step."""
    schedule.check_step(k)
    ab_k = schedule.alpha_bar[k]
    ab_prev = schedule.alpha_bar[k - 1]
    beta_k = schedule.beta[k]
    alpha_k = schedule.alpha[k]
    denom = 1.0 - ab_k
    coef_clean = np.sqrt(ab_prev) * beta_k / denom
    coef_state = np.sqrt(alpha_k) * (1.0 - ab_prev) / denom
    var = (1.0 - ab_prev) / denom * beta_k
    return coef_clean, coef_state, var


def ddpm_posterior_step(rk, r0_hat, k, schedule, z):
    """One ancestral reverse step using the clean-target parameterization.

    ``z`` is a caller-supplied standard-normal draw; it is forced to zero
    at k = 1, where the posterior mean is exactly the clean estimate.
    """
    coef_clean, coef_state, var = posterior_coefficients(schedule, k)
    mean = coef_clean * np.asarray(r0_hat) + coef_state * np.asarray(rk)
    if k == 1:
        return mean
    return mean + np.sqrt(var) * np.asarray(z)


class DdimDiagnostics:
    """Counts variance clamps in DDIM steps (numerical guard events)."""

    def __init__(self):
        self.clamped = 0

    def reset(self):
        self.clamped = 0


ddim_diagnostics = DdimDiagnostics()


def ddim_step(rk, r0_hat, k, k_prev, eta, schedule, z):
    """One accelerated reverse step from level k down to k_prev.

    The denoiser output is treated as the clean target; the implied noise
    direction is re-derived from it. ``eta`` interpolates the injected
    variance from fully deterministic (0) to ancestral-like (1). If the
    requested variance exceeds what the target level admits, the
    deterministic coefficient is clamped to zero and the event counted in
    ``ddim_diagnostics``.
    """
    schedule.check_step(k)
    if not 0 <= k_prev < k:
        raise RangeError(f"k_prev must satisfy 0 <= k_prev < k, got {k_prev} vs {k}")
    ab_k = schedule.alpha_bar[k]
    ab_prev = schedule.alpha_bar[k_prev]
    rk = np.asarray(rk)
    r0_hat = np.asarray(r0_hat)
    eps_hat = (rk - np.sqrt(ab_k) * r0_hat) / np.sqrt(1.0 - ab_k)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_k)) * np.sqrt(1.0 - ab_k / ab_prev)
    residual_var = 1.0 - ab_prev - sigma * sigma
    if residual_var < 0.0:
        ddim_diagnostics.clamped += 1
        residual_var = 0.0
    out = np.sqrt(ab_prev) * r0_hat + np.sqrt(residual_var) * eps_hat
    if sigma > 0.0:
        out = out + sigma * np.asarray(z)
    return out


def ddim_subsequence(steps, n_points):
    """Descending step levels for accelerated sampling.

    For K divisible by ``n_points`` this is K, K-stride, ..., stride with
    stride = K / n_points; the final transition in the sampler then lands
    on level 0. A short schedule degrades gracefully to stride 1.
    """
    if n_points < 1:
        raise ConfigError(f"need at least one sampling point, got {n_points}")
    stride = max(1, steps // n_points)
    return list(range(steps, 0, -stride))


def card_forward_chain(y0, prior, schedule, noises):
    """Forward chain drifting toward a prior prediction.

    One-step recursion y_k = sqrt(alpha_k) y_{k-1}
    + (1 - sqrt(1 - beta_k)) prior + sqrt(beta_k) z_k. With a zero prior
    this is the plain forward chain on y0. Returns the list [y_0, ..., y_K].
    """
    y0 = np.asarray(y0, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if len(noises) != schedule.K:
        raise ConfigError(f"need {schedule.K} noise draws, got {len(noises)}")
    chain = [y0]
    y = y0
    for k in range(1, schedule.K + 1):
        root_alpha = np.sqrt(schedule.alpha[k])
        y = root_alpha * y + (1.0 - root_alpha) * prior + np.sqrt(schedule.beta[k]) * noises[k - 1]
        chain.append(y)
    return chain


def ddpm_forward_chain(r0, schedule, noises):
    """Plain forward chain r_k = sqrt(alpha_k) r_{k-1} + sqrt(beta_k) z_k."""
    r0 = np.asarray(r0, dtype=np.float64)
    if len(noises) != schedule.K:
        raise ConfigError(f"need {schedule.K} noise draws, got {len(noises)}")
    chain = [r0]
    r = r0
    for k in range(1, schedule.K + 1):
        r = np.sqrt(schedule.alpha[k]) * r + np.sqrt(schedule.beta[k]) * noises[k - 1]
        chain.append(r)
    return chain


def prior_posterior_mean(schedule, k, y0, yk, prior):
    """Posterior mean of the prior-guided chain (three-term form)."""
    coef_clean, coef_state, _ = posterior_coefficients(schedule, k)
    c = prior_coefficient(schedule, k)
    return coef_clean * y0 + coef_state * yk + c * prior


def prior_coefficient(schedule, k):
    """The prior's posterior-mean coefficient C_k."""
    schedule.check_step(k)
    ab_k = schedule.alpha_bar[k]
    ab_prev = schedule.alpha_bar[k - 1]
    alpha_k = schedule.alpha[k]
    return 1.0 + (np.sqrt(ab_k) - 1.0) * (np.sqrt(alpha_k) + np.sqrt(ab_prev)) / (1.0 - ab_k)


@dataclass
class EquivalenceReport:
    """Numerical evidence that the prior-guided chain, shifted by its
    prior, is the plain residual chain."""

    steps: int
    trials: int
    pathwise_max_diff: float
    posterior_max_diff: float
    coefficient_max_dev: float
    pathwise_tol: float = 1e-9
    posterior_tol: float = 1e-10
    coefficient_tol: float = 1e-12

    @property
    def pathwise_ok(self):
        return self.pathwise_max_diff <= self.pathwise_tol

    @property
    def posterior_ok(self):
        return self.posterior_max_diff <= self.posterior_tol

    @property
    def coefficient_ok(self):
        return self.coefficient_max_dev <= self.coefficient_tol

    @property
    def passed(self):
        return self.pathwise_ok and self.posterior_ok and self.coefficient_ok

    def lines(self):
        def mark(ok):
            return "PASS" if ok else "FAIL"

        return [
            f"pathwise   max |shifted chain - residual chain| = {self.pathwise_max_diff:.3e}"
            f"  (tol {self.pathwise_tol:.0e})  {mark(self.pathwise_ok)}",
            f"posterior  max |shifted mean - residual mean|   = {self.posterior_max_diff:.3e}"
            f"  (tol {self.posterior_tol:.0e})  {mark(self.posterior_ok)}",
            f"coefficient max |A_k + B_k + C_k - 1|           = {self.coefficient_max_dev:.3e}"
            f"  (tol {self.coefficient_tol:.0e})  {mark(self.coefficient_ok)}",
        ]


def verify_equivalence(trials, schedule, seed=0):
    """Run the three identity checks over random priors and targets.

    (a) pathwise: under shared noise, the prior-guided chain minus its
    prior tracks the plain chain on y0 - prior at every step;
    (b) posterior: the shifted three-term posterior mean equals the
    two-term residual posterior mean at random states;
    (c) the prior's coefficients satisfy A_k + B_k + C_k - 1 = 0 for all k.
    """
    if trials < 1:
        raise ConfigError(f"need at least one trial, got {trials}")
    rng = np.random.default_rng(seed)
    K = schedule.K

    y0 = rng.normal(size=trials)
    prior = rng.normal(size=trials)
    pathwise = 0.0
    y = y0.copy()
    r = y0 - prior
    for k in range(1, K + 1):
        z = rng.normal(size=trials)
        root_alpha = np.sqrt(schedule.alpha[k])
        root_beta = np.sqrt(schedule.beta[k])
        y = root_alpha * y + (1.0 - root_alpha) * prior + root_beta * z
        r = root_alpha * r + root_beta * z
        pathwise = max(pathwise, float(np.max(np.abs(y - prior - r))))

    ks = rng.integers(1, K + 1, size=min(100, K * trials))
    posterior = 0.0
    for k in ks:
        y0s = rng.normal(size=trials)
        yks = rng.normal(size=trials)
        fs = rng.normal(size=trials)
        shifted = prior_posterior_mean(schedule, int(k), y0s, yks, fs) - fs
        coef_clean, coef_state, _ = posterior_coefficients(schedule, int(k))
        residual = coef_clean * (y0s - fs) + coef_state * (yks - fs)
        posterior = max(posterior, float(np.max(np.abs(shifted - residual))))

    coefficient = 0.0
    for k in range(1, K + 1):
        coef_clean, coef_state, _ = posterior_coefficients(schedule, k)
        dev = abs(coef_clean + coef_state + prior_coefficient(schedule, k) - 1.0)
        coefficient = max(coefficient, float(dev))

    return EquivalenceReport(
        steps=K,
        trials=trials,
        pathwise_max_diff=pathwise,
        posterior_max_diff=posterior,
        coefficient_max_dev=coefficient,
    )
