"""Noise schedules, forward/reverse sampling, and the chain-equivalence
harness."""

import mpmath
import numpy as np
import pytest

from falda.diffusion import (NoiseSchedule, card_forward_chain, ddim_step,
                             ddim_diagnostics, ddim_subsequence,
                             ddpm_forward_chain, ddpm_posterior_step,
                             linear_schedule, posterior_coefficients,
                             prior_coefficient, q_sample, verify_equivalence)
from falda.errors import ConfigError, RangeError


@pytest.fixture
def sched():
    return linear_schedule(1000)


@pytest.fixture
def rng():
    return np.random.default_rng(4242)


# -- schedule -------------------------------------------------------------------

def test_linear_schedule_endpoints(sched):
    assert sched.beta[1] == 1e-4
    assert sched.beta[1000] == 0.02


def test_alpha_bar_values(sched):
    assert sched.alpha_bar[0] == 1.0
    assert sched.alpha_bar[1] == 1.0 - 1e-4
    assert sched.alpha_bar[1000] < 1e-2


def test_alpha_bar_strictly_decreasing(sched):
    assert np.all(np.diff(sched.alpha_bar) < 0.0)


def test_schedule_rejects_no_steps():
    with pytest.raises(ConfigError):
        linear_schedule(0)


def test_posterior_coefficients_finite_everywhere(sched):
    for k in range(1, sched.K + 1):
        values = (*posterior_coefficients(sched, k), prior_coefficient(sched, k))
        assert np.all(np.isfinite(values))


# -- forward noising --------------------------------------------------------------

def test_q_sample_near_zero_beta_is_identity(rng):
    tiny = NoiseSchedule(np.full(50, 1e-12))
    r0 = rng.normal(size=(4, 2))
    out = q_sample(r0, 50, rng.normal(size=(4, 2)), tiny)
    assert np.allclose(out, r0, atol=1e-4)


def test_q_sample_zero_noise_branch(sched, rng):
    r0 = rng.normal(size=(3, 2))
    out = q_sample(r0, 400, np.zeros((3, 2)), sched)
    assert np.array_equal(out, np.sqrt(sched.alpha_bar[400]) * r0)


def test_q_sample_monte_carlo_moments(sched, rng):
    k, n = 617, 100_000
    r0 = 1.3
    eps = rng.normal(size=n)
    out = q_sample(np.full(n, r0), k, eps, sched)
    abar = sched.alpha_bar[k]
    se_mean = np.sqrt(1.0 - abar) / np.sqrt(n)
    assert abs(out.mean() - np.sqrt(abar) * r0) <= 3.0 * se_mean
    se_var = (1.0 - abar) * np.sqrt(2.0 / (n - 1))
    assert abs(out.var(ddof=1) - (1.0 - abar)) <= 3.0 * se_var


def test_q_sample_step_out_of_range(sched):
    with pytest.raises(RangeError):
        q_sample(np.zeros(2), 0, np.zeros(2), sched)
    with pytest.raises(RangeError):
        q_sample(np.zeros(2), 1001, np.zeros(2), sched)


# -- reverse steps -----------------------------------------------------------------

def test_posterior_step_k1_returns_clean_estimate(sched, rng):
    r0_hat = rng.normal(size=(5, 2))
    rk = rng.normal(size=(5, 2))
    out = ddpm_posterior_step(rk, r0_hat, 1, sched, rng.normal(size=(5, 2)))
    # coefficients collapse (1 - abar_1 = beta_1) up to rounding
    assert np.allclose(out, r0_hat, rtol=1e-9, atol=1e-12)


def test_posterior_step_degenerate_no_noise(rng):
    # beta -> 0 limit; the deviation from the fixed point is O(beta)
    tiny = NoiseSchedule(np.full(10, 1e-8))
    state = rng.normal(size=(3,))
    out = ddpm_posterior_step(state, state, 5, tiny, np.zeros(3))
    assert np.allclose(out, state, atol=1e-6)


def test_posterior_matches_independent_bayes_derivation(sched, rng):
    """Re-derive the posterior from the Gaussian product at 50 digits.

    The posterior of state_{k-1} given (state_k, clean) has precision
    alpha_k/beta_k + 1/(1 - abar_{k-1}) and mean weights proportional to
    sqrt(alpha_k)/beta_k and sqrt(abar_{k-1})/(1 - abar_{k-1}). The
    closed-form coefficients must agree to 1e-12 relative. (k = 1 is a
    delta-prior limit, covered by its own exact test.)
    """
    mpmath.mp.dps = 50
    abars = [mpmath.mpf(1)]
    for j in range(1, sched.K + 1):
        abars.append(abars[-1] * (1 - mpmath.mpf(sched.beta[j])))
    for k in rng.integers(2, sched.K + 1, size=100):
        k = int(k)
        beta = mpmath.mpf(sched.beta[k])
        alpha = 1 - beta
        ab_prev = abars[k - 1]
        var = 1 / (alpha / beta + 1 / (1 - ab_prev))
        coef_state = (mpmath.sqrt(alpha) / beta) * var
        coef_clean = (mpmath.sqrt(ab_prev) / (1 - ab_prev)) * var
        got = posterior_coefficients(sched, k)
        for g, want in zip(got, (coef_clean, coef_state, var)):
            assert abs(g - float(want)) <= 1e-12 * abs(float(want))


def test_ddim_eta_zero_bit_deterministic(sched, rng):
    rk = rng.normal(size=(6, 3))
    r0_hat = rng.normal(size=(6, 3))
    a = ddim_step(rk, r0_hat, 500, 400, 0.0, sched, rng.normal(size=(6, 3)))
    b = ddim_step(rk, r0_hat, 500, 400, 0.0, sched, rng.normal(size=(6, 3)))
    assert np.array_equal(a, b)


def test_ddim_terminal_step_returns_clean_estimate(sched, rng):
    rk = rng.normal(size=(4, 2))
    r0_hat = rng.normal(size=(4, 2))
    for eta in (0.0, 0.7, 1.0):
        out = ddim_step(rk, r0_hat, 100, 0, eta, sched, rng.normal(size=(4, 2)))
        assert np.array_equal(out, r0_hat)


def test_ddim_eta_one_matches_posterior_moments(sched, rng):
    """Adjacent-step DDIM at eta = 1 is the ancestral step in distribution."""
    n = 100_000
    k = 500
    rk, r0_hat = 0.8, -0.4
    z = rng.normal(size=n)
    ddim = ddim_step(np.full(n, rk), np.full(n, r0_hat), k, k - 1, 1.0, sched, z)
    z2 = rng.normal(size=n)
    ddpm = ddpm_posterior_step(np.full(n, rk), np.full(n, r0_hat), k, sched, z2)
    sd = ddpm.std(ddof=1)
    assert abs(ddim.mean() - ddpm.mean()) <= 3.0 * sd * np.sqrt(2.0 / n)
    assert abs(ddim.var(ddof=1) - ddpm.var(ddof=1)) \
        <= 3.0 * sd ** 2 * 2.0 * np.sqrt(2.0 / (n - 1))


def test_ddim_variance_clamp_counts(sched, rng):
    ddim_diagnostics.reset()
    ddim_step(rng.normal(size=3), rng.normal(size=3), 900, 100, 25.0, sched,
              rng.normal(size=3))
    assert ddim_diagnostics.clamped == 1
    ddim_diagnostics.reset()


def test_ddim_rejects_bad_levels(sched):
    with pytest.raises(RangeError):
        ddim_step(np.zeros(2), np.zeros(2), 100, 100, 0.0, sched, np.zeros(2))


def test_ddim_subsequence_default():
    levels = ddim_subsequence(1000, 10)
    assert levels == list(range(1000, 0, -100))
    assert ddim_subsequence(50, 100) == list(range(50, 0, -1))


# -- prior-guided chain --------------------------------------------------------------

def test_card_zero_prior_reduces_to_plain_chain(sched, rng):
    y0 = rng.normal(size=4)
    noises = [rng.normal(size=4) for _ in range(sched.K)]
    card = card_forward_chain(y0, np.zeros(4), sched, noises)
    plain = ddpm_forward_chain(y0, sched, noises)
    for a, b in zip(card, plain):
        assert np.array_equal(a, b)


def test_card_fixed_point(sched):
    prior = np.array([0.7, -1.1])
    zeros = [np.zeros(2)] * sched.K
    chain = card_forward_chain(prior.copy(), prior, sched, zeros)
    assert np.allclose(chain[-1], prior, atol=1e-10)


def test_card_terminal_moments(rng):
    sched = linear_schedule(1000)
    n = 100_000
    prior = 0.6
    y = np.full(n, prior)
    for k in range(1, sched.K + 1):
        root_alpha = np.sqrt(sched.alpha[k])
        y = root_alpha * y + (1.0 - root_alpha) * prior \
            + np.sqrt(sched.beta[k]) * rng.normal(size=n)
    assert abs(y.mean() - prior) <= 3.0 / np.sqrt(n)
    assert abs(y.var(ddof=1) - 1.0) <= 3.0 * np.sqrt(2.0 / (n - 1))


def test_card_terminal_closed_form(rng):
    sched = linear_schedule(200)
    n = 100_000
    y0, prior = 2.0, -1.0
    noises = [rng.normal(size=n) for _ in range(sched.K)]
    chain = card_forward_chain(np.full(n, y0), np.full(n, prior), sched, noises)
    abar = sched.alpha_bar[-1]
    want_mean = np.sqrt(abar) * y0 + (1.0 - np.sqrt(abar)) * prior
    want_var = 1.0 - abar
    terminal = chain[-1]
    assert abs(terminal.mean() - want_mean) <= 3.0 * np.sqrt(want_var / n)
    assert abs(terminal.var(ddof=1) - want_var) <= 3.0 * want_var * np.sqrt(2.0 / (n - 1))


def test_card_wrong_noise_count(sched):
    with pytest.raises(ConfigError):
        card_forward_chain(np.zeros(2), np.zeros(2), sched, [np.zeros(2)] * 3)


# -- equivalence harness ----------------------------------------------------------------

def test_equivalence_report_passes(sched):
    report = verify_equivalence(20, sched, seed=3)
    assert report.passed
    assert report.pathwise_max_diff <= 1e-9
    assert report.posterior_max_diff <= 1e-10
    assert report.coefficient_max_dev <= 1e-12
    assert len(report.lines()) == 3


def test_equivalence_zero_prior_bit_identical(rng):
    sched = linear_schedule(300)
    y0 = rng.normal(size=8)
    noises = [rng.normal(size=8) for _ in range(sched.K)]
    card = card_forward_chain(y0, np.zeros(8), sched, noises)
    plain = ddpm_forward_chain(y0, sched, noises)
    for a, b in zip(card, plain):
        assert np.array_equal(a, b)


def test_equivalence_rejects_no_trials(sched):
    with pytest.raises(ConfigError):
        verify_equivalence(0, sched)
