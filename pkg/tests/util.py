"""Shared oracles for the test suite.

The gradient oracle is plain central finite differences over forward
evaluations only, so it stays independent of the backward implementation
it checks.
"""

import numpy as np

from falda.gradcore import no_grad


def numerical_grads(forward, arrays, h=1e-5):
    """Central-difference gradients of scalar ``forward()`` w.r.t. each array.

    ``forward`` must re-read the (mutated) arrays on every call; they are
    perturbed in place one coordinate at a time.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = forward()
            flat[i] = orig - h
            down = forward()
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def gradient_error(build_loss, leaves, h=1e-5):
    """Worst-coordinate deviation between backward and finite differences.

    The deviation is |analytic - numeric| / max(1, |numeric|): relative for
    large gradients, absolute at the same tolerance for small ones.
    """
    for t in leaves:
        t.grad = None
    build_loss().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in leaves]
    for t in leaves:
        t.grad = None

    def forward():
        with no_grad():
            return float(build_loss().data)

    numeric = numerical_grads(forward, [t.data for t in leaves], h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.abs(n))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def dft_oracle(x):
    """Direct O(n^2) DFT of a real 1-D series, non-negative bins only."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    t = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * j * t / n))
                     for j in range(n // 2 + 1)])


def idft_oracle(bins, keep, n):
    """Direct reconstruction from kept half-spectrum bins with mirroring."""
    t = np.arange(n)
    out = np.zeros(n, dtype=np.complex128)
    for j in keep:
        out += bins[j] * np.exp(2j * np.pi * j * t / n)
        if 0 < j < (n - n // 2):  # mirrored conjugate partner exists
            if j != n - j:
                out += np.conj(bins[j]) * np.exp(2j * np.pi * (n - j) * t / n)
    return (out / n).real


def crps_integral_oracle(samples, y):
    """Exact integral of (F_N(t) - 1{y <= t})^2 dt for the empirical CDF.

    The integrand is piecewise constant between the sorted breakpoints
    (samples and y), so the integral is an exact finite sum.
    """
    samples = np.asarray(samples, dtype=np.float64)
    pts = np.sort(np.concatenate([samples, [y]]))
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        cdf = np.mean(samples <= mid)
        step = 1.0 if y <= mid else 0.0
        total += (cdf - step) ** 2 * (b - a)
    return total
