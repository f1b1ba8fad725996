"""Renyi-DP accounting for the noisy-SGD training mode.

Per-step Renyi divergence bounds for the subsampled Gaussian mechanism at
integer orders (Poisson subsampling, sampling-without-knowledge bound), linear
composition over steps, and conversion to (epsilon, delta). This is an upper
bound; sigma is the primary knob and epsilon is derived from it.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_ORDERS = tuple(range(2, 129)) + (160, 192, 256, 384, 512)


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def rdp_sampled_gaussian(q: float, sigma: float, order: int) -> float:
    """Renyi divergence bound of one subsampled Gaussian step at integer order."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("sampling rate must be in [0,1]")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if order < 2 or int(order) != order:
        raise ValueError("order must be an integer >= 2")
    if q == 0.0:
        return 0.0
    if q == 1.0:
        # plain Gaussian mechanism
        return order / (2.0 * sigma * sigma)
    # log E[( (1-q) + q e^{(k-...)} )] expansion over the binomial mixture
    log_terms = []
    for k in range(order + 1):
        log_terms.append(
            _log_binom(order, k)
            + k * math.log(q)
            + (order - k) * math.log1p(-q)
            + (k * (k - 1)) / (2.0 * sigma * sigma)
        )
    log_moment = float(np.logaddexp.reduce(log_terms))
    return log_moment / (order - 1)


def dp_epsilon(
    sigma: float,
    sampling_rate: float,
    steps: int,
    delta: float,
    orders=DEFAULT_ORDERS,
) -> float:
    """epsilon for noisy SGD with noise multiplier sigma after `steps` steps.

    Returns inf when sigma == 0 (no noise, no guarantee).
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0,1)")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if sigma == 0.0:
        return math.inf
    if steps == 0 or sampling_rate == 0.0:
        return 0.0
    best = math.inf
    for order in orders:
        rdp = steps * rdp_sampled_gaussian(sampling_rate, sigma, order)
        eps = rdp + math.log(1.0 / delta) / (order - 1)
        best = min(best, eps)
    return best
