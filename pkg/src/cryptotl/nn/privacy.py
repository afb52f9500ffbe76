"""Renyi-DP accountant for the Poisson-subsampled Gaussian mechanism."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from ..errors import UsageError

DEFAULT_ORDERS = tuple(range(2, 65))


@dataclass(frozen=True)
class DpConfig:
    clip: float = 0.75
    noise: float = 1.0
    delta: float | None = None  # defaults to 1 / dataset size
    orders: tuple = DEFAULT_ORDERS

    def __post_init__(self):
        if not self.clip > 0:
            raise UsageError("clip norm must be positive")
        if self.noise < 0:
            raise UsageError("noise multiplier must be non-negative")
        if self.delta is not None and not 0 < self.delta < 1:
            raise UsageError("delta must be in (0, 1)")
        if not self.orders or min(self.orders) < 2:
            raise UsageError("orders must be integers >= 2")


@dataclass(frozen=True)
class PrivacyReport:
    epsilon: float
    delta: float
    steps: int
    sampling_rate: float
    order: int | None


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """RDP of one step at integer order ``alpha`` (binomial expansion bound)."""
    if q == 0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma ** 2)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    terms = log_binom + (alpha - k) * math.log1p(-q) + k * math.log(q) + (k * k - k) / (2 * sigma ** 2)
    return float(logsumexp(terms)) / (alpha - 1)


def account_epsilon(dp: DpConfig, sampling_rate: float, steps: int,
                    delta: float | None = None) -> PrivacyReport:
    delta = dp.delta if delta is None else delta
    if delta is None or not 0 < delta < 1:
        raise UsageError("delta must be in (0, 1)")
    if not 0 <= sampling_rate <= 1:
        raise UsageError("sampling rate must be in [0, 1]")
    if steps < 0:
        raise UsageError("steps must be non-negative")
    if dp.noise == 0:
        return PrivacyReport(math.inf, delta, steps, sampling_rate, None)
    best, best_alpha = math.inf, None
    for alpha in dp.orders:
        eps = steps * rdp_subsampled_gaussian(sampling_rate, dp.noise, alpha) \
            + math.log(1.0 / delta) / (alpha - 1)
        if eps < best:
            best, best_alpha = eps, int(alpha)
    return PrivacyReport(best, delta, steps, sampling_rate, best_alpha)
