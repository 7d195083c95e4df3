"""Middleton Class-A impulsive noise: sampling, calibration, concentration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseParams:
    A: float
    gamma: float
    sigma_g2: float
    sigma_i2: float

    def __post_init__(self):
        if self.A <= 0 or self.gamma <= 0:
            raise ValueError("A and gamma must be positive")
        if self.sigma_g2 < 0 or self.sigma_i2 < 0:
            raise ValueError("noise powers must be non-negative")

    @property
    def sigma_total2(self) -> float:
        return self.sigma_g2 + self.sigma_i2

    def component_variance(self, counts: np.ndarray) -> np.ndarray:
        """Total complex variance sigma_m^2 for each Poisson count."""
        return self.sigma_g2 * (counts / (self.A * self.gamma) + 1.0)


@dataclass(frozen=True)
class NoiseRealization:
    counts: np.ndarray
    z_i: np.ndarray
    z_q: np.ndarray
    params: NoiseParams

    @property
    def hit_samples(self) -> np.ndarray:
        return self.counts > 0


def params_from_snr(snr_db: float, gamma: float, A: float, signal_power: float = 1.0) -> NoiseParams:
    if signal_power <= 0:
        raise ValueError("signal_power must be positive")
    total = signal_power * 10.0 ** (-snr_db / 10.0)
    sigma_i2 = total / (1.0 + gamma)
    return NoiseParams(A=A, gamma=gamma, sigma_g2=gamma * sigma_i2, sigma_i2=sigma_i2)


def sample_noise(
    params: NoiseParams, n_samples: int | tuple[int, ...], rng: np.random.Generator
) -> NoiseRealization:
    """Exact Class-A draw: m ~ Poisson(A) per complex sample, then I and Q
    independently ~ N(0, sigma_m^2 / 2).

    ``n_samples`` may be a shape, e.g. ``(num_waveforms, N)``.
    """
    shape = (n_samples,) if np.isscalar(n_samples) else tuple(n_samples)
    if min(shape) < 1:
        raise ValueError("n_samples must be >= 1")
    counts = rng.poisson(params.A, size=shape)
    std = np.sqrt(params.component_variance(counts) / 2.0)
    z = rng.standard_normal((2, *shape))
    return NoiseRealization(counts, z[0] * std, z[1] * std, params)


def calibrate_impulsive_index(p_star: float, sps: int) -> float:
    """Impulsive index A giving an average symbol-hit rate of ``p_star``."""
    if not 0.0 < p_star < 1.0:
        raise ValueError(f"p_star must be in (0, 1), got {p_star}")
    if sps < 1:
        raise ValueError("sps must be >= 1")
    return -math.log1p(-p_star) / sps


def sample_hit_probability(A: float) -> float:
    if A < 0:
        raise ValueError("A must be >= 0")
    return -math.expm1(-A)


def symbol_hit_probability(A: float, sps: int) -> float:
    if A < 0:
        raise ValueError("A must be >= 0")
    return -math.expm1(-A * sps)


def hit_mask(counts: np.ndarray, sps: int) -> np.ndarray:
    """Boolean (..., K) array: symbol has at least one sample with m > 0."""
    counts = np.asarray(counts)
    if counts.shape[-1] % sps:
        raise ValueError(f"{counts.shape[-1]} samples is not a multiple of sps={sps}")
    return (counts.reshape(*counts.shape[:-1], -1, sps) > 0).any(axis=-1)


def hit_symbols(counts: np.ndarray, sps: int) -> np.ndarray:
    """Sorted indices of symbols with at least one hit sample."""
    return np.flatnonzero(hit_mask(np.ravel(counts), sps))


def kl_bernoulli(q: float, p: float) -> float:
    if not (0.0 < q < 1.0 and 0.0 < p < 1.0):
        raise ValueError("q and p must lie strictly inside (0, 1)")
    return q * math.log(q / p) + (1.0 - q) * math.log((1.0 - q) / (1.0 - p))


def chernoff_tail(p: float, K: int, eps: float) -> float:
    """Two-sided bound 2 exp(-K D(p + eps || p))."""
    return 2.0 * math.exp(-K * kl_bernoulli(p + eps, p))


@dataclass(frozen=True)
class ConcentrationReport:
    p: float
    K: int
    delta: float
    epsilon: float

    @property
    def interval(self) -> tuple[float, float]:
        return (self.p - self.epsilon, self.p + self.epsilon)

    @property
    def valid(self) -> bool:
        return 0.0 < self.epsilon < min(self.p, 1.0 - self.p)


class BoundValidityError(ValueError):
    pass


def concentration_epsilon(p: float, K: int, delta: float) -> ConcentrationReport:
    """Deviation eps from the quadratic approximation of the KL exponent."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    eps = math.sqrt(2.0 * p * (1.0 - p) / K * math.log(2.0 / delta))
    report = ConcentrationReport(p, K, delta, eps)
    if not report.valid:
        raise BoundValidityError(
            f"epsilon={eps:.6g} is outside (0, min(p, 1-p)) = (0, {min(p, 1 - p):.6g})"
        )
    return report


def exact_chernoff_epsilon(p: float, K: int, delta: float, tol: float = 1e-12) -> float:
    """Solve 2 exp(-K D(p + eps || p)) = delta for eps by bisection."""
    lo, hi = 0.0, 1.0 - p - 1e-15
    if chernoff_tail(p, K, hi) > delta:
        raise BoundValidityError("no eps < 1 - p reaches the requested tail probability")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid == 0.0 or chernoff_tail(p, K, mid) > delta:
            lo = mid
        else:
            hi = mid
    return hi
