import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from msmlab.noise import (
    BoundValidityError,
    NoiseParams,
    calibrate_impulsive_index,
    chernoff_tail,
    concentration_epsilon,
    exact_chernoff_epsilon,
    hit_mask,
    hit_symbols,
    kl_bernoulli,
    params_from_snr,
    sample_hit_probability,
    sample_noise,
    symbol_hit_probability,
)

A_STAR = -math.log(0.85) / 8


def mp_kl(q, p):
    q, p = mpmath.mpf(q), mpmath.mpf(p)
    return float(q * mpmath.log(q / p) + (1 - q) * mpmath.log((1 - q) / (1 - p)))


def test_calibration_value():
    assert calibrate_impulsive_index(0.15, 8) == pytest.approx(A_STAR, abs=1e-15)
    assert calibrate_impulsive_index(0.15, 8) == pytest.approx(0.02031487, abs=1e-8)


def test_calibration_limit():
    assert calibrate_impulsive_index(1e-15, 8) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.2])
def test_calibration_rejects(p):
    with pytest.raises(ValueError):
        calibrate_impulsive_index(p, 8)


@given(st.floats(1e-6, 1 - 1e-6), st.integers(1, 64))
def test_calibration_inverts_hit_probability(p, L):
    assert symbol_hit_probability(calibrate_impulsive_index(p, L), L) == pytest.approx(p, rel=1e-12)


def test_hit_probabilities():
    assert symbol_hit_probability(0.0, 8) == 0.0
    # 8-digit A: rounding error 5e-9 propagates as 8 e^{-8A} * 5e-9 ~ 3.4e-8
    assert symbol_hit_probability(0.02031487, 8) == pytest.approx(0.15, abs=5e-8)
    assert symbol_hit_probability(A_STAR, 8) == pytest.approx(0.15, abs=1e-12)
    # 1 - e^{-A}, evaluated in extended precision
    expected = float(1 - mpmath.exp(-mpmath.mpf(0.02031487)))
    assert sample_hit_probability(0.02031487) == pytest.approx(expected, rel=1e-14)
    assert sample_hit_probability(0.02031487) == pytest.approx(0.0201099, abs=1e-7)


def test_params_from_snr():
    p = params_from_snr(0.0, 1.0, A_STAR)
    assert (p.sigma_total2, p.sigma_g2, p.sigma_i2) == pytest.approx((1.0, 0.5, 0.5))
    p = params_from_snr(10.0, 1e-3, A_STAR)
    assert p.sigma_total2 == pytest.approx(0.1)
    assert p.sigma_i2 == pytest.approx(0.1 / 1.001, rel=1e-14)
    assert p.sigma_i2 == pytest.approx(0.0999001, rel=1e-6)
    assert p.sigma_g2 == pytest.approx(9.99001e-5, rel=1e-6)
    assert p.sigma_g2 == pytest.approx(p.gamma * p.sigma_i2)
    p = params_from_snr(300.0, 1e-3, A_STAR)
    assert p.sigma_total2 < 1e-29


def test_params_reject():
    with pytest.raises(ValueError):
        NoiseParams(A=0.0, gamma=1.0, sigma_g2=1.0, sigma_i2=1.0)
    with pytest.raises(ValueError):
        params_from_snr(0.0, 1.0, A_STAR, signal_power=0.0)


def test_zero_count_branch_variance():
    p = params_from_snr(5.0, 1e-3, A_STAR)
    assert p.component_variance(np.array([0]))[0] / 2 == pytest.approx(p.sigma_g2 / 2, rel=1e-15)
    # sigma_m^2 = sigma_g^2 (m / (A Gamma) + 1)
    assert p.component_variance(np.array([2]))[0] == pytest.approx(p.sigma_g2 * (2 / (A_STAR * 1e-3) + 1))


def test_zero_count_samples_are_background_gaussian():
    p = params_from_snr(0.0, 1e-3, A_STAR)
    r = sample_noise(p, 400_000, np.random.default_rng(1))
    quiet = r.counts == 0
    var_i = np.var(r.z_i[quiet])
    n = quiet.sum()
    # sample variance of a Gaussian: sd = var * sqrt(2/n)
    assert abs(var_i - p.sigma_g2 / 2) < 5 * (p.sigma_g2 / 2) * math.sqrt(2 / n)


def test_hit_fraction_monte_carlo():
    p = params_from_snr(10.0, 1e-3, A_STAR)
    n = 1_000_000
    r = sample_noise(p, n, np.random.default_rng(2))
    ps = sample_hit_probability(A_STAR)
    frac = np.mean(r.counts > 0)
    assert abs(frac - ps) < 5 * math.sqrt(ps * (1 - ps) / n)


def _power_sd(p: NoiseParams, n: int) -> float:
    # |z|^2 given m is exponential with mean sigma_m^2, so E|z|^4 = 2 E[sigma_m^4]
    A, G = p.A, p.gamma
    e_sig4 = p.sigma_g2**2 * ((A + A * A) / (A * G) ** 2 + 2 / G + 1)
    return math.sqrt((2 * e_sig4 - p.sigma_total2**2) / n)


@pytest.mark.parametrize("gamma", [1e-3, 1e-6, 1.0])
def test_power_identity_monte_carlo(gamma):
    p = params_from_snr(10.0, gamma, A_STAR)
    n = 1_000_000
    r = sample_noise(p, n, np.random.default_rng(3))
    power = np.mean(r.z_i**2 + r.z_q**2)
    assert abs(power - p.sigma_total2) < 3 * _power_sd(p, n)


def test_iq_independent_and_circular():
    p = params_from_snr(0.0, 1.0, 0.5)
    r = sample_noise(p, 200_000, np.random.default_rng(4))
    assert abs(np.mean(r.z_i * r.z_q)) < 5 * p.sigma_total2 / 2 / math.sqrt(200_000) * 3
    assert np.var(r.z_i) == pytest.approx(np.var(r.z_q), rel=0.05)


def test_sampling_deterministic_and_shaped():
    p = params_from_snr(0.0, 1e-3, A_STAR)
    a = sample_noise(p, (3, 16), np.random.default_rng(7))
    b = sample_noise(p, (3, 16), np.random.default_rng(7))
    assert a.counts.shape == a.z_i.shape == (3, 16)
    assert np.array_equal(a.z_i, b.z_i) and np.array_equal(a.counts, b.counts)
    assert np.all(a.counts >= 0)


def test_hit_symbols_basic():
    assert hit_symbols(np.zeros(64, dtype=int), 8).tolist() == []
    c = np.zeros(64, dtype=int)
    c[19] = 2
    assert hit_symbols(c, 8).tolist() == [2]
    c[0] = 1
    c[63] = 1
    assert hit_symbols(c, 8).tolist() == [0, 2, 7]
    with pytest.raises(ValueError):
        hit_symbols(np.zeros(63), 8)


@given(st.lists(st.integers(0, 3), min_size=8, max_size=80).filter(lambda x: len(x) % 4 == 0))
def test_hit_symbols_brute_force(counts):
    expected = [i for i in range(len(counts) // 4) if any(counts[n] > 0 for n in range(4 * i, 4 * i + 4))]
    assert hit_symbols(np.array(counts), 4).tolist() == expected


def test_binomial_hit_model():
    p = params_from_snr(10.0, 1e-3, A_STAR)
    W, K, L = 10_000, 128, 8
    r = sample_noise(p, (W, K * L), np.random.default_rng(5))
    S = hit_mask(r.counts, L).sum(axis=1)
    assert abs(S.mean() / K - 0.15) < 0.002
    var_expected = K * 0.15 * 0.85
    # sample variance of W draws: relative sd ~ sqrt(2/W) (near-Gaussian S)
    assert abs(S.var() / var_expected - 1) < 5 * math.sqrt(2 / W)
    lo, hi = concentration_epsilon(0.15, K, 0.05).interval
    rate = S / K
    assert np.mean((rate >= lo) & (rate <= hi)) >= 0.95


def test_kl_values():
    assert kl_bernoulli(0.15, 0.15) == 0.0
    assert kl_bernoulli(0.2, 0.15) == pytest.approx(mp_kl(0.2, 0.15), rel=1e-13)
    assert kl_bernoulli(0.2, 0.15) == pytest.approx(0.0090367, abs=1e-7)
    for bad in [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0), (0.5, 1.0)]:
        with pytest.raises(ValueError):
            kl_bernoulli(*bad)


def test_chernoff_at_quadratic_epsilon():
    # the quadratic approximation underestimates eps, so the exact bound
    # at p + 0.085726 is above delta = 0.05
    D = kl_bernoulli(0.235726, 0.15)
    assert D == pytest.approx(mp_kl(0.235726, 0.15), rel=1e-12)
    bound = 2 * math.exp(-128 * D)
    assert bound == pytest.approx(2 * float(mpmath.exp(-128 * mpmath.mpf(mp_kl(0.235726, 0.15)))), rel=1e-12)
    assert bound == pytest.approx(0.0784, abs=1e-3)
    eps = exact_chernoff_epsilon(0.15, 128, 0.05)
    assert chernoff_tail(0.15, 128, eps) == pytest.approx(0.05, rel=1e-8)
    assert eps > 0.085726


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_kl_nonnegative(q, p):
    assert kl_bernoulli(q, p) >= 0.0


@given(st.floats(0.02, 0.98), st.floats(0.02, 0.98), st.floats(0.02, 0.98))
def test_kl_convex_in_q(a, b, p):
    mid = 0.5 * (a + b)
    assert kl_bernoulli(mid, p) <= 0.5 * (kl_bernoulli(a, p) + kl_bernoulli(b, p)) + 1e-12


def test_concentration_reference_values():
    rep = concentration_epsilon(0.15, 128, 0.05)
    assert rep.epsilon == pytest.approx(0.085726, abs=1e-6)
    lo, hi = rep.interval
    assert lo == pytest.approx(0.064274, abs=1e-6)
    assert hi == pytest.approx(0.235726, abs=1e-6)


def test_concentration_scaling():
    a = concentration_epsilon(0.15, 128, 0.05).epsilon
    b = concentration_epsilon(0.15, 512, 0.05).epsilon
    assert b == pytest.approx(a / 2, rel=1e-12)


def test_concentration_out_of_range():
    with pytest.raises(BoundValidityError):
        concentration_epsilon(0.15, 4, 0.05)
    with pytest.raises(ValueError):
        concentration_epsilon(0.15, 128, 1.5)
