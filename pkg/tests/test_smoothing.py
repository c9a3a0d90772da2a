import math

import numpy as np
import pytest

from certmark import smoothing as sm

from oracles import (
    binomial_cdf_direct,
    gaussian_cdf_quadrature,
    percentile_index_scan,
)


# ---------------------------------------------------------------------------
# gaussian cdf / quantile

def test_gaussian_cdf_at_zero_and_symmetry():
    assert sm.gaussian_cdf(0.0) == 0.5
    rng = np.random.default_rng(1)
    for z in rng.normal(0, 2, size=50):
        assert abs(sm.gaussian_cdf(z) + sm.gaussian_cdf(-z) - 1.0) < 1e-14


def test_gaussian_cdf_against_quadrature_oracle():
    # frozen via the mpmath quadrature oracle
    assert abs(sm.gaussian_cdf(-1.0) - 0.15865525393145705) < 1e-12
    for z in (-6.5, -3.0, -0.7, 0.3, 2.2, 5.0):
        assert abs(sm.gaussian_cdf(z) - gaussian_cdf_quadrature(z)) < 1e-10


def test_gaussian_cdf_rejects_non_finite():
    with pytest.raises(ValueError):
        sm.gaussian_cdf(float("nan"))


def test_gaussian_quantile_median_and_roundtrip():
    assert sm.gaussian_quantile(0.5) == 0.0
    for p in np.arange(0.01, 1.0, 0.01):
        assert abs(sm.gaussian_cdf(sm.gaussian_quantile(float(p))) - p) < 1e-8


def test_gaussian_quantile_rejects_out_of_range():
    for p in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            sm.gaussian_quantile(p)


def test_smoothing_shift_identity():
    # Phi(Phi^-1(0.5) - eps/sigma) == Phi(-eps/sigma): the median case of
    # the percentile shift that defines the certificate
    rng = np.random.default_rng(2)
    for _ in range(20):
        eps = float(rng.uniform(0.0, 3.0))
        sigma = float(rng.uniform(0.1, 2.0))
        lhs = sm.gaussian_cdf(sm.gaussian_quantile(0.5) - eps / sigma)
        rhs = sm.gaussian_cdf(-eps / sigma)
        assert abs(lhs - rhs) < 1e-14


# ---------------------------------------------------------------------------
# binomial cdf

def test_binomial_cdf_trivial_cases():
    assert sm.binomial_cdf(10, 10, 0.37) == 1.0
    assert sm.binomial_cdf(10, 3, 0.0) == 1.0
    assert sm.binomial_cdf(10, 3, 1.0) == 0.0
    assert sm.binomial_cdf(10, 10, 1.0) == 1.0


def test_binomial_cdf_against_direct_sum():
    assert abs(sm.binomial_cdf(20, 7, 0.3) - binomial_cdf_direct(20, 7, 0.3)) < 1e-12
    rng = np.random.default_rng(3)
    for n in (1, 2, 5, 17, 100, 937, 1000):
        for _ in range(20):
            p = float(rng.random())
            k = int(rng.integers(0, n + 1))
            ref = binomial_cdf_direct(n, k, p)
            got = sm.binomial_cdf(n, k, p)
            # the direct sum drops terms whose individual factors underflow
            # float64, so it is only trustworthy above ~1e-20
            if ref > 1e-20:
                assert abs(got - ref) / ref < 1e-10
            else:
                assert got < 1e-18


def test_binomial_cdf_large_n():
    # regularized-incomplete-beta-free path must stay accurate at n = 1e5
    got = sm.binomial_cdf(100000, 50000, 0.5)
    assert abs(got - 0.5012615) < 1e-3  # ~ 1/2 + pmf(50000)/2
    assert 0.0 <= got <= 1.0


def test_binomial_cdf_monotone_in_k_and_range():
    prev = 0.0
    for k in range(0, 51, 5):
        val = sm.binomial_cdf(50, k, 0.4)
        assert 0.0 <= val <= 1.0
        assert val >= prev
        prev = val


def test_binomial_cdf_rejects_bad_args():
    with pytest.raises(ValueError):
        sm.binomial_cdf(10, 11, 0.5)
    with pytest.raises(ValueError):
        sm.binomial_cdf(10, -1, 0.5)
    with pytest.raises(ValueError):
        sm.binomial_cdf(10, 3, 1.5)


# ---------------------------------------------------------------------------
# order-statistic index

def test_index_single_sample_cannot_bound_median():
    assert sm.empirical_percentile_index(1, 0.9, 1.0, 0.0) is None


def test_index_matches_definition_at_10000():
    k = sm.empirical_percentile_index(10000, 0.99, 1.0, 1.0)
    p_lower = sm.gaussian_cdf(-1.0)
    assert abs(p_lower - 0.15866) < 5e-6
    assert 1.0 - sm.binomial_cdf(10000, k - 1, p_lower) >= 0.99
    assert 1.0 - sm.binomial_cdf(10000, k, p_lower) < 0.99


def test_index_matches_brute_force_scan():
    # n = 10000 is covered by test_index_matches_definition_at_10000 and by
    # the acceptance grid; the full scan there is too slow for a unit test
    for n in (1, 10, 200, 1000):
        for c in (0.9, 0.95, 0.99):
            for sigma, eps in ((1.0, 0.0), (1.0, 1.0), (0.5, 0.6), (2.0, 3.0)):
                p_lower = sm.gaussian_cdf(-eps / sigma)
                expected = percentile_index_scan(n, c, p_lower, sm.binomial_cdf)
                assert sm.empirical_percentile_index(n, c, sigma, eps) == expected


def test_index_non_increasing_in_epsilon():
    prev = None
    for eps in np.linspace(0.0, 2.5, 26):
        k = sm.empirical_percentile_index(2000, 0.99, 1.0, float(eps))
        if prev is not None:
            assert (k or 0) <= (prev or 2001)
        prev = k


def test_index_scale_coupling():
    # doubling both epsilon and sigma leaves p_lower (and hence k) unchanged
    for n, c in ((500, 0.95), (5000, 0.99)):
        for eps, sigma in ((0.3, 1.0), (1.0, 0.8)):
            a = sm.empirical_percentile_index(n, c, sigma, eps)
            b = sm.empirical_percentile_index(n, c, 2 * sigma, 2 * eps)
            assert a == b


# ---------------------------------------------------------------------------
# Monte Carlo sampling

def _const_fn(value):
    return lambda theta: value


def test_sample_accuracies_constant_fn():
    cfg = sm.SmoothingConfig(sigma=0.5, n=50, confidence=0.9, root_seed=1)
    samples = sm.sample_accuracies(_const_fn(0.7), np.zeros(10, dtype=np.float32), cfg)
    assert np.all(samples.sorted_accuracies == 0.7)


def test_sample_accuracies_degenerate_sigma():
    theta = np.linspace(0.1, 1.0, 20).astype(np.float32)
    fn = lambda t: float(np.sum(t, dtype=np.float64))
    base = fn(theta)
    cfg = sm.SmoothingConfig(sigma=1e-12, n=30, root_seed=2)
    samples = sm.sample_accuracies(fn, theta, cfg)
    assert np.all(samples.sorted_accuracies == base)


def test_sample_accuracies_deterministic_reexecution():
    theta = np.zeros(40, dtype=np.float32)
    fn = lambda t: float(np.mean(t > 0))
    cfg = sm.SmoothingConfig(sigma=1.0, n=100, root_seed=3)
    a = sm.sample_accuracies(fn, theta, cfg)
    b = sm.sample_accuracies(fn, theta, cfg)
    assert np.array_equal(a.sorted_accuracies, b.sorted_accuracies)


def test_sample_accuracies_invariant_to_parallelism():
    theta = np.zeros(40, dtype=np.float32)
    fn = lambda t: float(np.mean(t > 0))
    cfg = sm.SmoothingConfig(sigma=1.0, n=64, root_seed=4)
    serial = sm.sample_accuracies(fn, theta, cfg, jobs=1)
    threaded = sm.sample_accuracies(fn, theta, cfg, jobs=4)
    assert np.array_equal(serial.sorted_accuracies, threaded.sorted_accuracies)


def test_smoothing_config_defaults_and_validation():
    cfg = sm.SmoothingConfig(sigma=1.0)
    assert cfg.n == 10000 and cfg.confidence == 0.99
    with pytest.raises(ValueError):
        sm.SmoothingConfig(sigma=0.0)
    with pytest.raises(ValueError):
        sm.SmoothingConfig(sigma=1.0, n=0)
    with pytest.raises(ValueError):
        sm.SmoothingConfig(sigma=1.0, confidence=1.0)


# ---------------------------------------------------------------------------
# median estimator

def test_median_estimator_index_arithmetic():
    cfg1 = sm.SmoothingConfig(sigma=1.0, n=1)
    s1 = sm.AccuracySample(np.array([0.42]), cfg1)
    assert sm.smoothed_trigger_accuracy(s1) == 0.42
    cfg4 = sm.SmoothingConfig(sigma=1.0, n=4)
    s4 = sm.AccuracySample(np.array([0.1, 0.2, 0.3, 0.4]), cfg4)
    assert sm.smoothed_trigger_accuracy(s4) == 0.3


def test_median_estimator_statistical_accuracy():
    # f(theta + G) = Phi(G_0) ~ Uniform(0,1): true median 0.5, density 1 at
    # the median, so the sample median has asymptotic std 1/(2 sqrt(n))
    n, trials = 400, 50
    asym_std = 1.0 / (2.0 * math.sqrt(n))
    estimates = []
    for trial in range(trials):
        cfg = sm.SmoothingConfig(sigma=1.0, n=n, root_seed=1000 + trial)
        samples = sm.sample_accuracies(lambda t: sm.gaussian_cdf(float(t[0])),
                                       np.zeros(3, dtype=np.float32), cfg)
        estimates.append(sm.smoothed_trigger_accuracy(samples))
    mean = float(np.mean(estimates))
    assert abs(mean - 0.5) < 3.0 * asym_std / math.sqrt(trials) + 1.0 / n


# ---------------------------------------------------------------------------
# certified lower bound

def _uniform_sample(n, seed, sigma=1.0, confidence=0.99):
    cfg = sm.SmoothingConfig(sigma=sigma, n=n, confidence=confidence, root_seed=seed)
    rng = np.random.default_rng(seed)
    return sm.AccuracySample(np.sort(rng.random(n)), cfg), cfg


def test_bound_is_minimum_sample_when_k_is_one():
    samples, cfg = _uniform_sample(200, 7)
    assert sm.empirical_percentile_index(200, 0.99, 1.0, 1.9) == 1
    res = sm.certified_lower_bound(samples, cfg, epsilon=1.9)
    assert res.order_index == 1
    assert res.bound == samples.sorted_accuracies[0]


def test_bound_none_when_unreachable():
    samples, cfg = _uniform_sample(200, 8)
    assert sm.certified_lower_bound(samples, cfg, epsilon=2.5) is None


def test_bound_non_increasing_in_epsilon_and_below_median():
    samples, cfg = _uniform_sample(2000, 9)
    median = sm.smoothed_trigger_accuracy(samples)
    prev = None
    for eps in np.linspace(0.0, 2.0, 21):
        res = sm.certified_lower_bound(samples, cfg, float(eps))
        if res is None:
            continue
        if prev is not None:
            assert res.bound <= prev + 1e-15
        if res.order_index <= cfg.n // 2:
            assert res.bound <= median
        assert abs(res.p_lower - sm.gaussian_cdf(-float(eps) / cfg.sigma)) < 1e-15
        prev = res.bound


def test_bound_rejects_mismatched_config():
    samples, _ = _uniform_sample(100, 10)
    other = sm.SmoothingConfig(sigma=2.0, n=100, confidence=0.99, root_seed=10)
    with pytest.raises(ValueError, match="not drawn with"):
        sm.certified_lower_bound(samples, other, 0.1)


def test_bound_soundness_linear_gaussian_small():
    # trigger_fn(t) = Phi(a . t): smoothed percentiles have the closed form
    # Phi(a.theta + sigma ||a|| Phi^-1(p)), so the worst-case median inside
    # radius eps is exactly Phi(a.theta - eps ||a||). A 200-rep check; the
    # acceptance suite runs the full-size version.
    a = np.array([0.6, -0.8, 0.0], dtype=np.float64)
    theta = np.array([0.2, -0.1, 0.05], dtype=np.float32)
    sigma, eps, conf, n = 1.0, 0.5, 0.9, 300
    fn = lambda t: sm.gaussian_cdf(float(np.dot(a, t.astype(np.float64))))
    center = float(np.dot(a, theta.astype(np.float64)))
    true_worst_median = sm.gaussian_cdf(center - eps * float(np.linalg.norm(a)))
    violations = 0
    for rep in range(200):
        cfg = sm.SmoothingConfig(sigma=sigma, n=n, confidence=conf, root_seed=5000 + rep)
        samples = sm.sample_accuracies(fn, theta, cfg)
        res = sm.certified_lower_bound(samples, cfg, eps)
        if res is not None and res.bound > true_worst_median + 1e-12:
            violations += 1
    # expected failure rate <= 1 - c = 0.1; allow 3 binomial SEs
    limit = 0.1 * 200 + 3 * math.sqrt(200 * 0.1 * 0.9)
    assert violations <= limit
