"""Percentile smoothing of the trigger-set accuracy function.

Monte Carlo estimation of the median smoothed accuracy under Gaussian
parameter noise, plus the confidence-backed order-statistic machinery that
turns sorted accuracy samples into a certified lower bound: pick the
largest 1-based order statistic k such that

    P[Binomial(n, p_lower) >= k] >= c,      p_lower = Phi(-epsilon/sigma).

With probability >= c the k-th smallest sample then lower-bounds the
p_lower-percentile of the smoothed accuracy at the center point, which in
turn lower-bounds the smoothed median anywhere within l2 radius epsilon in
parameter space.

Special functions are evaluated in float64; noise draws are float32 to
match parameter storage. Per-sample seeds make the Monte Carlo loop
invariant to scheduling, so fan-out across workers cannot change results.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def gaussian_cdf(z: float) -> float:
    """Standard normal CDF, absolute error well below 1e-10."""
    if not math.isfinite(z):
        raise ValueError(f"gaussian_cdf needs a finite argument, got {z}")
    return 0.5 * math.erfc(-z * _SQRT1_2)


# Acklam's rational approximation of the normal quantile (relative error
# < 1.15e-9), then polished with two Halley steps against gaussian_cdf.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW, _P_HIGH = 0.02425, 1.0 - 0.02425


def gaussian_quantile(p: float) -> float:
    """Inverse of gaussian_cdf on (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"gaussian_quantile needs p in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= _P_HIGH:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    for _ in range(2):
        if abs(x) > 8.0:
            break
        err = gaussian_cdf(x) - p
        u = err * _SQRT_2PI * math.exp(0.5 * x * x)
        x = x - u / (1.0 + 0.5 * x * u)
    return x


def binomial_cdf(n: int, k: int, p: float) -> float:
    """P[Binomial(n, p) <= k], accurate to ~1e-11 relative for n <= 1e5.

    Anchored at the largest pmf term in [0, k] (computed from the exact
    integer binomial coefficient), neighbors by ratio recurrence, summed
    with fsum.
    """
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if k == n or p == 0.0:
        return 1.0
    if p == 1.0:
        return 0.0  # k < n here

    anchor = min(k, int(math.floor((n + 1) * p)))
    log_anchor = (math.log(math.comb(n, anchor))
                  + anchor * math.log(p) + (n - anchor) * math.log1p(-p))
    t_anchor = math.exp(log_anchor)
    terms = [t_anchor]
    q = 1.0 - p
    t = t_anchor
    for i in range(anchor, 0, -1):  # downward: term(i-1) from term(i)
        t *= (i * q) / ((n - i + 1) * p)
        terms.append(t)
        if t < t_anchor * 1e-18 and i < anchor - 2:
            break
    t = t_anchor
    for i in range(anchor, k):      # upward: term(i+1) from term(i)
        t *= ((n - i) * p) / ((i + 1) * q)
        terms.append(t)
        if t < t_anchor * 1e-18 and i > anchor + 2:
            break
    return min(math.fsum(terms), 1.0)


def empirical_percentile_index(n: int, c: float, sigma: float, epsilon: float) -> int | None:
    """Largest 1-based order statistic k that lower-bounds the
    Phi(-epsilon/sigma)-percentile with confidence >= c.

    Binary search over [0, floor(n * p_lower)] for the largest k with
    1 - binomial_cdf(n, k-1, p_lower) >= c. None means no order statistic
    qualifies: no certificate at this confidence.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < c < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {c}")
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if epsilon < 0.0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    p_lower = gaussian_cdf(-epsilon / sigma)
    lo, hi = 0, int(math.floor(n * p_lower))
    while lo < hi:  # invariant: predicate(lo) is true (k=0 trivially holds)
        mid = (lo + hi + 1) // 2
        if 1.0 - binomial_cdf(n, mid - 1, p_lower) >= c:
            lo = mid
        else:
            hi = mid - 1
    return lo if lo > 0 else None


# ---------------------------------------------------------------------------
# Monte Carlo sampling

@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    n: int = 10000
    confidence: float = 0.99
    root_seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")

    def to_obj(self):
        return {"sigma": self.sigma, "n": self.n, "confidence": self.confidence,
                "root_seed": self.root_seed}

    @staticmethod
    def from_obj(obj) -> "SmoothingConfig":
        return SmoothingConfig(sigma=float(obj["sigma"]), n=int(obj["n"]),
                               confidence=float(obj["confidence"]),
                               root_seed=int(obj["root_seed"]))


@dataclass(frozen=True)
class AccuracySample:
    """Sorted accuracies of n noisy parameter draws, plus seed provenance."""

    sorted_accuracies: np.ndarray  # ascending float64 [n]
    config: SmoothingConfig

    def __post_init__(self):
        acc = self.sorted_accuracies
        if acc.ndim != 1 or acc.shape[0] != self.config.n:
            raise ValueError("sample length must equal config.n")
        if np.any(np.diff(acc) < 0):
            raise ValueError("accuracies must be sorted ascending")

    @property
    def n(self) -> int:
        return self.config.n


def _sample_seed(root_seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, i])


def sample_accuracies(trigger_fn, theta: np.ndarray, cfg: SmoothingConfig,
                      jobs: int = 1) -> AccuracySample:
    """Evaluate trigger_fn at theta + G for n per-index-seeded Gaussian
    draws G ~ N(0, sigma^2 I); returns the sorted sample.

    Results are identical for any jobs value: draw i always uses the seed
    mixed from (root_seed, i) and lands at slot i before sorting.
    """
    theta = np.asarray(theta, dtype=np.float32)
    out = np.empty(cfg.n, dtype=np.float64)

    def one(i: int) -> None:
        rng = np.random.default_rng(_sample_seed(cfg.root_seed, i))
        noise = rng.standard_normal(theta.shape[0], dtype=np.float32) * np.float32(cfg.sigma)
        out[i] = trigger_fn(theta + noise)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(one, range(cfg.n)))
    else:
        for i in range(cfg.n):
            one(i)
    out.sort()
    return AccuracySample(out, cfg)


def smoothed_trigger_accuracy(samples: AccuracySample) -> float:
    """Median estimator: the sorted sample at 0-based index floor(0.5 n)."""
    return float(samples.sorted_accuracies[int(math.floor(0.5 * samples.n))])


@dataclass(frozen=True)
class CertifiedBound:
    bound: float        # the k-th smallest sampled accuracy
    order_index: int    # 1-based k
    p_lower: float      # Phi(-epsilon/sigma)


def certified_lower_bound(samples: AccuracySample, cfg: SmoothingConfig,
                          epsilon: float) -> CertifiedBound | None:
    """Confidence-c lower bound on the smoothed median after any parameter
    shift of l2 norm < epsilon; None when the sample size cannot support
    a bound at this confidence."""
    if cfg != samples.config:
        raise ValueError("samples were not drawn with this SmoothingConfig")
    k = empirical_percentile_index(cfg.n, cfg.confidence, cfg.sigma, epsilon)
    if k is None:
        return None
    return CertifiedBound(bound=float(samples.sorted_accuracies[k - 1]),
                          order_index=k,
                          p_lower=gaussian_cdf(-epsilon / cfg.sigma))
