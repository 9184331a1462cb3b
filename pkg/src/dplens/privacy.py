"""Gaussian differential privacy accounting.

Implements the mu <-> (epsilon, delta) duality

    delta(eps; mu) = Phi(-eps/mu + mu/2) - e^eps * Phi(-eps/mu - mu/2),

the GDP parameter of subsampled noisy SGD with unit per-step sensitivity

    mu = (B/n) * sqrt(T * (e^(1/sigma^2) - 1)),

and the exact noise calibration obtained by inverting the two maps.

delta itself saturates in double precision at both ends (underflow to 0 for
strong privacy at large epsilon, rounding to 1 for very large mu), so two
companion representations are provided: log(delta) and 1 - delta.  Round
trips across the whole mu range route through whichever representation keeps
the value away from the floating-point cliff; the plain (epsilon, delta)
functions remain the primary interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import log_ndtr, ndtr

MU_BRACKET = (1e-8, 1e4)
SIGMA_MAX = 1e6
_BISECTION_STEPS = 200


class CalibrationError(ArithmeticError):
    """Privacy calibration cannot reach the requested target."""


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) differential privacy target.

    When a dataset size is attached, delta must be smaller than 1/n.
    """

    epsilon: float
    delta: float
    dataset_size: int | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie strictly in (0, 1)")
        if self.dataset_size is not None and self.delta >= 1.0 / self.dataset_size:
            raise ValueError("delta must be below 1/n for a dataset of size n")


@dataclass(frozen=True)
class GdpParams:
    """A mu-GDP guarantee, optionally with the mechanism that produced it."""

    mu: float
    n: int | None = None
    batch_size: int | None = None
    iterations: int | None = None
    sample_budget: int | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")


def _check_mu_eps(mu: float, epsilon: float) -> None:
    if mu <= 0:
        raise ValueError("mu must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")


def _log1mexp(q: float) -> float:
    """log(1 - e^q) for q < 0, stable across the whole range."""
    if q < -math.log(2.0):
        return math.log1p(-math.exp(q))
    return math.log(-math.expm1(q))


def mu_to_log_delta(mu: float, epsilon: float) -> float:
    """log delta(eps; mu), finite even where delta underflows to zero.

    Writes delta = Phi(a) * (1 - exp(q)) with q = eps + log Phi(b) - log Phi(a),
    which is exact in exact arithmetic and avoids the subtractive cancellation
    of the direct formula in the deep-tail regime.
    """
    _check_mu_eps(mu, epsilon)
    a = -epsilon / mu + mu / 2.0
    b = -epsilon / mu - mu / 2.0
    log_a = float(log_ndtr(a))
    q = epsilon + float(log_ndtr(b)) - log_a
    # q < 0 always (delta > 0); guard rounding that pushes it to 0
    q = min(q, -1e-17)
    return log_a + _log1mexp(q)


def mu_to_delta(mu: float, epsilon: float) -> float:
    """delta(eps; mu) of the Gaussian-DP duality; increasing in mu."""
    log_delta = mu_to_log_delta(mu, epsilon)
    if log_delta < -745.0:
        return 0.0
    return math.exp(log_delta)


def mu_to_delta_complement(mu: float, epsilon: float) -> float:
    """1 - delta(eps; mu), accurate when delta is within rounding of 1."""
    _check_mu_eps(mu, epsilon)
    a = -epsilon / mu + mu / 2.0
    b = -epsilon / mu - mu / 2.0
    log_b = float(log_ndtr(b))
    second = math.exp(epsilon + log_b) if epsilon + log_b > -745.0 else 0.0
    return float(ndtr(-a)) + second


def _bisect_mu(above_target, lo: float, hi: float) -> float:
    """Smallest mu at which the monotone predicate flips true."""
    for _ in range(_BISECTION_STEPS):
        mid = math.sqrt(lo * hi)  # log-space midpoint: the bracket spans decades
        if above_target(mid):
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi)


def delta_to_mu(epsilon: float, delta: float) -> float:
    """Inverse duality: the mu whose delta(eps; mu) equals the target.

    Bisection on the monotone map over mu in [1e-8, 1e4]; the returned mu
    reproduces delta to well below 1e-10 wherever delta is representable.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie strictly in (0, 1)")
    return log_delta_to_mu(epsilon, math.log(delta))


def log_delta_to_mu(epsilon: float, log_delta: float) -> float:
    """Inverse duality parameterised by log delta (increasing in mu)."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if log_delta >= 0.0:
        raise ValueError("log delta must be negative")
    lo, hi = MU_BRACKET
    if mu_to_log_delta(lo, epsilon) > log_delta or mu_to_log_delta(hi, epsilon) < log_delta:
        raise CalibrationError(
            f"no mu in [{lo:g}, {hi:g}] attains log delta={log_delta:g} "
            f"at epsilon={epsilon:g}"
        )
    return _bisect_mu(lambda mu: mu_to_log_delta(mu, epsilon) >= log_delta, lo, hi)


def complement_to_mu(epsilon: float, one_minus_delta: float) -> float:
    """Inverse duality parameterised by 1 - delta (decreasing in mu)."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if not 0.0 < one_minus_delta < 1.0:
        raise ValueError("1 - delta must lie strictly in (0, 1)")
    lo, hi = MU_BRACKET
    if (
        mu_to_delta_complement(lo, epsilon) < one_minus_delta
        or mu_to_delta_complement(hi, epsilon) > one_minus_delta
    ):
        raise CalibrationError(
            f"no mu in [{lo:g}, {hi:g}] attains the requested complement "
            f"{one_minus_delta:g} at epsilon={epsilon:g}"
        )
    return _bisect_mu(
        lambda mu: mu_to_delta_complement(mu, epsilon) <= one_minus_delta, lo, hi
    )


def mu_of_noisy_sgd(b: int, n: int, t: int, sigma: float) -> float:
    """GDP parameter of T uniformly subsampled unit-sensitivity noisy steps."""
    if b <= 0 or n <= 0 or t <= 0:
        raise ValueError("B, n, T must be positive")
    if b > n:
        raise ValueError("batch size B cannot exceed dataset size n")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return (b / n) * math.sqrt(t * math.expm1(1.0 / sigma**2))


def calibrate_sigma(b: int, n: int, s: int, budget: PrivacyBudget) -> float:
    """Smallest noise multiplier meeting the budget over a sample budget S.

    The iteration count is T = ceil(S/B); inverting the subsampled-GDP
    parameter gives the closed form sigma = 1/sqrt(log1p((mu n / B)^2 / T)).
    Raises :class:`CalibrationError` when no sigma <= 1e6 suffices.
    """
    if b <= 0 or n <= 0 or s <= 0:
        raise ValueError("B, n, S must be positive")
    if b > n:
        raise ValueError("batch size B cannot exceed dataset size n")
    t = math.ceil(s / b)
    mu = delta_to_mu(budget.epsilon, budget.delta)
    arg = (mu * n / b) ** 2 / t
    inv_sq = math.log1p(arg)
    if inv_sq <= 0.0:
        raise CalibrationError("degenerate privacy target")
    sigma = 1.0 / math.sqrt(inv_sq)
    if sigma > SIGMA_MAX:
        raise CalibrationError(
            f"required sigma {sigma:g} exceeds the feasibility cap {SIGMA_MAX:g}"
        )
    return sigma


def sigma_sq_over_b(b: int, n: int, s: int, budget: PrivacyBudget) -> float:
    """Exact calibrated sigma(B)^2 / B at the given budget."""
    return calibrate_sigma(b, n, s, budget) ** 2 / b


def sigma_sq_over_b_expansion(b: int, n: int, s: int, mu: float) -> float:
    """Two-term large-batch expansion S/(mu^2 n^2) + 1/(2B) of sigma^2/B."""
    if b <= 0 or n <= 0 or s <= 0 or mu <= 0:
        raise ValueError("B, n, S, mu must be positive")
    return s / (mu**2 * n**2) + 0.5 / b
