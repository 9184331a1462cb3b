"""Closed-form per-iteration loss-improvement predictors.

Under a second-order expansion of the objective, one step of privatized SGD
with learning rate eta, batch size B, clip scale c and noise multiplier
sigma improves the population loss in expectation by

    dL(eta) = eta c |G|^2
              - eta^2/2 (c^2 G^T H G + c^2 tr(H Sigma)/B + sigma^2 tr(H)/B^2).

Maximising over eta and normalising per processed sample yields

    dL*(B) = |G|^4 / (2 (B G^T H G + tr(H Sigma) + sigma^2 tr(H)/(B c^2))),

whose private-only extra denominator term sigma^2 tr(H)/(B c^2) (the
"decelerator") quantifies the slowdown caused by noising and clipping.
This module provides those forms plus the induced optima (learning rate,
batch size, public/private mixing ratio), the public special case
(c=1, sigma=0), scale-invariant optimizer and cross-measure variants, and
cumulative schedule comparisons.  All functions are pure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class NonPositiveCurvatureError(ArithmeticError):
    """A denominator that the theory assumes positive is not."""


class NoInteriorOptimumError(ArithmeticError):
    """No interior optimum exists (noiseless improvement is monotone in B)."""


class SaddleOrDegenerateError(ArithmeticError):
    """The bivariate quadratic has no interior maximum."""


class ScaleInvarianceError(ValueError):
    """The supplied post-processor is not scale-invariant."""


@dataclass(frozen=True)
class ImprovementInputs:
    """Scalar statistics parameterising every closed-form predictor."""

    g_norm_sq: float
    g_h_g: float
    tr_h: float
    tr_h_sigma: float
    sigma: float
    c: float = 1.0
    batch_size: float = 1.0

    def __post_init__(self):
        if self.g_norm_sq < 0:
            raise ValueError("|G|^2 must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0.0 < self.c <= 1.0:
            raise ValueError("clip scale c must lie in (0, 1]")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")

    def with_batch(self, batch_size: float) -> "ImprovementInputs":
        return replace(self, batch_size=batch_size)


@dataclass(frozen=True)
class MixInputs:
    """Improvement statistics for mixed public/private training."""

    g_norm_sq: float
    g_h_g: float
    tr_h: float
    tr_h_sigma: float
    sigma: float
    c: float
    b_public: float
    b_private: float

    def __post_init__(self):
        if self.b_public <= 0 or self.b_private <= 0:
            raise ValueError("both batch sizes must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0.0 < self.c <= 1.0:
            raise ValueError("clip scale c must lie in (0, 1]")

    @classmethod
    def from_improvement(
        cls, inputs: ImprovementInputs, b_public: float, b_private: float
    ) -> "MixInputs":
        return cls(
            g_norm_sq=inputs.g_norm_sq,
            g_h_g=inputs.g_h_g,
            tr_h=inputs.tr_h,
            tr_h_sigma=inputs.tr_h_sigma,
            sigma=inputs.sigma,
            c=inputs.c,
            b_public=b_public,
            b_private=b_private,
        )


# -- single-route improvement forms -----------------------------------------


def delta_l_priv(eta: float, inputs: ImprovementInputs) -> float:
    """Expected one-step improvement of privatized SGD at learning rate eta."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    b, c, sigma = inputs.batch_size, inputs.c, inputs.sigma
    curvature = (
        c * c * inputs.g_h_g
        + c * c * inputs.tr_h_sigma / b
        + sigma * sigma * inputs.tr_h / (b * b)
    )
    return eta * c * inputs.g_norm_sq - 0.5 * eta * eta * curvature


def delta_l_pub(eta: float, b: float, inputs: ImprovementInputs) -> float:
    """Noiseless, unclipped special case of :func:`delta_l_priv`."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if b <= 0:
        raise ValueError("batch size must be positive")
    curvature = inputs.g_h_g + inputs.tr_h_sigma / b
    return eta * inputs.g_norm_sq - 0.5 * eta * eta * curvature


def _priv_star_denominator(b: float, inputs: ImprovementInputs) -> float:
    return (
        b * inputs.g_h_g
        + inputs.tr_h_sigma
        + inputs.sigma**2 * inputs.tr_h / (b * inputs.c**2)
    )


def delta_l_priv_star(b: float, inputs: ImprovementInputs) -> float:
    """Per-sample improvement at the optimal learning rate, batch size B.

    Equals max_eta delta_l_priv(eta) / B; at sigma = 0 it coincides exactly
    with :func:`delta_l_pub_star`.
    """
    if b <= 0:
        raise ValueError("batch size must be positive")
    if inputs.g_norm_sq == 0.0:
        return 0.0
    denom = _priv_star_denominator(b, inputs)
    if denom <= 0:
        raise NonPositiveCurvatureError(
            f"denominator {denom:g} is not positive at B={b:g}"
        )
    return 0.5 * inputs.g_norm_sq**2 / denom


def delta_l_pub_star(b: float, inputs: ImprovementInputs) -> float:
    """Per-sample improvement of plain SGD at the optimal learning rate."""
    if b <= 0:
        raise ValueError("batch size must be positive")
    if inputs.g_norm_sq == 0.0:
        return 0.0
    denom = b * inputs.g_h_g + inputs.tr_h_sigma
    if denom <= 0:
        raise NonPositiveCurvatureError(
            f"denominator {denom:g} is not positive at B={b:g}"
        )
    return 0.5 * inputs.g_norm_sq**2 / denom


def optimal_eta(inputs: ImprovementInputs) -> float:
    """Learning rate maximising :func:`delta_l_priv`.

    Analysis-only: it depends on oracle statistics of the data, so using it
    adaptively inside a private training run would not be permissible.
    """
    b, c, sigma = inputs.batch_size, inputs.c, inputs.sigma
    curvature = (
        c * c * inputs.g_h_g
        + c * c * inputs.tr_h_sigma / b
        + sigma * sigma * inputs.tr_h / (b * b)
    )
    if curvature <= 0:
        raise NonPositiveCurvatureError("improvement is not concave in eta")
    return c * inputs.g_norm_sq / curvature


def decelerator(inputs: ImprovementInputs) -> float:
    """The private-only denominator term sigma^2 tr(H) / (B c^2)."""
    return inputs.sigma**2 * inputs.tr_h / (inputs.batch_size * inputs.c**2)


def optimal_batch_dp(inputs: ImprovementInputs) -> float:
    """Batch size maximising the private per-sample improvement.

    Balances the B G^T H G and decelerator terms:
    B* = sqrt(sigma^2 tr(H) / (c^2 G^T H G)).
    """
    if inputs.sigma == 0.0:
        raise NoInteriorOptimumError(
            "sigma = 0: noiseless improvement is monotone in B"
        )
    if inputs.g_h_g <= 0:
        raise NonPositiveCurvatureError("G^T H G must be positive")
    if inputs.tr_h <= 0:
        raise NonPositiveCurvatureError("tr(H) must be positive")
    return math.sqrt(inputs.sigma**2 * inputs.tr_h / (inputs.c**2 * inputs.g_h_g))


@dataclass(frozen=True)
class TwiceBatchIdentity:
    lhs: float
    rhs: float
    relative_gap: float


def twice_batch_identity(inputs: ImprovementInputs) -> TwiceBatchIdentity:
    """Public improvement at 2 B* versus private improvement at B*.

    The two sides agree algebraically; the reported relative gap is pure
    floating-point noise.
    """
    b_star = optimal_batch_dp(inputs)
    lhs = delta_l_pub_star(2.0 * b_star, inputs)
    rhs = delta_l_priv_star(b_star, inputs)
    scale = max(abs(lhs), abs(rhs), np.finfo(float).tiny)
    return TwiceBatchIdentity(lhs=lhs, rhs=rhs, relative_gap=abs(lhs - rhs) / scale)


def data_efficiency_condition(
    inputs: ImprovementInputs,
    b_nondp: float | None = None,
    threshold: float = 0.1,
) -> bool:
    """Whether private training sits in the data-efficient regime.

    Tests B* << tr(H Sigma) / (2 G^T H G), with "<<" operationalised as a
    multiplicative threshold (default 0.1).  When sigma = 0 there is no B*;
    half the supplied non-private batch size stands in for it.
    """
    if inputs.sigma > 0:
        b_value = optimal_batch_dp(inputs)
    elif b_nondp is not None:
        b_value = 0.5 * b_nondp
    else:
        raise ValueError("sigma = 0 requires b_nondp to supply the batch scale")
    if inputs.g_h_g <= 0:
        raise NonPositiveCurvatureError("G^T H G must be positive")
    return bool(b_value < threshold * inputs.tr_h_sigma / (2.0 * inputs.g_h_g))


# -- mixed public/private training -------------------------------------------


def mixed_quadratic_coefficients(
    mix: MixInputs,
) -> tuple[float, float, float, float, float]:
    """Coefficients (A, B, C, D, E) of the bivariate improvement quadratic.

    The improvement as a function of the split learning rates
    (eta_pub, eta_priv) is -(A eta_pub^2 + B eta_priv^2 + C eta_pub
    + D eta_priv + E eta_pub eta_priv).
    """
    c = mix.c
    a = 0.5 * mix.g_h_g + 0.5 * mix.tr_h_sigma / mix.b_public
    b = (
        0.5 * c * c * mix.g_h_g
        + 0.5 * c * c * mix.tr_h_sigma / mix.b_private
        + 0.5 * mix.sigma**2 * mix.tr_h / mix.b_private**2
    )
    c_lin = -mix.g_norm_sq
    d_lin = -c * mix.g_norm_sq
    e = c * mix.g_h_g
    return a, b, c_lin, d_lin, e


def mixed_improvement(eta0: float, eta1: float, mix: MixInputs) -> float:
    """Expected one-step improvement of the mixed gradient.

    ``eta0`` scales the public mini-batch mean, ``eta1`` the privatized
    private gradient; at eta0 = 0 this is the private-only improvement and
    at eta1 = 0 the public-only one.
    """
    if eta0 < 0 or eta1 < 0:
        raise ValueError("split learning rates must be nonnegative")
    a, b, c_lin, d_lin, e = mixed_quadratic_coefficients(mix)
    return -(
        a * eta0 * eta0
        + b * eta1 * eta1
        + c_lin * eta0
        + d_lin * eta1
        + e * eta0 * eta1
    )


def _mixed_stationary_point(mix: MixInputs) -> tuple[float, float, float]:
    a, b, c_lin, d_lin, e = mixed_quadratic_coefficients(mix)
    det = 4.0 * a * b - e * e
    if det <= 0 or a <= 0:
        raise SaddleOrDegenerateError(
            "the improvement quadratic has no interior maximum"
        )
    eta0 = -(2.0 * b * c_lin - d_lin * e) / det
    eta1 = -(2.0 * a * d_lin - c_lin * e) / det
    value = (b * c_lin**2 + a * d_lin**2 - c_lin * d_lin * e) / det
    return eta0, eta1, value


def optimal_mixed_improvement(mix: MixInputs) -> float:
    """Improvement at the jointly optimal split learning rates."""
    return _mixed_stationary_point(mix)[2]


def only_public_optimum(mix: MixInputs) -> float:
    """Best improvement restricted to the public gradient alone."""
    a, _, c_lin, _, _ = mixed_quadratic_coefficients(mix)
    if a <= 0:
        raise SaddleOrDegenerateError("public-only improvement is unbounded")
    return c_lin**2 / (4.0 * a)


def only_private_optimum(mix: MixInputs) -> float:
    """Best improvement restricted to the privatized gradient alone."""
    _, b, _, d_lin, _ = mixed_quadratic_coefficients(mix)
    if b <= 0:
        raise SaddleOrDegenerateError("private-only improvement is unbounded")
    return d_lin**2 / (4.0 * b)


def optimal_mix_alpha(mix: MixInputs) -> float:
    """Optimal public weight alpha* = eta0* / (eta0* + eta1*).

    Strictly interior in (0, 1) whenever the quadratic has an interior
    maximum: both data kinds help.  Out-of-range values under extreme
    inputs are clamped with a warning.
    """
    eta0, eta1, _ = _mixed_stationary_point(mix)
    total = eta0 + eta1
    if total <= 0:
        raise SaddleOrDegenerateError("optimal split learning rates are degenerate")
    alpha = eta0 / total
    if not 0.0 <= alpha <= 1.0:
        warnings.warn(
            f"optimal alpha {alpha:g} outside [0, 1]; clamping", stacklevel=2
        )
        alpha = min(max(alpha, 0.0), 1.0)
    return alpha


@dataclass(frozen=True)
class AlphaSchedule:
    """Public-weight schedule alpha_t for mixed data training."""

    kind: str
    s: float | None = None
    total: int | None = None
    k: int | None = None
    n_pub: int | None = None
    n_priv: int | None = None

    def __post_init__(self):
        if self.kind == "indicator":
            if self.s is None or not 0.0 < self.s < 1.0:
                raise ValueError("indicator switch fraction s must lie in (0, 1)")
            if self.total is None or self.total <= 0:
                raise ValueError("indicator schedule needs a positive horizon T")
        elif self.kind == "dpmd":
            if self.k is None or self.k <= 0:
                raise ValueError("dpmd schedule needs K > 0")
        elif self.kind == "sample":
            if (
                self.n_pub is None
                or self.n_priv is None
                or self.n_pub < 0
                or self.n_priv < 0
                or self.n_pub + self.n_priv <= 0
            ):
                raise ValueError("sample schedule needs nonnegative sizes, not both 0")
        elif self.kind not in ("only_public", "only_private"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def indicator(cls, s: float, total: int) -> "AlphaSchedule":
        return cls(kind="indicator", s=s, total=total)

    @classmethod
    def dpmd(cls, k: int) -> "AlphaSchedule":
        return cls(kind="dpmd", k=k)

    @classmethod
    def sample(cls, n_pub: int, n_priv: int) -> "AlphaSchedule":
        return cls(kind="sample", n_pub=n_pub, n_priv=n_priv)

    @classmethod
    def only_public(cls) -> "AlphaSchedule":
        return cls(kind="only_public")

    @classmethod
    def only_private(cls) -> "AlphaSchedule":
        return cls(kind="only_private")


def alpha_schedule_value(schedule: AlphaSchedule, t: int) -> float:
    """Public weight alpha_t at iteration t, always in [0, 1]."""
    if t < 0:
        raise ValueError("iteration index must be nonnegative")
    if schedule.kind == "indicator":
        return 1.0 if t < schedule.s * schedule.total else 0.0
    if schedule.kind == "dpmd":
        return min(max(1.0 - math.cos(math.pi * t / (2.0 * schedule.k)), 0.0), 1.0)
    if schedule.kind == "sample":
        return schedule.n_pub / (schedule.n_pub + schedule.n_priv)
    if schedule.kind == "only_public":
        return 1.0
    return 0.0


# -- generalisations ----------------------------------------------------------


@dataclass(frozen=True)
class PostProcessor:
    """A gradient post-processor p with its Jacobian action at a point."""

    value: Callable[[Array], Array]
    jacobian_action: Callable[[Array, Array], Array]


def normalize_post_processor() -> PostProcessor:
    """The gradient-normalisation post-processor p(G) = G / |G|.

    Its Jacobian at G is the scaled tangent projector (I - u u^T)/|G| with
    u = G/|G|, which is what the closed form below consumes.
    """

    def value(g: Array) -> Array:
        g = np.asarray(g, dtype=float)
        norm = np.linalg.norm(g)
        if norm == 0:
            raise ValueError("cannot normalise the zero gradient")
        return g / norm

    def jacobian_action(g: Array, v: Array) -> Array:
        g = np.asarray(g, dtype=float)
        v = np.asarray(v, dtype=float)
        norm = np.linalg.norm(g)
        if norm == 0:
            raise ValueError("cannot normalise the zero gradient")
        u = g / norm
        return (v - (u @ v) * u) / norm

    return PostProcessor(value=value, jacobian_action=jacobian_action)


def sign_post_processor() -> PostProcessor:
    """Coordinate-wise sign post-processor (zero Jacobian a.e.)."""

    def value(g: Array) -> Array:
        return np.sign(np.asarray(g, dtype=float))

    def jacobian_action(g: Array, v: Array) -> Array:
        del g
        return np.zeros_like(np.asarray(v, dtype=float))

    return PostProcessor(value=value, jacobian_action=jacobian_action)


def general_optimizer_improvement(
    post: PostProcessor,
    gradient: Array,
    inputs: ImprovementInputs,
    hvp_action: Callable[[Array], Array],
    grad_samples: Array,
    probes: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Optimal per-sample improvement for a scale-invariant post-processor.

    Evaluates |p^T G|^2 / (2 (B p^T H p + tr(J^T H J Sigma)
    + sigma^2 tr(J^T H J)/(B c^2))) with p = p(G) and J = p'(G).  The trace
    terms are estimated stochastically through the composed action
    v -> J^T H J v (as probe quadratic forms (J v)^T H (J v)) and the
    centered per-sample quadratic forms.  Scale invariance is verified
    numerically before anything else runs.
    """
    g = np.asarray(gradient, dtype=float)
    p = np.asarray(post.value(g), dtype=float)
    p_doubled = np.asarray(post.value(2.0 * g), dtype=float)
    if np.linalg.norm(p_doubled - p) > 1e-8:
        raise ScaleInvarianceError("post-processor output changes under rescaling")
    if rng is None:
        rng = np.random.default_rng(0)
    if probes < 2:
        raise ValueError("need at least 2 probes")

    b, c, sigma = inputs.batch_size, inputs.c, inputs.sigma
    p_h_p = float(p @ np.asarray(hvp_action(p), dtype=float))

    d = g.shape[0]
    probe_vals = np.empty(probes)
    for j in range(probes):
        v = rng.standard_normal(d)
        jv = np.asarray(post.jacobian_action(g, v), dtype=float)
        probe_vals[j] = jv @ np.asarray(hvp_action(jv), dtype=float)
    tr_jhj = float(probe_vals.mean())

    grads = np.atleast_2d(np.asarray(grad_samples, dtype=float))
    m = grads.shape[0]
    if m < 2:
        raise ValueError("need at least 2 gradient samples")
    centered = grads - grads.mean(axis=0)[None, :]
    sample_vals = np.empty(m)
    for i in range(m):
        ji = np.asarray(post.jacobian_action(g, centered[i]), dtype=float)
        sample_vals[i] = ji @ np.asarray(hvp_action(ji), dtype=float)
    tr_jhj_sigma = float(m / (m - 1) * sample_vals.mean())

    denom = b * p_h_p + tr_jhj_sigma + sigma**2 * tr_jhj / (b * c**2)
    if denom <= 0:
        raise NonPositiveCurvatureError(
            f"denominator {denom:g} is not positive"
        )
    return 0.5 * float(p @ g) ** 2 / denom


@dataclass(frozen=True)
class CrossMeasureInputs:
    """Statistics of an evaluation loss different from the training loss."""

    inner_product: float  # G_other^T G
    g_h_other_g: float  # G^T H_other G
    tr_h_other: float
    tr_h_other_sigma: float


def cross_measure_improvement(
    inputs: ImprovementInputs, other: CrossMeasureInputs
) -> float:
    """Optimal per-sample improvement of an auxiliary performance measure.

    Training steps on the primary loss; the measure being improved has its
    own gradient/Hessian statistics.  With the auxiliary measure equal to
    the training loss this reduces exactly to :func:`delta_l_priv_star`.
    """
    b, c, sigma = inputs.batch_size, inputs.c, inputs.sigma
    denom = (
        b * other.g_h_other_g
        + other.tr_h_other_sigma
        + sigma**2 * other.tr_h_other / (b * c**2)
    )
    if denom <= 0:
        raise NonPositiveCurvatureError(f"denominator {denom:g} is not positive")
    return 0.5 * other.inner_product**2 / denom


# -- cumulative schedules ------------------------------------------------------


@dataclass(frozen=True)
class ScheduleComparison:
    mixed_sum: float
    public_sum: float
    gap: float


def schedule_cumulative(
    stats_sequence: Sequence[ImprovementInputs], s: float
) -> ScheduleComparison:
    """Cumulative optimal improvement of a public-then-private schedule.

    Sums the per-sample optimal improvements over the iteration sequence,
    activating each step's decelerator only from iteration s*T onward, and
    compares against the fully public sum.  The gap is exactly the total
    improvement forfeited to the decelerator.
    """
    if len(stats_sequence) == 0:
        raise ValueError("need a nonempty sequence")
    if not 0.0 <= s <= 1.0:
        raise ValueError("switch fraction s must lie in [0, 1]")
    total = len(stats_sequence)
    cutoff = s * total
    mixed = 0.0
    public = 0.0
    for t, inputs in enumerate(stats_sequence):
        pub_t = delta_l_pub_star(inputs.batch_size, inputs)
        public += pub_t
        if t < cutoff:
            mixed += pub_t
        else:
            mixed += delta_l_priv_star(inputs.batch_size, inputs)
    return ScheduleComparison(mixed_sum=mixed, public_sum=public, gap=public - mixed)
