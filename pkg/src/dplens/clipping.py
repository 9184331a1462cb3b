"""Per-sample gradient clipping and privatized-gradient assembly.

Two clipping rules are supported, both normalised so that every clipped
per-sample contribution has norm at most 1 (unit sensitivity):

* re-parameterised: ``C = min(1/|g|, 1/R)``
* AUTO:             ``C = 1/|g|``

The privatized gradient of a batch is ``(sum_i C_i g_i + sigma * N(0, I)) / B``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class ClippingRule:
    """Per-sample clipping rule; construct via :meth:`auto` or :meth:`reparam`."""

    kind: str
    r: float = 1.0

    def __post_init__(self):
        if self.kind not in ("auto", "reparam"):
            raise ValueError(f"unknown clipping kind {self.kind!r}")
        if self.kind == "reparam" and self.r <= 0:
            raise ValueError("clipping threshold R must be positive")

    @classmethod
    def auto(cls) -> "ClippingRule":
        return cls(kind="auto")

    @classmethod
    def reparam(cls, r: float = 1.0) -> "ClippingRule":
        return cls(kind="reparam", r=float(r))


def clip_factor(g_norm: float, rule: ClippingRule) -> float:
    """Scalar C multiplying a per-sample gradient of the given norm.

    A zero-norm gradient under AUTO clipping returns 0.0: the sample's
    contribution C * g is the zero vector either way, and this keeps the
    factor finite for downstream averaging.
    """
    if g_norm < 0:
        raise ValueError("gradient norm must be nonnegative")
    if rule.kind == "auto":
        return 0.0 if g_norm == 0.0 else 1.0 / g_norm
    if g_norm == 0.0:
        return 1.0 / rule.r
    return min(1.0 / g_norm, 1.0 / rule.r)


def clip_factors(g_norms: Array, rule: ClippingRule) -> Array:
    """Vectorised :func:`clip_factor` over an array of norms."""
    g_norms = np.asarray(g_norms, dtype=float)
    if np.any(g_norms < 0):
        raise ValueError("gradient norms must be nonnegative")
    with np.errstate(divide="ignore"):
        inv = np.where(g_norms > 0, 1.0 / np.where(g_norms > 0, g_norms, 1.0), 0.0)
    if rule.kind == "auto":
        return inv
    factors = np.minimum(inv, 1.0 / rule.r)
    # zero-norm samples clip at the threshold rate, matching clip_factor
    return np.where(g_norms == 0.0, 1.0 / rule.r, factors)


def _clipped_sums(grads: Array, rule: ClippingRule | None) -> Array:
    """Sum of clipped per-sample gradients along axis -2 (rule=None: raw sum)."""
    if rule is None:
        return grads.sum(axis=-2)
    norms = np.linalg.norm(grads, axis=-1)
    factors = clip_factors(norms, rule)
    return np.einsum("...i,...ij->...j", factors, grads)


def privatize_gradient(
    per_sample_grads: Array,
    rule: ClippingRule | None,
    sigma: float,
    rng: np.random.Generator | None = None,
) -> Array:
    """Clipped, noised, batch-averaged gradient.

    Returns ``(sum_i C_i g_i + sigma * N(0, I_d)) / B``.  With ``rule=None``
    the raw per-sample gradients are summed (no clipping).  With ``sigma=0``
    no noise is drawn and the generator is left untouched, so the output is
    deterministic.
    """
    grads = np.atleast_2d(np.asarray(per_sample_grads, dtype=float))
    if grads.ndim != 2 or grads.shape[0] == 0:
        raise ValueError("need a nonempty batch of 1-D gradients")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    b, d = grads.shape
    total = _clipped_sums(grads, rule)
    if sigma > 0:
        if rng is None:
            raise ValueError("sigma > 0 requires a random generator")
        total = total + sigma * rng.standard_normal(d)
    return total / b


def privatize_gradient_many(
    per_sample_grads: Array,
    rule: ClippingRule | None,
    sigma: float,
    rng: np.random.Generator | None = None,
) -> Array:
    """Privatized gradients for a stack of independent batches.

    ``per_sample_grads`` has shape ``(trials, B, d)``; each trial gets an
    independent noise draw.  Shares the clipping/noising kernel with
    :func:`privatize_gradient` so Monte-Carlo consumers exercise the same
    mechanism.
    """
    grads = np.asarray(per_sample_grads, dtype=float)
    if grads.ndim != 3 or grads.shape[1] == 0:
        raise ValueError("expected shape (trials, B, d) with B >= 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    trials, b, d = grads.shape
    totals = _clipped_sums(grads, rule)
    if sigma > 0:
        if rng is None:
            raise ValueError("sigma > 0 requires a random generator")
        totals = totals + sigma * rng.standard_normal((trials, d))
    return totals / b


@dataclass(frozen=True)
class ClippingDiagnostic:
    """Batch-level clipping bias summary."""

    c_hat: float
    cosine: float


def clipping_bias_diagnostic(
    per_sample_grads: Array, rule: ClippingRule
) -> ClippingDiagnostic:
    """Mean clip factor and alignment between clipped and raw gradient sums.

    ``c_hat`` estimates the linearisation scale c ~ E[C_i]; ``cosine`` is the
    cosine of the angle between ``sum_i C_i g_i`` and ``sum_i g_i`` and equals
    1 exactly when all per-sample gradients are parallel.
    """
    grads = np.atleast_2d(np.asarray(per_sample_grads, dtype=float))
    if grads.shape[0] == 0:
        raise ValueError("need a nonempty batch")
    norms = np.linalg.norm(grads, axis=1)
    factors = clip_factors(norms, rule)
    clipped_sum = factors @ grads
    raw_sum = grads.sum(axis=0)
    denom = np.linalg.norm(clipped_sum) * np.linalg.norm(raw_sum)
    if denom == 0.0:
        raise ValueError("cosine undefined: a gradient sum is the zero vector")
    cosine = float(clipped_sum @ raw_sum / denom)
    return ClippingDiagnostic(c_hat=float(factors.mean()), cosine=cosine)
