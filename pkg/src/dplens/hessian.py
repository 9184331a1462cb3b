"""Stochastic curvature probes: trace, quadratic form, and tr(H Sigma).

All estimators consume a Hessian-vector-product action ``v -> H v`` rather
than a materialised matrix, so they scale to any model that can provide the
action.  Estimates are reported with standard errors and are reproducible
under a fixed generator.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

Array = np.ndarray
HvpAction = Callable[[Array], Array]


@dataclass(frozen=True)
class TraceEstimate:
    estimate: float
    standard_error: float


@dataclass(frozen=True)
class HessianStats:
    """Scalar curvature statistics measured at one point of a loss landscape."""

    tr_h: float
    tr_h_sigma: float
    g_h_g: float
    g_norm_sq: float
    probe_count: int
    standard_error_tr_h: float

    def __post_init__(self):
        if self.probe_count < 1:
            raise ValueError("probe_count must be positive")
        if self.standard_error_tr_h < 0:
            raise ValueError("standard error must be nonnegative")


def hutchinson_trace(
    hvp_action: HvpAction,
    d: int,
    k: int,
    rng: np.random.Generator,
    probes: str = "gaussian",
) -> TraceEstimate:
    """Randomized trace estimate mean_j v_j^T H v_j over k isotropic probes.

    Gaussian probes are the default; Rademacher probes are available for
    variance reduction.  Unbiased for any symmetric operator; the standard
    error is the sample standard deviation of the per-probe values over
    sqrt(k).
    """
    if k < 2:
        raise ValueError("need k >= 2 probes to report a standard error")
    if probes == "gaussian":
        vs = rng.standard_normal((k, d))
    elif probes == "rademacher":
        vs = rng.integers(0, 2, size=(k, d)) * 2.0 - 1.0
    else:
        raise ValueError(f"unknown probe distribution {probes!r}")
    values = np.empty(k)
    for j in range(k):
        hv = np.asarray(hvp_action(vs[j]), dtype=float)
        values[j] = vs[j] @ hv
    if not np.all(np.isfinite(values)):
        raise ValueError("hvp action produced non-finite values")
    return TraceEstimate(
        estimate=float(values.mean()),
        standard_error=float(values.std(ddof=1) / np.sqrt(k)),
    )


def quadratic_form(g: Array, hvp_action: HvpAction) -> float:
    """g^T H g through one application of the Hessian action."""
    g = np.asarray(g, dtype=float)
    hg = np.asarray(hvp_action(g), dtype=float)
    if hg.shape != g.shape:
        raise ValueError(
            f"hvp action returned shape {hg.shape}, expected {g.shape}"
        )
    return float(g @ hg)


def trace_h_sigma(
    per_sample_grads: Array, g_hat: Array, hvp_action: HvpAction
) -> TraceEstimate:
    """Estimate tr(H Sigma) = E[(g_i - G)^T H (g_i - G)] from a batch.

    Uses the centered quadratic forms with the m/(m-1) small-sample
    correction that makes the estimate unbiased under an exact mean.
    """
    grads = np.atleast_2d(np.asarray(per_sample_grads, dtype=float))
    m = grads.shape[0]
    if m < 2:
        raise ValueError("need at least 2 samples")
    g_hat = np.asarray(g_hat, dtype=float)
    centered = grads - g_hat[None, :]
    values = np.empty(m)
    for i in range(m):
        values[i] = centered[i] @ np.asarray(hvp_action(centered[i]), dtype=float)
    correction = m / (m - 1)
    return TraceEstimate(
        estimate=float(correction * values.mean()),
        standard_error=float(correction * values.std(ddof=1) / np.sqrt(m)),
    )


def stats_snapshot(task, w: Array, batch, k: int, rng: np.random.Generator) -> HessianStats:
    """One-shot curvature measurement of a task at parameters ``w``.

    Fills a :class:`HessianStats` from the batch-mean gradient, a Hutchinson
    trace with k probes, and the centered tr(H Sigma) estimator, all sharing
    the batch Hessian action.
    """
    w = np.asarray(w, dtype=float)
    grads = task.per_sample_gradients(w, batch)
    g_hat = grads.mean(axis=0)
    action = lambda v: task.hvp(w, batch, v)
    trace = hutchinson_trace(action, task.dimension, k, rng)
    hs = trace_h_sigma(grads, g_hat, action)
    return HessianStats(
        tr_h=trace.estimate,
        tr_h_sigma=hs.estimate,
        g_h_g=quadratic_form(g_hat, action),
        g_norm_sq=float(g_hat @ g_hat),
        probe_count=k,
        standard_error_tr_h=trace.standard_error,
    )


STATS_CSV_HEADER = "iter,tr_H,tr_H_Sigma,gHg,g_norm_sq,decelerator"


def stats_csv(rows: list[tuple[int, HessianStats, float]]) -> str:
    """Render per-iteration curvature rows as CSV text.

    Each row is ``(iteration, stats, decelerator)``; callers supply the
    decelerator because it depends on the run's (sigma, c, B) context.
    """
    out = io.StringIO()
    out.write(STATS_CSV_HEADER + "\n")
    for iteration, stats, decel in rows:
        out.write(
            f"{iteration},{stats.tr_h!r},{stats.tr_h_sigma!r},"
            f"{stats.g_h_g!r},{stats.g_norm_sq!r},{decel!r}\n"
        )
    return out.getvalue()
