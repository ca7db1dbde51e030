"""Server-side combination of client updates and objective-consistency diagnostics.

A rule combines a round's client updates as Delta = sum_{i in S} (w~_i / q_i^S)
Delta_i.  The induced fixed point optimizes the reweighted objective
f_hat = sum_i w_hat_i f_i with

    w_hat_i = w~_i tau_i / (W q_i c_i),      W = sum_i w~_i tau_i / (q_i c_i),

where tau_i is client i's step count (epochs * |D_i| unless truncated) and
1/q_i = E[(1/q_i^S) 1_{i in S}].  Configurations with w_hat = w optimize the
true objective; anything else is objective inconsistency made explicit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import DuplicatedQuadratic, HeterogeneityConstants, Problem, UnsupportedProblemError
from .sampling import (
    AggregationNormalizer,
    SamplingScheme,
    SumOneNormalizer,
    UnbiasedNormalizer,
)

__all__ = [
    "AggregationRule",
    "EffectiveObjective",
    "aggregate",
    "effective_weights",
    "predicted_limit",
    "consistency_restoring_weights",
    "gen_variance_constants",
]


@dataclass(frozen=True)
class AggregationRule:
    """Aggregation weights w~ plus the subset normalizer q^S."""

    kind: str
    w_tilde: np.ndarray
    normalizer: AggregationNormalizer

    @classmethod
    def unbiased(cls, w_tilde) -> "AggregationRule":
        """Delta = sum (w~_i / p_i) Delta_i; exact mean sum_i w~_i Delta_i."""
        return cls("unbiased", np.asarray(w_tilde, dtype=np.float64), UnbiasedNormalizer())

    @classmethod
    def sum_one(cls, weights, cohort: float, n: int) -> "AggregationRule":
        """Practical rule Delta = (n/b) (1/sum_{j in S} w_j) sum w_i Delta_i."""
        weights = np.asarray(weights, dtype=np.float64)
        return cls("sum_one", weights, SumOneNormalizer(weights, scale=cohort / n))

    @classmethod
    def gen(cls, w_tilde, normalizer: AggregationNormalizer) -> "AggregationRule":
        """Explicit (w~, q) pair."""
        return cls("gen", np.asarray(w_tilde, dtype=np.float64), normalizer)

    def coefficient(self, i: int, subset, scheme: SamplingScheme) -> float:
        return float(self.w_tilde[i]) / self.normalizer.q_on_subset(i, subset, scheme)


def aggregate(
    rule: AggregationRule,
    subset,
    deltas: dict[int, np.ndarray],
    scheme: SamplingScheme,
) -> np.ndarray:
    """Combine the sampled clients' updates; reduction in ascending client id.

    The fixed reduction order pins floating-point summation, so parallel local
    execution cannot perturb results.
    """
    subset = tuple(sorted(subset))
    if not subset:
        raise ValueError("cannot aggregate an empty cohort")
    missing = [i for i in subset if i not in deltas]
    if missing:
        raise ValueError(f"missing update for sampled clients {missing}")
    out = None
    for i in subset:
        term = rule.coefficient(i, subset, scheme) * np.asarray(deltas[i], dtype=np.float64)
        out = term if out is None else out + term
    return out


@dataclass(frozen=True)
class EffectiveObjective:
    """Weights of the objective a configuration actually optimizes."""

    w_hat: np.ndarray
    W: float
    q: np.ndarray
    c: np.ndarray
    steps: np.ndarray


def effective_weights(
    w_tilde,
    c,
    sizes,
    epochs,
    scheme: SamplingScheme,
    normalizer: AggregationNormalizer,
    steps=None,
) -> EffectiveObjective:
    """Effective weights w_hat of the reweighted objective (exact q by enumeration).

    ``steps`` overrides the nominal per-client step count epochs_i * |D_i|, so
    truncated rounds can be diagnosed with their actual work.
    """
    w_tilde = np.asarray(w_tilde, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), w_tilde.shape).copy()
    epochs = np.broadcast_to(np.asarray(epochs, dtype=np.float64), w_tilde.shape).copy()
    tau = sizes * epochs if steps is None else np.asarray(steps, dtype=np.float64)
    q = normalizer.q_vector(scheme)
    raw = w_tilde * tau / (q * c)
    W = float(raw.sum())
    return EffectiveObjective(w_hat=raw / W, W=W, q=q, c=c, steps=tau)


def predicted_limit(problem: Problem, w_hat) -> np.ndarray:
    """Stationary point of the reweighted objective for a duplicated quadratic."""
    if not isinstance(problem, DuplicatedQuadratic):
        raise UnsupportedProblemError("predicted_limit requires a duplicated quadratic")
    w_hat = np.asarray(w_hat, dtype=np.float64)
    return w_hat @ problem.unique_anchors


def consistency_restoring_weights(weights, c, steps) -> np.ndarray:
    """Aggregation weights that restore w_hat = w for the given actual step counts.

    w~_i = w_i (c_i / tau_i) tau_eff with tau_eff = sum_j w_j tau_j / c_j; the
    tau_eff factor keeps the effective round step comparable to the untruncated
    run.  Requires every client to have taken at least one step.
    """
    weights = np.asarray(weights, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), weights.shape)
    steps = np.asarray(steps, dtype=np.float64)
    if np.any(steps <= 0):
        raise ValueError("cannot restore consistency for clients with zero steps")
    tau_eff = float(np.sum(weights * steps / c))
    return weights * c / steps * tau_eff


def gen_variance_constants(
    effective: EffectiveObjective,
    w_tilde,
    scheme: SamplingScheme,
    normalizer: AggregationNormalizer,
    constants: HeterogeneityConstants,
) -> tuple[float, float, float]:
    """(M1, M2, beta) for the general analysis of a (c, w~, q) configuration.

    M1 = max_i h_i s_i w_hat_i,
    M2 = (sum_i tau_i) max_i w~_i / (W q_i c_i),
    beta = 1 + M2 + (1 + P) B + M1 B^2.
    """
    w_tilde = np.asarray(w_tilde, dtype=np.float64)
    cert = normalizer.certificate(scheme)
    m1 = float(np.max(cert.h * cert.s * effective.w_hat))
    m2 = float(effective.steps.sum() * np.max(w_tilde / (effective.W * effective.q * effective.c)))
    beta = 1.0 + m2 + (1.0 + constants.P) * constants.B + m1 * constants.B**2
    return m1, m2, beta
