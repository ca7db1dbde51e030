"""Client-participation distributions and exact enumeration oracles.

A sampling scheme is a distribution over nonempty client subsets.  Each
proper scheme (all inclusion probabilities positive) carries

  * the probability vector  p_i   = Pr[i in S],
  * the probability matrix  P_ij  = Pr[{i,j} in S],
  * an s-vector certificate with  P - p p^T <= Diag(p * s)  (PSD order),

which controls the variance of the w_i/p_i unbiased aggregation estimator.
Aggregation normalizers q_i^S generalize p_i to subset-dependent scalings
(e.g. the sum-one rule that normalizes sampled weights within the round).

Everything distributional here is backed by exact subset enumeration at desk
scale (n <= 12); the closed forms are what the enumeration oracles verify.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .rng import Stream

__all__ = [
    "SamplingScheme",
    "AggregationNormalizer",
    "UnbiasedNormalizer",
    "SumOneNormalizer",
    "CustomNormalizer",
    "NormalizerCertificate",
    "expected_contribution",
    "variance_bound_check",
    "general_variance_check",
    "swr_variance_check",
    "importance_scheme",
    "m_constant",
    "MAX_ENUM_CLIENTS",
]

MAX_ENUM_CLIENTS = 12


class SamplingScheme:
    """Distribution over client subsets; immutable after construction.

    Use the factory classmethods ``full``, ``uniform``, ``independent``,
    ``one_client`` and ``explicit``.  Draws take an explicit Stream so that
    concurrent simulations derive per-round streams.
    """

    def __init__(self, kind, n, p, *, b=None, pi=None, subsets=None, probs=None):
        self.kind = kind
        self.n = int(n)
        self.p = np.asarray(p, dtype=np.float64)
        if self.p.shape != (self.n,):
            raise ValueError("p must have one entry per client")
        if np.any(self.p <= 0.0):
            raise ValueError(f"improper sampling: every p_i must be positive, got {self.p}")
        if np.any(self.p > 1.0 + 1e-12):
            raise ValueError("inclusion probabilities cannot exceed 1")
        self.b = b
        self.pi = pi
        self._subsets = subsets
        self._probs = probs
        self._matrix = None
        self._s = None

    # -- construction --

    @classmethod
    def full(cls, n: int) -> "SamplingScheme":
        """Every client participates in every round."""
        return cls("full", n, np.ones(n))

    @classmethod
    def uniform(cls, n: int, b: int) -> "SamplingScheme":
        """b of n clients, uniformly without replacement."""
        if not 1 <= b <= n:
            raise ValueError(f"need 1 <= b <= n, got b={b}, n={n}")
        return cls("uniform_b", n, np.full(n, b / n), b=b)

    @classmethod
    def independent(cls, probs) -> "SamplingScheme":
        """Client i included independently with probability p_i; empty draws redrawn."""
        probs = np.asarray(probs, dtype=np.float64)
        return cls("independent", probs.shape[0], probs)

    @classmethod
    def one_client(cls, pi) -> "SamplingScheme":
        """Exactly one client per round, client i with probability pi_i."""
        pi = np.asarray(pi, dtype=np.float64)
        if abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError("one_client probabilities must sum to 1")
        return cls("one_client", pi.shape[0], pi, pi=pi)

    @classmethod
    def explicit(cls, n: int, subsets, probs) -> "SamplingScheme":
        """Enumerated distribution over given subsets."""
        subsets = [tuple(sorted(int(i) for i in s)) for s in subsets]
        probs = np.asarray(probs, dtype=np.float64)
        if len(subsets) != probs.shape[0]:
            raise ValueError("one probability per subset required")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("subset probabilities must be nonnegative and sum to 1")
        for s in subsets:
            if not s:
                raise ValueError("empty subsets are not allowed")
            if any(not 0 <= i < n for i in s):
                raise ValueError(f"subset {s} out of range for n={n}")
        p = np.zeros(n)
        for s, pr in zip(subsets, probs):
            for i in s:
                p[i] += pr
        return cls("explicit", n, p, subsets=subsets, probs=probs)

    # -- derived quantities --

    @property
    def expected_cohort(self) -> float:
        """b = E|S| = trace(P) = sum_i p_i."""
        return float(self.p.sum())

    def enumerate_subsets(self) -> list[tuple[tuple[int, ...], float]]:
        """All (subset, probability) pairs; exact, desk scale only."""
        if self._subsets is not None:
            return list(zip(self._subsets, self._probs))
        if self.n > MAX_ENUM_CLIENTS:
            raise ValueError(
                f"exact enumeration supports at most {MAX_ENUM_CLIENTS} clients, got n={self.n}"
            )
        if self.kind == "full":
            return [(tuple(range(self.n)), 1.0)]
        if self.kind == "uniform_b":
            count = math.comb(self.n, self.b)
            return [(s, 1.0 / count) for s in itertools.combinations(range(self.n), self.b)]
        if self.kind == "one_client":
            return [((i,), float(self.pi[i])) for i in range(self.n)]
        if self.kind == "independent":
            out = []
            for r in range(self.n + 1):
                for s in itertools.combinations(range(self.n), r):
                    inside = np.zeros(self.n, dtype=bool)
                    inside[list(s)] = True
                    pr = float(np.prod(np.where(inside, self.p, 1.0 - self.p)))
                    out.append((s, pr))
            return out
        raise ValueError(f"unknown scheme kind {self.kind!r}")

    def probability_matrix(self) -> np.ndarray:
        """P with P_ij = Pr[{i,j} subset of S]; closed form where available."""
        if self._matrix is not None:
            return self._matrix
        n = self.n
        if self.kind == "full":
            mat = np.ones((n, n))
        elif self.kind == "uniform_b":
            off = self.b * (self.b - 1) / (n * (n - 1)) if n > 1 else 1.0
            mat = np.full((n, n), off)
            np.fill_diagonal(mat, self.b / n)
        elif self.kind == "independent":
            mat = np.outer(self.p, self.p)
            np.fill_diagonal(mat, self.p)
        elif self.kind == "one_client":
            mat = np.diag(self.pi)
        else:
            mat = np.zeros((n, n))
            for s, pr in self.enumerate_subsets():
                for i in s:
                    for j in s:
                        mat[i, j] += pr
        self._matrix = mat
        return mat

    def s_vector(self) -> np.ndarray:
        """Diagonal certificate s with P - p p^T <= Diag(p * s).

        Closed forms: full -> 0, uniform b-of-n -> (n-b)/(n-1),
        independent -> 1 - p_i.  Other kinds fall back to the row-wise
        Gershgorin bound, which always certifies the inequality.
        """
        if self._s is not None:
            return self._s
        n = self.n
        if self.kind == "full":
            s = np.zeros(n)
        elif self.kind == "uniform_b":
            s = np.zeros(n) if self.b == n else np.full(n, (n - self.b) / (n - 1))
        elif self.kind == "independent":
            s = 1.0 - self.p
        else:
            centered = self.probability_matrix() - np.outer(self.p, self.p)
            s = np.abs(centered).sum(axis=1) / self.p
        self._s = s
        return s

    def psd_slack(self) -> float:
        """Largest eigenvalue of P - p p^T - Diag(p * s); <= 0 when s certifies."""
        gap = self.probability_matrix() - np.outer(self.p, self.p) - np.diag(self.p * self.s_vector())
        return float(np.linalg.eigvalsh(gap)[-1])

    # -- drawing --

    def draw(self, stream: Stream) -> tuple[int, ...]:
        """One subset, sorted; independent sampling redraws empty sets."""
        if self.kind == "full":
            return tuple(range(self.n))
        if self.kind == "uniform_b":
            pool = list(range(self.n))
            for i in range(self.b):
                j = i + stream.randbelow(self.n - i)
                pool[i], pool[j] = pool[j], pool[i]
            return tuple(sorted(pool[: self.b]))
        if self.kind == "independent":
            while True:
                chosen = tuple(i for i in range(self.n) if stream.random() < self.p[i])
                if chosen:
                    return chosen
        if self.kind == "one_client":
            return (_draw_categorical(self.pi, stream),)
        idx = _draw_categorical(self._probs, stream)
        return self._subsets[idx]

    def __repr__(self):
        return f"SamplingScheme(kind={self.kind!r}, n={self.n}, b={self.expected_cohort:.3g})"


def _draw_categorical(probs, stream: Stream) -> int:
    u = stream.random()
    acc = 0.0
    for i, pr in enumerate(probs):
        acc += pr
        if u < acc:
            return i
    return len(probs) - 1  # guard against float round-off in the CDF


# -- aggregation normalizers --


class AggregationNormalizer:
    """Subset-dependent scaling q_i^S used as Delta = sum_{i in S} (w~_i / q_i^S) Delta_i."""

    def q_on_subset(self, i: int, subset: tuple[int, ...], scheme: SamplingScheme) -> float:
        raise NotImplementedError

    def q_vector(self, scheme: SamplingScheme) -> np.ndarray:
        """q_i defined by 1/q_i = E[(1/q_i^S) 1_{i in S}], by exact enumeration."""
        inv_q = np.zeros(scheme.n)
        for subset, pr in scheme.enumerate_subsets():
            for i in subset:
                inv_q[i] += pr / self.q_on_subset(i, subset, scheme)
        if np.any(inv_q <= 0):
            raise ValueError("normalizer yields zero expected contribution for some client")
        return 1.0 / inv_q

    def certificate(self, scheme: SamplingScheme) -> "NormalizerCertificate":
        """H matrix, its diagonal h, and a Gershgorin s with H - 11^T <= Diag(h * s)."""
        q = self.q_vector(scheme)
        n = scheme.n
        H = np.zeros((n, n))
        for subset, pr in scheme.enumerate_subsets():
            for i in subset:
                qi = self.q_on_subset(i, subset, scheme)
                for j in subset:
                    qj = self.q_on_subset(j, subset, scheme)
                    H[i, j] += pr * q[i] * q[j] / (qi * qj)
        h = np.diag(H).copy()
        s = np.abs(H - 1.0).sum(axis=1) / h
        return NormalizerCertificate(q=q, H=H, h=h, s=s)


class NormalizerCertificate:
    """Exact q, H, h and an s-vector for a normalizer under a given scheme."""

    def __init__(self, q, H, h, s):
        self.q = q
        self.H = H
        self.h = h
        self.s = s

    def psd_slack(self) -> float:
        """Largest eigenvalue of H - 11^T - Diag(h * s); <= 0 when s certifies."""
        n = self.H.shape[0]
        gap = self.H - np.ones((n, n)) - np.diag(self.h * self.s)
        return float(np.linalg.eigvalsh(gap)[-1])


class UnbiasedNormalizer(AggregationNormalizer):
    """q_i^S = p_i: constant scaling, unbiased since E[(w_i/p_i) 1_{i in S}] = w_i."""

    def q_on_subset(self, i, subset, scheme):
        return float(scheme.p[i])

    def q_vector(self, scheme):
        return np.ones(scheme.n)

    def certificate(self, scheme):
        # Closed form: H_ij = P_ij/(p_i p_j), h_i = 1/p_i, and the scheme's own
        # s-vector certifies H - 11^T <= Diag(h * s).
        P = scheme.probability_matrix()
        p = scheme.p
        H = P / np.outer(p, p)
        return NormalizerCertificate(q=np.ones(scheme.n), H=H, h=1.0 / p, s=scheme.s_vector().copy())


class SumOneNormalizer(AggregationNormalizer):
    """q_i^S = scale * sum_{j in S} w_j: sampled weights normalized within the round.

    scale = 1 gives the bare sum-one contribution w_i / sum_{j in S} w_j; the
    practical heterogeneous-cohort aggregation additionally multiplies the
    round update by n/b, i.e. scale = b/n.  The induced effective weights are
    invariant to scale; only the effective step size changes.
    """

    def __init__(self, weights, scale: float = 1.0):
        self.weights = np.asarray(weights, dtype=np.float64)
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)

    def q_on_subset(self, i, subset, scheme):
        return self.scale * float(sum(self.weights[j] for j in subset))


class CustomNormalizer(AggregationNormalizer):
    """Arbitrary q_i^S supplied as a callable (i, subset) -> float."""

    def __init__(self, fn):
        self.fn = fn

    def q_on_subset(self, i, subset, scheme):
        return float(self.fn(i, subset))


# -- exact oracles --


def expected_contribution(scheme: SamplingScheme, normalizer: AggregationNormalizer, weights) -> np.ndarray:
    """E[(w_i / q_i^S) 1_{i in S}] per client, by exact subset enumeration.

    Under the unbiased rule this is exactly w; under the sum-one rule it is
    the biased contribution vector that the aggregation actually realizes.
    """
    weights = np.asarray(weights, dtype=np.float64)
    out = np.zeros(scheme.n)
    for subset, pr in scheme.enumerate_subsets():
        for i in subset:
            out[i] += pr * weights[i] / normalizer.q_on_subset(i, subset, scheme)
    return out


def variance_bound_check(zetas, weights, scheme: SamplingScheme) -> tuple[float, float]:
    """Exact variance of the w_i/p_i estimator vs its s-vector bound.

    Returns (lhs, rhs) with
      lhs = E || sum_{i in S} w_i zeta_i / p_i  -  sum_i w_i zeta_i ||^2
      rhs = sum_i w_i^2 (s_i / p_i) ||zeta_i||^2.
    The s-vector certificate guarantees lhs <= rhs.
    """
    zetas = np.asarray(zetas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if zetas.shape[0] != scheme.n or weights.shape[0] != scheme.n:
        raise ValueError("need one vector and one weight per client")
    mean = weights @ zetas
    lhs = 0.0
    for subset, pr in scheme.enumerate_subsets():
        est = np.zeros(zetas.shape[1])
        for i in subset:
            est += weights[i] / scheme.p[i] * zetas[i]
        diff = est - mean
        lhs += pr * float(diff @ diff)
    s = scheme.s_vector()
    rhs = float(np.sum(weights**2 * (s / scheme.p) * np.sum(zetas**2, axis=1)))
    return lhs, rhs


def general_variance_check(
    zetas, weights, scheme: SamplingScheme, normalizer: AggregationNormalizer
) -> tuple[float, float]:
    """Exact variance of the w_i/q_i^S estimator vs its H-certificate bound.

    The estimator's mean is sum_i (w_i/q_i) zeta_i (biased unless q_i = 1);
    returns (lhs, rhs) with lhs the exact mean-squared deviation from that
    mean and rhs = sum_i h_i s_i ||w_i zeta_i / q_i||^2.
    """
    zetas = np.asarray(zetas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    cert = normalizer.certificate(scheme)
    mean = (weights / cert.q) @ zetas
    lhs = 0.0
    for subset, pr in scheme.enumerate_subsets():
        est = np.zeros(zetas.shape[1])
        for i in subset:
            est += weights[i] / normalizer.q_on_subset(i, subset, scheme) * zetas[i]
        diff = est - mean
        lhs += pr * float(diff @ diff)
    scaled = (weights / cert.q)[:, None] * zetas
    rhs = float(np.sum(cert.h * cert.s * np.sum(scaled**2, axis=1)))
    return lhs, rhs


def swr_variance_check(zetas, k: int) -> tuple[float, float]:
    """Without-replacement sample-mean variance: exact enumeration vs closed form.

    empirical = E || mean of k draws - population mean ||^2 over all k-subsets,
    formula   = (n - k) / (k (n - 1)) * population variance.
    """
    zetas = np.asarray(zetas, dtype=np.float64)
    n = zetas.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    mean = zetas.mean(axis=0)
    centered = zetas - mean
    pop_var = float(np.sum(centered**2)) / n
    count = math.comb(n, k)
    empirical = 0.0
    for subset in itertools.combinations(range(n), k):
        diff = zetas[list(subset)].mean(axis=0) - mean
        empirical += float(diff @ diff) / count
    formula = 0.0 if n == 1 else (n - k) / (k * (n - 1)) * pop_var
    return empirical, formula


def importance_scheme(weights, expected_cohort: float) -> SamplingScheme:
    """Independent sampling with p_i = b * w_i, minimizing the variance constant M."""
    weights = np.asarray(weights, dtype=np.float64)
    p = expected_cohort * weights
    if np.any(p > 1.0 + 1e-12):
        raise ValueError(
            f"importance sampling requires b * w_i <= 1 for all clients; got max {p.max():.6g}"
        )
    return SamplingScheme.independent(np.minimum(p, 1.0))


def m_constant(scheme: SamplingScheme, weights) -> float:
    """M = max_i (s_i / p_i) w_i, the partial-participation variance constant."""
    weights = np.asarray(weights, dtype=np.float64)
    return float(np.max(scheme.s_vector() / scheme.p * weights))
