"""Finite-sum objectives with per-sample gradient oracles.

A problem is a weighted sum over clients of client-average losses

    f(x) = sum_i w_i f_i(x),    f_i(x) = (1/|D_i|) sum_j f_ij(x),

with weights w_i >= 0 summing to one (default w_i = |D_i|/|D|).  Quadratic
instances carry per-sample anchor vectors and expose closed-form minimizers;
a small logistic-regression instance exercises the gradient contract on a
non-constant-Hessian loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Problem",
    "QuadraticProblem",
    "DuplicatedQuadratic",
    "LogisticProblem",
    "HeterogeneityConstants",
    "UnsupportedProblemError",
    "true_minimizer",
    "inconsistent_fixed_point",
    "estimate_constants",
    "quad_obj",
    "duplicated_quadratic",
    "importance_quadratic",
    "make_logistic",
]


class UnsupportedProblemError(TypeError):
    """An operation was requested on a problem type that does not support it."""


def default_weights(sizes: np.ndarray) -> np.ndarray:
    """Standard weights w_i = |D_i| / |D|."""
    sizes = np.asarray(sizes, dtype=np.int64)
    return sizes / sizes.sum()


class Problem:
    """Base finite-sum problem: n clients, sizes |D_i|, weights w_i, dimension d.

    Subclasses implement the per-sample oracles ``value``, ``gradient`` and
    ``sample_hessian``.  All indices are 0-based.
    """

    def __init__(self, sizes, weights, dim: int):
        self.sizes = np.asarray(sizes, dtype=np.int64)
        if self.sizes.ndim != 1 or np.any(self.sizes <= 0):
            raise ValueError("sizes must be a 1-D array of positive integers")
        self.n_clients = int(self.sizes.shape[0])
        self.dim = int(dim)
        if weights is None:
            weights = default_weights(self.sizes)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.shape != (self.n_clients,) or np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative, one per client")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()!r}")

    # -- per-sample oracles (subclass responsibility) --

    def value(self, i: int, j: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, i: int, j: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_hessian(self, i: int, j: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- compositions --

    def check_index(self, i: int, j: int | None = None) -> None:
        if not 0 <= i < self.n_clients:
            raise ValueError(f"client index {i} out of range [0, {self.n_clients})")
        if j is not None and not 0 <= j < self.sizes[i]:
            raise ValueError(f"sample index {j} out of range [0, {self.sizes[i]}) for client {i}")

    def client_value(self, i: int, x: np.ndarray) -> float:
        self.check_index(i)
        return sum(self.value(i, j, x) for j in range(self.sizes[i])) / self.sizes[i]

    def client_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        """Mean of per-sample gradients: grad f_i(x)."""
        self.check_index(i)
        g = np.zeros(self.dim)
        for j in range(self.sizes[i]):
            g += self.gradient(i, j, x)
        return g / self.sizes[i]

    def client_hessian(self, i: int, x: np.ndarray) -> np.ndarray:
        self.check_index(i)
        h = np.zeros((self.dim, self.dim))
        for j in range(self.sizes[i]):
            h += self.sample_hessian(i, j, x)
        return h / self.sizes[i]

    def full_value(self, x: np.ndarray) -> float:
        return float(sum(w * self.client_value(i, x) for i, w in enumerate(self.weights)))

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        g = np.zeros(self.dim)
        for i, w in enumerate(self.weights):
            g += w * self.client_gradient(i, x)
        return g

    def full_hessian(self, x: np.ndarray) -> np.ndarray:
        h = np.zeros((self.dim, self.dim))
        for i, w in enumerate(self.weights):
            h += w * self.client_hessian(i, x)
        return h

    def optimal_value(self) -> float | None:
        """f at the known minimizer, or None if no closed form exists."""
        return None


class QuadraticProblem(Problem):
    """Per-sample losses f_ij(x) = ||x - e_ij||^2 with anchor vectors e_ij.

    ``anchors[i]`` is the (|D_i|, d) array of client i's anchors.  The global
    minimizer is the w-weighted mean of per-client anchor means.
    """

    def __init__(self, anchors, weights=None):
        anchors = [np.asarray(a, dtype=np.float64) for a in anchors]
        if not anchors:
            raise ValueError("need at least one client")
        dim = anchors[0].shape[1]
        for a in anchors:
            if a.ndim != 2 or a.shape[1] != dim:
                raise ValueError("all anchor blocks must be (|D_i|, d) with a common d")
        super().__init__([a.shape[0] for a in anchors], weights, dim)
        self.anchors = anchors
        self.client_means = np.stack([a.mean(axis=0) for a in anchors])

    def value(self, i, j, x):
        self.check_index(i, j)
        diff = np.asarray(x, dtype=np.float64) - self.anchors[i][j]
        return float(diff @ diff)

    def gradient(self, i, j, x):
        self.check_index(i, j)
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.anchors[i][j])

    def sample_hessian(self, i, j, x):
        self.check_index(i, j)
        return 2.0 * np.eye(self.dim)

    def client_gradient(self, i, x):
        self.check_index(i)
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.client_means[i])

    def minimizer(self) -> np.ndarray:
        return self.weights @ self.client_means

    def optimal_value(self) -> float:
        return self.full_value(self.minimizer())


class DuplicatedQuadratic(QuadraticProblem):
    """Client i holds |D_i| identical copies of a single anchor e_i.

    Every per-sample gradient within a client is identical at any x, so local
    reshuffling steps coincide with deterministic gradient steps on f_i.
    """

    def __init__(self, unique_anchors, sizes, weights=None):
        unique_anchors = np.asarray(unique_anchors, dtype=np.float64)
        sizes = np.asarray(sizes, dtype=np.int64)
        if unique_anchors.shape[0] != sizes.shape[0]:
            raise ValueError("one anchor per client required")
        anchors = [np.tile(unique_anchors[i], (sizes[i], 1)) for i in range(len(sizes))]
        super().__init__(anchors, weights)
        self.unique_anchors = unique_anchors


class LogisticProblem(Problem):
    """Binary logistic regression, f_ij(x) = log(1 + exp(-y_ij <a_ij, x>))."""

    def __init__(self, features, labels, weights=None):
        features = [np.asarray(f, dtype=np.float64) for f in features]
        labels = [np.asarray(y, dtype=np.float64) for y in labels]
        if len(features) != len(labels):
            raise ValueError("features and labels must pair up per client")
        dim = features[0].shape[1]
        for f, y in zip(features, labels):
            if f.shape[0] != y.shape[0] or f.shape[1] != dim:
                raise ValueError("feature/label shape mismatch")
            if not np.all(np.abs(y) == 1.0):
                raise ValueError("labels must be +/-1")
        super().__init__([f.shape[0] for f in features], weights, dim)
        self.features = features
        self.labels = labels

    def value(self, i, j, x):
        self.check_index(i, j)
        margin = self.labels[i][j] * (self.features[i][j] @ np.asarray(x, dtype=np.float64))
        # log(1 + exp(-m)) computed stably for both signs of m
        return float(np.logaddexp(0.0, -margin))

    def gradient(self, i, j, x):
        self.check_index(i, j)
        a = self.features[i][j]
        y = self.labels[i][j]
        margin = y * (a @ np.asarray(x, dtype=np.float64))
        sigma = 1.0 / (1.0 + np.exp(margin))  # = s(-margin)
        return -y * sigma * a

    def sample_hessian(self, i, j, x):
        self.check_index(i, j)
        a = self.features[i][j]
        margin = self.labels[i][j] * (a @ np.asarray(x, dtype=np.float64))
        sigma = 1.0 / (1.0 + np.exp(margin))
        return sigma * (1.0 - sigma) * np.outer(a, a)


# -- closed-form reference points --


def true_minimizer(problem: Problem) -> np.ndarray:
    """Global minimizer of f; only quadratic instances have a closed form."""
    if not isinstance(problem, QuadraticProblem):
        raise UnsupportedProblemError("true_minimizer requires a quadratic problem")
    return problem.minimizer()


def inconsistent_fixed_point(problem: Problem) -> np.ndarray:
    """Limit of heterogeneous-step FedAvg on a duplicated quadratic.

    With w_i = |D_i|/|D| the unscaled-step fixed point reweights every client
    by its step count, giving x = (sum_i |D_i|^2 e_i) / (sum_i |D_i|^2).
    """
    if not isinstance(problem, DuplicatedQuadratic):
        raise UnsupportedProblemError("inconsistent_fixed_point requires a duplicated quadratic")
    expected = default_weights(problem.sizes)
    if not np.allclose(problem.weights, expected, rtol=0, atol=1e-12):
        raise ValueError("inconsistent fixed point assumes w_i = |D_i|/|D|")
    sq = problem.sizes.astype(np.float64) ** 2
    return (sq @ problem.unique_anchors) / sq.sum()


# -- heterogeneity constants --


@dataclass(frozen=True)
class HeterogeneityConstants:
    """Problem constants: smoothness, gradient/Hessian similarity, local variance.

    G and B bound client-gradient dissimilarity via
    sum_i w_i ||grad f_i(x)||^2 <= G^2 + B^2 ||grad f(x)||^2, and
    (sigma_i, P_i) bound per-client sample variance.  ``sizes`` is kept so the
    aggregate quantities below can be formed without the problem object.
    """

    L: float
    mu: float
    G: float
    B: float
    sigma_i: np.ndarray
    P_i: np.ndarray
    delta: float
    sizes: np.ndarray

    @property
    def P(self) -> float:
        """max_i P_i / sqrt(|D_i|)."""
        return float(np.sqrt(np.max(self.P_i**2 / self.sizes)))

    @property
    def sigma_sq(self) -> float:
        """(1/|D|) sum_i sigma_i^2."""
        return float(np.sum(self.sigma_i**2) / np.sum(self.sizes))

    def beta(self, M: float = 0.0) -> float:
        """beta = 1 + (1 + P) B + M B^2 for a sampling with constant M."""
        return 1.0 + (1.0 + self.P) * self.B + M * self.B**2


def estimate_constants(
    problem: Problem, probes, B: float = 1.0
) -> HeterogeneityConstants:
    """Empirically fit problem constants as maxima over probe points.

    Probes are evaluation points, not a proof: the result is the smallest set
    of constants consistent with the probe set.  B is fixed (default 1) and G
    fitted given B.  Exact for quadratics (constant Hessian 2I, delta = 0).
    """
    probes = [np.asarray(p, dtype=np.float64) for p in probes]
    if not probes:
        raise ValueError("estimate_constants needs at least one probe point")

    L = 0.0
    mu = np.inf
    G_sq = 0.0
    delta = 0.0
    sigma_sq = np.zeros(problem.n_clients)
    for x in probes:
        grads = [problem.client_gradient(i, x) for i in range(problem.n_clients)]
        full_grad = problem.weights @ np.stack(grads)
        dissim = sum(
            w * float(g @ g) for w, g in zip(problem.weights, grads)
        ) - B**2 * float(full_grad @ full_grad)
        G_sq = max(G_sq, dissim, 0.0)

        full_hess = problem.full_hessian(x)
        for i in range(problem.n_clients):
            hess_gap = problem.client_hessian(i, x) - full_hess
            delta = max(delta, float(np.linalg.norm(hess_gap, 2)))
            var = 0.0
            for j in range(problem.sizes[i]):
                eigs = np.linalg.eigvalsh(problem.sample_hessian(i, j, x))
                L = max(L, float(eigs[-1]))
                mu = min(mu, float(eigs[0]))
                resid = problem.gradient(i, j, x) - grads[i]
                var += float(resid @ resid)
            sigma_sq[i] = max(sigma_sq[i], var / problem.sizes[i])

    return HeterogeneityConstants(
        L=L,
        mu=float(mu),
        G=float(np.sqrt(G_sq)),
        B=float(B),
        sigma_i=np.sqrt(sigma_sq),
        P_i=np.zeros(problem.n_clients),
        delta=delta,
        sizes=problem.sizes.copy(),
    )


# -- canonical test instances --


def quad_obj() -> QuadraticProblem:
    """Six canonical-basis anchors in R^6 split over clients of sizes 1/2/3."""
    basis = np.eye(6)
    return QuadraticProblem([basis[0:1], basis[1:3], basis[3:6]])


def duplicated_quadratic(sizes=(1, 2, 3), dim: int | None = None) -> DuplicatedQuadratic:
    """Duplicated instance with one canonical-basis anchor per client."""
    sizes = np.asarray(sizes, dtype=np.int64)
    n = len(sizes)
    if dim is None:
        dim = n
    return DuplicatedQuadratic(np.eye(dim)[:n], sizes)


def importance_quadratic() -> QuadraticProblem:
    """d = 10 instance for the importance-sampling comparison: sizes (8, 1, 1)."""
    basis = np.eye(10)
    return QuadraticProblem([basis[0:8], basis[8:9], basis[9:10]])


def make_logistic(seed: int = 0, samples_per_client=(5, 7), dim: int = 4) -> LogisticProblem:
    """Two-client synthetic logistic problem with labels from a planted separator."""
    rng = np.random.default_rng(seed)
    separator = rng.standard_normal(dim)
    features, labels = [], []
    for m in samples_per_client:
        a = rng.standard_normal((m, dim))
        y = np.sign(a @ separator)
        y[y == 0] = 1.0
        features.append(a)
        labels.append(y)
    return LogisticProblem(features, labels)
