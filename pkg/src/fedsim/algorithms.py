"""Round-level orchestration: the general shuffling method and its named variants.

One round: draw a client subset, run each sampled client's local epochs,
combine the updates under the configured aggregation rule, move the global
model.  A configuration is the tuple (step normalizers c, aggregation
weights w~, normalizer rule q) plus step sizes; the named presets are

    fedshuffle    c_i = E_i |D_i|,  w~ = w,                       q unbiased
    fedavg_rr     c_i = 1,          w~ = w,                       q sum-one
    fedavg_min/mean   fedavg_rr with a fixed per-round step count
    fednova_rr    c_i = 1,          w~_i = w_i tau_eff/(E_i|D_i|), q unbiased
    fedshuffle_mvr    fedshuffle + momentum-corrected local steps, eta_g = 1

All randomness flows through streams derived from the master seed, so runs
are reproducible byte-for-byte, including under parallel client execution.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregation import AggregationRule, aggregate
from .local import LocalResult, LocalWorkSpec, MomentumState, make_permutations, run_local
from .problems import HeterogeneityConstants, Problem, QuadraticProblem, true_minimizer
from .rng import PURPOSE_MOMENTUM_INIT, PURPOSE_OUTPUT, PURPOSE_SAMPLING, stream_for
from .sampling import SamplingScheme

__all__ = [
    "DivergenceError",
    "StepSchedule",
    "MomentumConfig",
    "GenConfig",
    "RoundRecord",
    "RunLog",
    "run",
    "run_fixed_steps",
    "mvr_momentum_update",
    "mvr_init",
    "practical_global_momentum",
    "theorem1_max_step",
    "theorem2_hyperparams",
    "select_output",
    "DIVERGENCE_NORM",
]

DIVERGENCE_NORM = 1e12


class DivergenceError(RuntimeError):
    """Raised when the global iterate norm exceeds the divergence guard."""

    def __init__(self, round_index: int, norm: float):
        super().__init__(f"iterate diverged at round {round_index}: ||x|| = {norm:.3e}")
        self.round_index = round_index
        self.norm = norm


@dataclass(frozen=True)
class StepSchedule:
    """Local step size per round: constant, or inverse-time decay eta0/(1 + r/tau)."""

    eta0: float
    decay_tau: float | None = None

    def at(self, round_index: int) -> float:
        if self.decay_tau is None:
            return self.eta0
        return self.eta0 / (1.0 + round_index / self.decay_tau)

    @classmethod
    def of(cls, value) -> "StepSchedule":
        if isinstance(value, StepSchedule):
            return value
        return cls(float(value))


@dataclass(frozen=True)
class MomentumConfig:
    """Server momentum: none, a heavy-ball buffer, or variance-reduced correction.

    kind="global" keeps a heavy-ball buffer over the per-round practical
    gradient estimates (built from client deltas only).  kind="mvr" runs the
    corrected local direction and refreshes the buffer from exact client
    gradients at the round anchors; with practical=True the refresh instead
    uses the delta surrogates and drops the correction term.
    """

    kind: str = "none"
    coeff: float = 0.9
    a: float = 0.1
    practical: bool = False
    init_rounds: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "global", "mvr"):
            raise ValueError(f"unknown momentum kind {self.kind!r}")
        if self.kind == "mvr" and not 0.0 <= self.a <= 1.0:
            raise ValueError("mvr momentum parameter a must lie in [0, 1]")


def _per_client(value, n: int, dtype) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=dtype), (n,)).copy()
    return arr


@dataclass(frozen=True)
class GenConfig:
    """Full parametrization of one simulated run."""

    name: str
    rounds: int
    scheme: SamplingScheme
    rule: AggregationRule
    c: np.ndarray
    epochs: np.ndarray
    eta_l: StepSchedule
    eta_g: float = 1.0
    momentum: MomentumConfig = MomentumConfig()
    truncation: np.ndarray | None = None
    fixed_steps: str | None = None  # None | "min" | "mean"
    master_seed: int = 0
    x0: np.ndarray | None = None

    def __post_init__(self):
        n = self.scheme.n
        object.__setattr__(self, "c", _per_client(self.c, n, np.float64))
        object.__setattr__(self, "epochs", _per_client(self.epochs, n, np.int64))
        trunc = 0 if self.truncation is None else self.truncation
        object.__setattr__(self, "truncation", _per_client(trunc, n, np.int64))
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.fixed_steps not in (None, "min", "mean"):
            raise ValueError(f"unknown fixed-step rule {self.fixed_steps!r}")
        object.__setattr__(self, "eta_l", StepSchedule.of(self.eta_l))

    @property
    def w_tilde(self) -> np.ndarray:
        return self.rule.w_tilde

    # -- named presets; each asserts its defining parameter tuple --

    @classmethod
    def fedshuffle(cls, problem, scheme, *, rounds, eta_l, eta_g=1.0, epochs=1,
                   seed=0, momentum=MomentumConfig(), truncation=None, sum_one=False,
                   name=None):
        """Per-client step scaling c_i = E_i |D_i|; unbiased aggregation of w.

        sum_one=True swaps in the biased within-round weight normalization
        (the "w/ SO" variant) while keeping the local work identical.
        """
        n = problem.n_clients
        epochs_arr = _per_client(epochs, n, np.int64)
        c = epochs_arr * problem.sizes
        if sum_one:
            rule = AggregationRule.sum_one(problem.weights, scheme.expected_cohort, n)
        else:
            rule = AggregationRule.unbiased(problem.weights)
        return cls(name=name or ("fedshuffle_so" if sum_one else "fedshuffle"),
                   rounds=rounds, scheme=scheme, rule=rule, c=c, epochs=epochs_arr,
                   eta_l=eta_l, eta_g=eta_g, momentum=momentum, truncation=truncation,
                   master_seed=seed)

    @classmethod
    def fedavg_rr(cls, problem, scheme, *, rounds, eta_l, eta_g=1.0, epochs=1,
                  seed=0, momentum=MomentumConfig(), truncation=None, name="fedavg_rr"):
        """Unscaled local steps (c_i = 1) with the practical sum-one aggregation."""
        n = problem.n_clients
        epochs_arr = _per_client(epochs, n, np.int64)
        rule = AggregationRule.sum_one(problem.weights, scheme.expected_cohort, n)
        return cls(name=name, rounds=rounds, scheme=scheme, rule=rule,
                   c=np.ones(n), epochs=epochs_arr, eta_l=eta_l, eta_g=eta_g,
                   momentum=momentum, truncation=truncation, master_seed=seed)

    @classmethod
    def fedavg_fixed(cls, problem, scheme, k_rule, *, rounds, eta_l, eta_g=1.0,
                     epochs=1, seed=0, momentum=MomentumConfig(), name=None):
        """fedavg_rr with every sampled client running the same step count.

        k_rule "min": the smallest nominal step count in the round;
        k_rule "mean": the rounded (ties up) average nominal step count.
        """
        cfg = cls.fedavg_rr(problem, scheme, rounds=rounds, eta_l=eta_l, eta_g=eta_g,
                            epochs=epochs, seed=seed, momentum=momentum,
                            name=name or f"fedavg_{k_rule}")
        return replace(cfg, fixed_steps=k_rule)

    @classmethod
    def fednova_rr(cls, problem, scheme, *, rounds, eta_l, eta_g=1.0, epochs=1,
                   seed=0, momentum=MomentumConfig(), truncation=None, name="fednova_rr"):
        """Unscaled local steps rebalanced in aggregation: w~_i = w_i tau_eff/(E_i |D_i|).

        With tau_eff = sum_j w_j E_j |D_j| and unbiased normalization, the
        effective weights come out as w (this substitution is unit-tested).
        """
        n = problem.n_clients
        epochs_arr = _per_client(epochs, n, np.int64)
        work = epochs_arr * problem.sizes
        tau_eff = float(problem.weights @ work)
        w_tilde = problem.weights * tau_eff / work
        rule = AggregationRule.unbiased(w_tilde)
        assert abs(float(np.sum(w_tilde * work / tau_eff)) - 1.0) < 1e-12
        return cls(name=name, rounds=rounds, scheme=scheme, rule=rule,
                   c=np.ones(n), epochs=epochs_arr, eta_l=eta_l, eta_g=eta_g,
                   momentum=momentum, truncation=truncation, master_seed=seed)

    @classmethod
    def fedshuffle_mvr(cls, problem, scheme, *, rounds, eta_l, a, epochs=1,
                       seed=0, init_rounds=0, practical=False, name="fedshuffle_mvr"):
        """fedshuffle preset plus momentum-corrected local steps; eta_g = 1."""
        momentum = MomentumConfig(kind="mvr", a=a, practical=practical,
                                  init_rounds=init_rounds)
        cfg = cls.fedshuffle(problem, scheme, rounds=rounds, eta_l=eta_l, eta_g=1.0,
                             epochs=epochs, seed=seed, momentum=momentum, name=name)
        assert cfg.eta_g == 1.0 and cfg.rule.kind == "unbiased"
        return cfg


@dataclass(frozen=True)
class RoundRecord:
    """Metrics of the iterate at the start of the round, plus that round's work."""

    round_index: int
    f_gap: float
    dist_sq: float
    grad_norm_sq: float
    sampled: tuple[int, ...]
    steps: dict[int, int]

    @property
    def steps_total(self) -> int:
        return sum(self.steps.values())


@dataclass
class RunLog:
    name: str
    records: list[RoundRecord]
    final_x: np.ndarray
    iterates: list[np.ndarray] = field(default_factory=list)
    outside_theory: bool = False

    def first_round_within(self, dist: float) -> int | None:
        """Earliest round whose iterate is within `dist` of the reference point."""
        for rec in self.records:
            if not math.isnan(rec.dist_sq) and rec.dist_sq <= dist * dist:
                return rec.round_index
        return None

    @property
    def final_f_gap(self) -> float:
        return self.records[-1].f_gap if self.records else math.nan


# -- momentum pieces --


def mvr_momentum_update(
    state: MomentumState,
    subset,
    problem: Problem,
    x_now: np.ndarray,
    x_prev: np.ndarray,
    scheme: SamplingScheme,
) -> MomentumState:
    """Refresh the server momentum from exact client gradients at both anchors:

    m = a sum_{i in S} (w_i/p_i) g_i(x) + (1-a) [m_prev + sum (w_i/p_i)(g_i(x) - g_i(x_prev))].
    """
    if state is None:
        raise ValueError("momentum state not initialized before update")
    a = state.a
    grad_now = np.zeros(problem.dim)
    for i in sorted(subset):
        grad_now += problem.weights[i] / scheme.p[i] * problem.client_gradient(i, x_now)
    if a == 1.0:
        return MomentumState(m=grad_now, a=a)
    grad_prev = np.zeros(problem.dim)
    for i in sorted(subset):
        grad_prev += problem.weights[i] / scheme.p[i] * problem.client_gradient(i, x_prev)
    m = a * grad_now + (1.0 - a) * (state.m + (grad_now - grad_prev))
    return MomentumState(m=m, a=a)


def mvr_init(problem: Problem, x0: np.ndarray, scheme: SamplingScheme,
             init_rounds: int, seed: int) -> np.ndarray:
    """Initial momentum by averaging sampled client gradients at x0.

    Requires one-client sampling with probabilities matching the objective
    weights, so the average is unbiased for the full gradient.
    """
    if scheme.kind != "one_client":
        raise ValueError("momentum initialization assumes one-client sampling")
    if init_rounds < 1:
        raise ValueError("init_rounds must be >= 1")
    stream = stream_for(seed, PURPOSE_MOMENTUM_INIT)
    m = np.zeros(problem.dim)
    for _ in range(init_rounds):
        (i,) = scheme.draw(stream)
        m += problem.client_gradient(i, x0)
    return m / init_rounds


def practical_global_momentum(delta_i: np.ndarray, epochs_i: int, size_i: int,
                              eta_li: float) -> np.ndarray:
    """Client-gradient surrogate -Delta_i / (E_i |D_i| eta_{l,i}).

    Delta_i is the local model change, so the descent direction estimate is its
    negative scaled by the work actually paid for; exact after a single step,
    O(eta_l) error otherwise.
    """
    if eta_li <= 0:
        raise ValueError("practical momentum needs a positive local step size")
    return -np.asarray(delta_i, dtype=np.float64) / (epochs_i * size_i * eta_li)


# -- step-size prescriptions --


def theorem1_max_step(constants: HeterogeneityConstants, eta_g: float, E: float,
                      M: float = 0.0) -> float:
    """Largest admissible local step 1 / (4 beta L E eta_g) for the plain method."""
    return 1.0 / (4.0 * constants.beta(M) * constants.L * E * eta_g)


def theorem2_hyperparams(constants: HeterogeneityConstants, F: float, R: int,
                         E: int) -> tuple[float, float]:
    """Prescribed (eta_l, a) for the momentum-corrected one-client method:

    eta_l = (1/(40 E)) min{ 1/delta, (F / (R delta^2 (G^2 + sigma^2)))^(1/3) },
    a     = max(1152 E^2 delta^2 eta_l^2, 1/R).
    """
    delta = constants.delta
    if delta <= 0:
        raise ValueError("the momentum prescription requires delta > 0")
    if R < 1 or E < 1:
        raise ValueError("need R >= 1 and E >= 1")
    noise = constants.G**2 + constants.sigma_sq
    eta_l = (1.0 / (40.0 * E)) * min(1.0 / delta, (F / (R * delta**2 * noise)) ** (1.0 / 3.0))
    a = max(1152.0 * E**2 * delta**2 * eta_l**2, 1.0 / R)
    if a > 1.0:
        warnings.warn(f"momentum parameter clipped from {a:.4g} to 1")
        a = 1.0
    return eta_l, a


def select_output(iterates, mu: float, eta_tilde: float, seed: int = 0) -> np.ndarray:
    """Pick one stored iterate with weights (1 - mu eta~/2)^(1-r); uniform if mu = 0."""
    if len(iterates) == 0:
        raise ValueError("no iterates to select from")
    n = len(iterates)
    base = 1.0 - mu * eta_tilde / 2.0
    stream = stream_for(seed, PURPOSE_OUTPUT)
    if base <= 0.0:
        return np.asarray(iterates[-1])
    # Weights grow geometrically in r; scale so the largest is 1 to avoid overflow.
    weights = base ** np.arange(n - 1, -1, -1, dtype=np.float64)
    weights /= weights.sum()
    u = stream.random()
    acc = 0.0
    for r in range(n):
        acc += weights[r]
        if u < acc:
            return np.asarray(iterates[r])
    return np.asarray(iterates[-1])


# -- the round loop --


def _round_step_counts(config: GenConfig, problem: Problem, subset) -> dict[int, int]:
    """Per-client step counts for the round (nominal, truncated, or fixed-K)."""
    nominal = {i: int(config.epochs[i]) * int(problem.sizes[i]) for i in subset}
    if config.fixed_steps is None:
        return {i: nominal[i] - int(config.truncation[i]) for i in subset}
    if config.fixed_steps == "min":
        k = min(nominal.values())
    else:
        mean = sum(nominal.values()) / len(nominal)
        k = int(math.floor(mean + 0.5))  # ties round up
    if k < 1:
        raise ValueError("fixed step count must be >= 1")
    return {i: k for i in subset}


def run(config: GenConfig, problem: Problem, parallel: bool = False,
        store_iterates: bool = True) -> RunLog:
    """Execute the configured run; deterministic in (config, master seed).

    Every round: draw the cohort, refresh momentum if configured, run local
    work per sampled client, aggregate in ascending client order, move the
    global model by the aggregated update.  Aborts with DivergenceError when
    ||x|| exceeds the guard.
    """
    n = problem.n_clients
    if config.scheme.n != n:
        raise ValueError("sampling scheme and problem disagree on client count")
    x = np.zeros(problem.dim) if config.x0 is None else np.asarray(config.x0, dtype=np.float64).copy()

    x_star = None
    f_star = problem.optimal_value()
    if isinstance(problem, QuadraticProblem):
        x_star = true_minimizer(problem)

    mom = config.momentum
    mvr_state: MomentumState | None = None
    heavy_ball: np.ndarray | None = None
    if mom.kind == "mvr" and mom.init_rounds > 0:
        m0 = mvr_init(problem, x, config.scheme, mom.init_rounds, config.master_seed)
        mvr_state = MomentumState(m=m0, a=mom.a)

    outside_theory = mom.kind == "mvr" and config.scheme.kind != "one_client"

    records: list[RoundRecord] = []
    iterates: list[np.ndarray] = []
    x_prev: np.ndarray | None = None

    for r in range(config.rounds):
        eta_l = config.eta_l.at(r)
        subset = config.scheme.draw(stream_for(config.master_seed, PURPOSE_SAMPLING, r))
        steps = _round_step_counts(config, problem, subset)

        if mom.kind == "mvr" and not mom.practical:
            if mvr_state is None:
                # No accumulation phase: bootstrap with the pure sampled gradient.
                boot = MomentumState(m=np.zeros(problem.dim), a=1.0)
                boot = mvr_momentum_update(boot, subset, problem, x, x, config.scheme)
                mvr_state = MomentumState(m=boot.m, a=mom.a)
            elif x_prev is not None:
                mvr_state = mvr_momentum_update(mvr_state, subset, problem, x, x_prev, config.scheme)
        if mom.kind == "mvr" and mom.practical and mvr_state is None:
            mvr_state = MomentumState(m=np.zeros(problem.dim), a=mom.a)

        def client_work(i: int) -> tuple[int, LocalResult]:
            size = int(problem.sizes[i])
            target = steps[i]
            epochs_needed = max(1, math.ceil(target / size))
            plan = make_permutations(config.master_seed, r, i, epochs_needed, size)
            spec = LocalWorkSpec(
                epochs=epochs_needed,
                c=float(config.c[i]),
                eta_l=eta_l,
                mode="mvr" if mom.kind == "mvr" else "plain",
                truncation=epochs_needed * size - target,
            )
            if mom.kind == "mvr":
                return i, run_local(problem, i, x, spec, plan, momentum=mvr_state, anchor=x)
            return i, run_local(problem, i, x, spec, plan)

        ordered = sorted(subset)
        if parallel and len(ordered) > 1:
            with ThreadPoolExecutor(max_workers=len(ordered)) as pool:
                results = dict(pool.map(client_work, ordered))
        else:
            results = dict(client_work(i) for i in ordered)

        deltas = {i: res.delta for i, res in results.items()}
        delta = aggregate(config.rule, subset, deltas, config.scheme)

        # Metrics of the pre-update iterate x^r.
        records.append(_record(r, problem, x, f_star, x_star, subset, steps))
        if store_iterates:
            iterates.append(x.copy())

        if mom.kind == "global":
            estimate = _aggregated_practical_estimate(config, problem, subset, deltas, steps, eta_l)
            # Dampened heavy ball: the buffer tracks the estimate scale, so the
            # plain method's admissible step sizes remain stable.
            if heavy_ball is None:
                heavy_ball = estimate
            else:
                heavy_ball = mom.coeff * heavy_ball + (1.0 - mom.coeff) * estimate
            x_next = x - config.eta_g * eta_l * heavy_ball
        else:
            x_next = x + config.eta_g * delta

        if mom.kind == "mvr" and mom.practical:
            estimate = _aggregated_practical_estimate(config, problem, subset, deltas, steps, eta_l)
            mvr_state = MomentumState(m=mom.a * estimate + (1.0 - mom.a) * mvr_state.m, a=mom.a)

        x_prev = x
        x = x_next
        norm = float(np.linalg.norm(x))
        if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise DivergenceError(r, norm)

    return RunLog(name=config.name, records=records, final_x=x, iterates=iterates,
                  outside_theory=outside_theory)


def _aggregated_practical_estimate(config, problem, subset, deltas, steps, eta_l) -> np.ndarray:
    """Full-gradient estimate sum_{i in S} (w_i/p_i) est_i from delta surrogates.

    Uses the unbiased objective-weight scaling regardless of the run's
    aggregation rule (reusing biased coefficients would estimate a reweighted
    gradient), and divides by the steps each client actually took.
    """
    out = np.zeros(problem.dim)
    for i in sorted(subset):
        est = practical_global_momentum(deltas[i], 1, steps[i], eta_l / float(config.c[i]))
        out += problem.weights[i] / config.scheme.p[i] * est
    return out


def _record(r, problem, x, f_star, x_star, subset, steps) -> RoundRecord:
    grad = problem.full_gradient(x)
    f_gap = problem.full_value(x) - f_star if f_star is not None else math.nan
    dist_sq = float(np.sum((x - x_star) ** 2)) if x_star is not None else math.nan
    return RoundRecord(
        round_index=r,
        f_gap=float(f_gap),
        dist_sq=dist_sq,
        grad_norm_sq=float(grad @ grad),
        sampled=tuple(sorted(subset)),
        steps=dict(steps),
    )


def run_fixed_steps(config: GenConfig, problem: Problem, k_rule: str,
                    parallel: bool = False) -> RunLog:
    """Run with every sampled client forced to the same per-round step count."""
    if k_rule not in ("min", "mean"):
        raise ValueError(f"k_rule must be 'min' or 'mean', got {k_rule!r}")
    return run(replace(config, fixed_steps=k_rule), problem, parallel=parallel)
