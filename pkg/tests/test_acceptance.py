"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v` for one pass/fail line per
criterion; each test also prints a PASS summary with the measured values.
"""

import math
import time

import numpy as np

from fedsim import (
    GenConfig,
    SamplingScheme,
    StepSchedule,
    aggregate,
    consistency_restoring_weights,
    duplicated_quadratic,
    effective_weights,
    estimate_constants,
    expected_contribution,
    general_variance_check,
    importance_quadratic,
    importance_scheme,
    inconsistent_fixed_point,
    m_constant,
    make_logistic,
    quad_obj,
    run,
    swr_variance_check,
    theorem1_max_step,
    theorem2_hyperparams,
    true_minimizer,
    variance_bound_check,
)
from fedsim.aggregation import AggregationRule
from fedsim.algorithms import mvr_momentum_update
from fedsim.harness import emit_csv
from fedsim.local import LocalWorkSpec, MomentumState, make_permutations, run_local
from fedsim.problems import HeterogeneityConstants
from fedsim.sampling import SumOneNormalizer, UnbiasedNormalizer

WEIGHTS_123 = np.array([1.0, 2.0, 3.0]) / 6.0


def report(criterion, detail):
    print(f"PASS {criterion}: {detail}")


def quad_constants(problem):
    return estimate_constants(problem, [np.zeros(problem.dim), np.ones(problem.dim)])


def test_c01_objective_inconsistency():
    dq = duplicated_quadratic((1, 2, 3))
    scheme = SamplingScheme.full(3)
    eta_g = 1e6
    eta_l = theorem1_max_step(quad_constants(dq), eta_g, 1)
    started = time.monotonic()
    log = run(GenConfig.fedavg_rr(dq, scheme, rounds=2000, eta_l=eta_l, eta_g=eta_g), dq)
    elapsed = time.monotonic() - started
    x_tilde = inconsistent_fixed_point(dq)
    x_star = true_minimizer(dq)
    gap_tilde = np.linalg.norm(log.final_x - x_tilde)
    gap_star = np.linalg.norm(log.final_x - x_star)
    assert gap_tilde <= 1e-6
    assert gap_star >= 0.9 * np.linalg.norm(x_tilde - x_star)
    assert elapsed < 1.0
    report("criterion-01 objective inconsistency",
           f"|x-x~|={gap_tilde:.2e}, |x-x*|={gap_star:.3f}, {elapsed:.2f}s")


def test_c02_consistency_fix():
    dq = duplicated_quadratic((1, 2, 3))
    scheme = SamplingScheme.full(3)
    consts = quad_constants(dq)
    eta_g = 1e6
    x_star = true_minimizer(dq)
    # Each method at its own admissible maximum: per-client scaling admits the
    # full bound, uniform rescaling must divide by the largest client's work.
    bound = 1.0 / (4 * consts.beta(0.0) * consts.L * eta_g)
    shuffle = run(GenConfig.fedshuffle(dq, scheme, rounds=2000, eta_l=bound, eta_g=eta_g), dq)
    c_max = float(np.max(dq.sizes))
    nova = run(GenConfig.fednova_rr(dq, scheme, rounds=2000, eta_l=bound / c_max, eta_g=eta_g), dq)
    gap_s = np.linalg.norm(shuffle.final_x - x_star)
    gap_n = np.linalg.norm(nova.final_x - x_star)
    assert gap_s <= 1e-6 and gap_n <= 1e-6
    r_s = shuffle.first_round_within(1e-6)
    r_n = nova.first_round_within(1e-6)
    assert r_s is not None and r_n is not None and r_s <= r_n
    report("criterion-02 consistency fix",
           f"|x-x*|: shuffle {gap_s:.2e} (round {r_s}), nova {gap_n:.2e} (round {r_n})")


def test_c03_sum_one_bias():
    scheme = SamplingScheme.uniform(3, 2)
    contrib = expected_contribution(scheme, SumOneNormalizer(WEIGHTS_123), WEIGHTS_123)
    expected = np.array([7 / 36, 16 / 45, 9 / 20])
    assert np.all(np.abs(contrib - expected) <= 1e-15)
    assert abs(contrib.sum() - 1.0) <= 1e-15
    report("criterion-03 sum-one bias", f"contributions {contrib} sum {contrib.sum()}")


def test_c04_unbiased_aggregation():
    rng = np.random.default_rng(404)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(2, 7))
        if trial % 2 == 0:
            scheme = SamplingScheme.uniform(n, int(rng.integers(1, n + 1)))
        else:
            scheme = SamplingScheme.independent(rng.uniform(0.2, 0.95, size=n))
        w = rng.uniform(0.05, 1.0, size=n)
        w /= w.sum()
        deltas = {i: rng.standard_normal(3) for i in range(n)}
        rule = AggregationRule.unbiased(w)
        mean = np.zeros(3)
        for subset, pr in scheme.enumerate_subsets():
            if not subset:  # the empty draw contributes nothing to the mean
                continue
            mean += pr * aggregate(rule, subset, deltas, scheme)
        target = sum(w[i] * deltas[i] for i in range(n))
        worst = max(worst, float(np.max(np.abs(mean - target))))
    assert worst <= 1e-12
    report("criterion-04 unbiased aggregation", f"max |mean - sum w_i d_i| = {worst:.2e}")


def test_c05_sum_one_limit():
    problem = quad_obj()
    scheme = SamplingScheme.uniform(3, 2)
    x_star = true_minimizer(problem)
    bias = np.array([7 / 36, 16 / 45, 9 / 20])
    x_biased = bias @ problem.client_means
    sched = StepSchedule(1 / 16, decay_tau=250)
    finals_so, finals_ub = [], []
    for seed in range(10):
        finals_so.append(run(GenConfig.fedshuffle(
            problem, scheme, rounds=5000, eta_l=sched, seed=seed, sum_one=True), problem).final_x)
        finals_ub.append(run(GenConfig.fedshuffle(
            problem, scheme, rounds=5000, eta_l=sched, seed=seed), problem).final_x)
    gap_so = np.linalg.norm(np.mean(finals_so, axis=0) - x_biased)
    gap_ub = np.linalg.norm(np.mean(finals_ub, axis=0) - x_star)
    assert gap_so <= 0.05
    assert gap_ub <= 0.05
    report("criterion-05 sum-one limit",
           f"sum-one to biased point {gap_so:.3f}, unbiased to x* {gap_ub:.3f}")


def test_c06_without_replacement_variance():
    rng = np.random.default_rng(606)
    worst = 0.0
    for n in range(2, 9):
        for _ in range(50):
            zetas = rng.standard_normal((n, int(rng.integers(1, 5))))
            for k in range(1, n + 1):
                emp, formula = swr_variance_check(zetas, k)
                worst = max(worst, abs(emp - formula))
    assert worst <= 1e-10
    report("criterion-06 without-replacement variance", f"max |emp - formula| = {worst:.2e}")


def test_c07_variance_bounds_and_certificates():
    rng = np.random.default_rng(707)
    schemes = [
        SamplingScheme.full(4),
        SamplingScheme.uniform(5, 2),
        SamplingScheme.independent(rng.uniform(0.25, 0.9, size=5)),
        SamplingScheme.one_client(np.full(4, 0.25)),
        SamplingScheme.explicit(4, [(0, 1), (1, 2, 3), (0, 3)], [0.3, 0.5, 0.2]),
    ]
    worst_gap, worst_slack = -math.inf, -math.inf
    for scheme in schemes:
        worst_slack = max(worst_slack, scheme.psd_slack())
        n = scheme.n
        w = rng.uniform(0.1, 1.0, size=n)
        w /= w.sum()
        for normalizer in (UnbiasedNormalizer(), SumOneNormalizer(w)):
            worst_slack = max(worst_slack, normalizer.certificate(scheme).psd_slack())
        for _ in range(100):
            zetas = rng.standard_normal((n, 3))
            lhs, rhs = variance_bound_check(zetas, w, scheme)
            worst_gap = max(worst_gap, lhs - rhs)
            for normalizer in (UnbiasedNormalizer(), SumOneNormalizer(w)):
                lhs, rhs = general_variance_check(zetas, w, scheme, normalizer)
                worst_gap = max(worst_gap, lhs - rhs)
    assert worst_gap <= 1e-10
    assert worst_slack <= 1e-10
    report("criterion-07 variance bounds",
           f"max lhs-rhs = {worst_gap:.2e}, max certificate slack = {worst_slack:.2e}")


def test_c08_effective_weights():
    rng = np.random.default_rng(808)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        sizes = rng.integers(1, 7, size=n)
        epochs = rng.integers(1, 6, size=n)
        w = rng.uniform(0.1, 1.0, size=n)
        w /= w.sum()
        scheme = (
            SamplingScheme.uniform(n, int(rng.integers(1, n + 1)))
            if rng.random() < 0.5
            else SamplingScheme.independent(rng.uniform(0.2, 0.95, size=n))
        )
        work = epochs * sizes
        shuffle = effective_weights(w, work.astype(float), sizes, epochs,
                                    scheme, UnbiasedNormalizer())
        worst = max(worst, float(np.max(np.abs(shuffle.w_hat - w))))
        tau_eff = float(w @ work)
        nova = effective_weights(w * tau_eff / work, 1.0, sizes, epochs,
                                 scheme, UnbiasedNormalizer())
        worst = max(worst, float(np.max(np.abs(nova.w_hat - w))))
    assert worst <= 1e-12

    sizes = np.array([1, 2, 3])
    fedavg = effective_weights(WEIGHTS_123, 3.0, sizes, 1, SamplingScheme.full(3),
                               SumOneNormalizer(WEIGHTS_123, scale=1.0))
    squares = sizes.astype(float) ** 2
    squares /= squares.sum()
    gap = float(np.max(np.abs(fedavg.w_hat - squares)))
    assert gap <= 1e-12
    report("criterion-08 effective weights",
           f"max consistency deviation {worst:.2e}, fed-avg squares deviation {gap:.2e}")


def test_c09_importance_sampling():
    importance = importance_scheme(WEIGHTS_123, 1.0)
    M_importance = m_constant(importance, WEIGHTS_123)
    M_uniform = m_constant(SamplingScheme.uniform(3, 1), WEIGHTS_123)
    assert abs(M_importance - 5.0 / 6.0) <= 1e-12
    assert M_importance <= M_uniform

    problem = importance_quadratic()
    uniform = SamplingScheme.uniform(3, 1)
    weighted = importance_scheme(problem.weights, 1.0)
    consts = quad_constants(problem)
    gaps = {"uniform": [], "importance": []}
    for seed in range(10):
        for label, scheme in (("uniform", uniform), ("importance", weighted)):
            eta = theorem1_max_step(consts, 1.0, 1, m_constant(scheme, problem.weights))
            cfg = GenConfig.fedshuffle(problem, scheme, rounds=2000,
                                       eta_l=StepSchedule(eta, decay_tau=500), seed=seed)
            gaps[label].append(run(cfg, problem).final_f_gap)
    mean_imp, mean_uni = np.mean(gaps["importance"]), np.mean(gaps["uniform"])
    assert mean_imp <= mean_uni
    report("criterion-09 importance sampling",
           f"M {M_importance:.4f} <= {M_uniform:.4f}; f_gap {mean_imp:.2e} <= {mean_uni:.2e}")


def test_c10_mvr_identities():
    problem = quad_obj()
    # local direction with a = 1 reduces bitwise to the plain step
    x = np.array([0.3, -0.2, 0.5, 0.1, 0.0, 0.7])
    plan = make_permutations(10, 0, 2, 2, 3)
    plain = run_local(problem, 2, x, LocalWorkSpec(epochs=2, c=3.0, eta_l=0.07), plan)
    corrected = run_local(problem, 2, x,
                          LocalWorkSpec(epochs=2, c=3.0, eta_l=0.07, mode="mvr"), plan,
                          momentum=MomentumState(m=np.full(6, 5.0), a=1.0), anchor=np.zeros(6))
    assert np.array_equal(plain.y, corrected.y)

    # momentum refresh with a = 1 is exactly the sampled gradient sum
    scheme = SamplingScheme.uniform(3, 2)
    state = MomentumState(m=np.full(6, -3.0), a=1.0)
    new = mvr_momentum_update(state, (0, 1), problem, x, np.zeros(6), scheme)
    direct = sum(problem.weights[i] / scheme.p[i] * problem.client_gradient(i, x) for i in (0, 1))
    assert np.array_equal(new.m, direct)

    # at the anchor with a = 0 the first step moves along m alone
    m = np.array([0.5, -1.0, 2.0, 0.0, 1.0, -0.5])
    spec = LocalWorkSpec(epochs=1, c=3.0, eta_l=0.09, mode="mvr", truncation=2)
    first = run_local(problem, 2, x, spec, plan, momentum=MomentumState(m=m, a=0.0), anchor=x)
    assert np.array_equal(first.y, x - (0.09 / 3.0) * m)

    consts = HeterogeneityConstants(L=2.0, mu=0.0, G=1.0, B=1.0, sigma_i=np.zeros(1),
                                    P_i=np.zeros(1), delta=1.0, sizes=np.array([1]))
    eta, a = theorem2_hyperparams(consts, F=1.0, R=1, E=1)
    assert eta == 0.025 and a == 1.0
    report("criterion-10 momentum identities", f"bitwise reductions hold; (eta, a) = ({eta}, {a})")


def test_c11_hybrid_truncation():
    dq = duplicated_quadratic((1, 2, 3))
    scheme = SamplingScheme.full(3)
    epochs = 2  # a truncation of one step must leave every client some work
    eta_g = 1e6
    eta_l = 1.0 / (4 * quad_constants(dq).beta(0.0) * 2.0 * eta_g)
    x_star = true_minimizer(dq)
    plain = run(GenConfig.fedshuffle(dq, scheme, rounds=2000, eta_l=eta_l, eta_g=eta_g,
                                     epochs=epochs, truncation=1), dq)
    plain_gap = np.linalg.norm(plain.final_x - x_star)
    assert plain_gap > 10 * 1e-4

    c = epochs * dq.sizes
    steps = epochs * dq.sizes - 1
    w_restored = consistency_restoring_weights(dq.weights, c, steps)
    restored_cfg = GenConfig(name="fedshufflegen", rounds=2000, scheme=scheme,
                             rule=AggregationRule.unbiased(w_restored), c=c, epochs=epochs,
                             eta_l=eta_l, eta_g=eta_g, truncation=np.ones(3, dtype=int))
    restored = run(restored_cfg, dq)
    restored_gap = np.linalg.norm(restored.final_x - x_star)
    assert restored_gap <= 1e-4
    report("criterion-11 hybrid truncation",
           f"plain limit off by {plain_gap:.3f}, restored within {restored_gap:.2e}")


def test_c12_gradient_oracle():
    rng = np.random.default_rng(1212)
    worst = 0.0
    for problem in (quad_obj(), make_logistic(seed=12)):
        for _ in range(100):
            i = int(rng.integers(problem.n_clients))
            j = int(rng.integers(problem.sizes[i]))
            x = rng.standard_normal(problem.dim)
            analytic = problem.gradient(i, j, x)
            numeric = np.zeros_like(x)
            for k in range(problem.dim):
                e = np.zeros_like(x)
                e[k] = 1e-6
                numeric[k] = (problem.value(i, j, x + e) - problem.value(i, j, x - e)) / 2e-6
            rel = np.linalg.norm(analytic - numeric) / max(1.0, np.linalg.norm(analytic))
            worst = max(worst, rel)
    assert worst <= 1e-5
    report("criterion-12 gradient oracle", f"max relative FD error = {worst:.2e}")


def test_c13_determinism(tmp_path):
    problem = quad_obj()
    scheme = SamplingScheme.uniform(3, 2)
    cfg = GenConfig.fedshuffle(problem, scheme, rounds=200, eta_l=0.05, seed=99)
    paths = []
    for label, parallel in (("first", False), ("second", False), ("parallel", True)):
        log = run(cfg, problem, parallel=parallel)
        path = tmp_path / f"{label}.csv"
        emit_csv(log, path)
        paths.append(path.read_bytes())
    assert paths[0] == paths[1] == paths[2]
    report("criterion-13 determinism", f"3 byte-identical CSVs of {len(paths[0])} bytes")
