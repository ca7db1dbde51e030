import itertools
import math

import numpy as np
import pytest

from fedsim.local import (
    LocalWorkSpec,
    MomentumState,
    make_permutations,
    run_local,
    run_local_mvr,
)
from fedsim.problems import DuplicatedQuadratic, QuadraticProblem, duplicated_quadratic, quad_obj


class TestPermutations:
    def test_size_one_is_identity(self):
        plan = make_permutations(0, 0, 0, epochs=3, size=1)
        assert plan.permutations == ((0,), (0,), (0,))

    def test_deterministic_in_seed_tuple(self):
        a = make_permutations(99, 4, 2, epochs=2, size=7)
        b = make_permutations(99, 4, 2, epochs=2, size=7)
        assert a.permutations == b.permutations

    def test_components_separate_streams(self):
        base = make_permutations(1, 0, 0, 1, 6).permutations
        assert make_permutations(2, 0, 0, 1, 6).permutations != base
        assert make_permutations(1, 1, 0, 1, 6).permutations != base
        assert make_permutations(1, 0, 1, 1, 6).permutations != base

    def test_epoch_coverage(self):
        plan = make_permutations(5, 1, 3, epochs=4, size=9)
        for perm in plan.permutations:
            assert sorted(perm) == list(range(9))

    def test_uniform_over_permutations(self):
        counts = {perm: 0 for perm in itertools.permutations(range(4))}
        trials = 100_000
        for r in range(trials):
            counts[make_permutations(123, r, 0, 1, 4).permutations[0]] += 1
        expected = trials / 24
        sigma = math.sqrt(trials * (1 / 24) * (23 / 24))
        for perm, c in counts.items():
            assert abs(c - expected) <= 5 * sigma, (perm, c)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            make_permutations(0, 0, 0, epochs=1, size=0)
        with pytest.raises(ValueError):
            make_permutations(0, 0, 0, epochs=0, size=2)


def single_sample_problem(anchor):
    return QuadraticProblem([np.asarray(anchor, dtype=float)[None, :]])


class TestRunLocal:
    def test_single_step_is_one_gradient(self):
        p = single_sample_problem([1.0, -2.0])
        x = np.array([0.5, 0.5])
        plan = make_permutations(0, 0, 0, 1, 1)
        res = run_local(p, 0, x, LocalWorkSpec(epochs=1, c=1.0, eta_l=0.1), plan)
        assert np.allclose(res.delta, -0.1 * p.gradient(0, 0, x), atol=1e-16)
        assert res.steps_taken == 1

    def test_duplicated_client_contraction_closed_form(self):
        m = 5
        e = np.array([1.0, 2.0, 3.0])
        dq = DuplicatedQuadratic(e[None, :], (m,))
        x = np.array([-1.0, 0.0, 4.0])
        eta = 0.3
        plan = make_permutations(7, 0, 0, 1, m)
        res = run_local(dq, 0, x, LocalWorkSpec(epochs=1, c=float(m), eta_l=eta), plan)
        expected = e + (1 - 2 * eta / m) ** m * (x - e)
        assert np.allclose(res.y, expected, atol=1e-12)

    def test_zero_step_size(self):
        p = quad_obj()
        plan = make_permutations(0, 0, 2, 1, 3)
        res = run_local(p, 2, np.ones(6), LocalWorkSpec(epochs=1, c=3.0, eta_l=0.0), plan)
        assert np.array_equal(res.delta, np.zeros(6))

    @pytest.mark.parametrize("epochs,truncation", [(1, 0), (2, 1), (3, 5)])
    def test_step_count_law(self, epochs, truncation):
        p = quad_obj()
        plan = make_permutations(1, 0, 2, epochs, 3)
        spec = LocalWorkSpec(epochs=epochs, c=3.0, eta_l=0.05, truncation=truncation)
        res = run_local(p, 2, np.zeros(6), spec, plan)
        assert res.steps_taken == epochs * 3 - truncation

    def test_scaling_equivalence_bitwise(self):
        p = quad_obj()
        plan = make_permutations(3, 0, 1, 2, 2)
        x = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
        a = run_local(p, 1, x, LocalWorkSpec(epochs=2, c=4.0, eta_l=0.12), plan)
        b = run_local(p, 1, x, LocalWorkSpec(epochs=2, c=1.0, eta_l=0.12 / 4.0), plan)
        assert np.array_equal(a.y, b.y)

    def test_duplicated_client_equals_plain_gradient_descent_bitwise(self):
        # All samples identical, so reshuffled steps are plain descent on f_i.
        dq = duplicated_quadratic((1, 2, 3))
        x = np.array([0.7, -0.3, 0.1])
        eta, c, epochs = 0.11, 3.0, 2
        plan = make_permutations(4, 0, 2, epochs, 3)
        res = run_local(dq, 2, x, LocalWorkSpec(epochs=epochs, c=c, eta_l=eta), plan)
        y = x.copy()
        for _ in range(epochs * 3):
            y = y - (eta / c) * dq.gradient(2, 0, y)
        assert np.array_equal(res.y, y)

    def test_duplicated_result_independent_of_permutation(self):
        dq = duplicated_quadratic((1, 2, 3))
        x = np.array([0.2, -0.4, 0.9])
        spec = LocalWorkSpec(epochs=2, c=6.0, eta_l=0.2)
        results = [
            run_local(dq, 2, x, spec, make_permutations(seed, 0, 2, 2, 3)).y
            for seed in range(5)
        ]
        for y in results[1:]:
            assert np.array_equal(y, results[0])

    def test_truncation_must_leave_work(self):
        p = quad_obj()
        plan = make_permutations(0, 0, 0, 1, 1)
        with pytest.raises(ValueError):
            run_local(p, 0, np.zeros(6), LocalWorkSpec(epochs=1, c=1.0, eta_l=0.1, truncation=1), plan)

    def test_plan_must_cover_epochs(self):
        p = quad_obj()
        plan = make_permutations(0, 0, 0, 1, 1)
        with pytest.raises(ValueError):
            run_local(p, 0, np.zeros(6), LocalWorkSpec(epochs=2, c=1.0, eta_l=0.1), plan)


class TestRunLocalMvr:
    def test_requires_momentum_state(self):
        p = quad_obj()
        plan = make_permutations(0, 0, 0, 1, 1)
        spec = LocalWorkSpec(epochs=1, c=1.0, eta_l=0.1, mode="mvr")
        with pytest.raises(ValueError):
            run_local(p, 0, np.zeros(6), spec, plan)

    def test_a_one_reduces_to_plain_bitwise(self):
        p = quad_obj()
        x = np.array([0.3, 0.1, -0.2, 0.0, 0.7, 0.4])
        plan = make_permutations(11, 0, 2, 2, 3)
        spec_plain = LocalWorkSpec(epochs=2, c=3.0, eta_l=0.07)
        spec_mvr = LocalWorkSpec(epochs=2, c=3.0, eta_l=0.07, mode="mvr")
        momentum = MomentumState(m=np.full(6, 123.0), a=1.0)
        plain = run_local(p, 2, x, spec_plain, plan)
        mvr = run_local_mvr(p, 2, x, spec_mvr, plan, momentum, anchor=np.zeros(6))
        assert np.array_equal(plain.y, mvr.y)

    def test_a_zero_first_direction_is_momentum(self):
        # Truncate to a single step starting at the anchor: the correction
        # vanishes exactly and the step moves along m alone.
        p = quad_obj()
        x = np.array([0.5, 0.0, 0.0, 0.0, 0.0, -0.5])
        m = np.array([1.0, -2.0, 3.0, 0.0, 1.0, 4.0])
        plan = make_permutations(2, 0, 2, 1, 3)
        spec = LocalWorkSpec(epochs=1, c=3.0, eta_l=0.09, mode="mvr", truncation=2)
        res = run_local(p, 2, x, spec, plan, MomentumState(m=m, a=0.0), anchor=x)
        assert np.array_equal(res.y, x - (0.09 / 3.0) * m)

    def test_quadratic_direction_matches_symbolic_expansion(self):
        # For squared-distance samples the corrected direction is
        # 2a(y - e) + (1-a) m + 2(1-a)(y - anchor); replay the loop with that
        # closed form and compare trajectories.
        p = quad_obj()
        i = 1
        a = 0.35
        eta, c = 0.08, 2.0
        x = np.array([0.4, -0.1, 0.2, 0.9, -0.3, 0.0])
        m = np.array([0.3, 0.3, -0.2, 0.1, 0.0, 0.5])
        plan = make_permutations(6, 0, i, 2, 2)
        spec = LocalWorkSpec(epochs=2, c=c, eta_l=eta, mode="mvr")
        res = run_local(p, i, x, spec, plan, MomentumState(m=m, a=a), anchor=x)

        y = x.copy()
        for perm in plan.permutations:
            for j in perm:
                e = p.anchors[i][j]
                direction = 2 * a * (y - e) + (1 - a) * m + 2 * (1 - a) * (y - x)
                y = y - (eta / c) * direction
        assert np.allclose(res.y, y, atol=1e-12)


class TestSpecValidation:
    def test_bad_spec_values(self):
        with pytest.raises(ValueError):
            LocalWorkSpec(epochs=0, c=1.0, eta_l=0.1)
        with pytest.raises(ValueError):
            LocalWorkSpec(epochs=1, c=0.0, eta_l=0.1)
        with pytest.raises(ValueError):
            LocalWorkSpec(epochs=1, c=1.0, eta_l=-0.1)
        with pytest.raises(ValueError):
            LocalWorkSpec(epochs=1, c=1.0, eta_l=0.1, mode="nope")
        with pytest.raises(ValueError):
            MomentumState(m=np.zeros(2), a=1.5)
