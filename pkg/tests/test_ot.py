"""Transport solver tests: hand values, exhaustive oracles, invariants."""

import itertools

import numpy as np
import pytest

from otvp import ot


class TestCostBase:
    def test_identical_rows_zero_diagonal(self):
        z = np.random.default_rng(0).standard_normal((5, 3))
        c = ot.cost_base(z, z)
        np.testing.assert_allclose(np.diag(c.values), 0.0, atol=1e-12)

    def test_hand_value(self):
        c = ot.cost_base(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))
        assert c.values[0, 0] == pytest.approx(5.0, abs=1e-12)

    def test_symmetry_transpose(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 6)), rng.standard_normal((7, 6))
        assert np.array_equal(ot.cost_base(a, b).values, ot.cost_base(b, a).values.T)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ot.cost_base(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_scale_equivariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((6, 4))
        for s in (0.5, 2.0, 17.0):
            np.testing.assert_allclose(ot.cost_base(s * a, s * b).values,
                                       s * ot.cost_base(a, b).values, rtol=1e-12)


class TestCostLabeled:
    def test_matching_labels_equal_base(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
        y = np.array([0, 1, 2, 3])
        c = ot.cost_labeled(a, y, b, y, lam=1e4)
        np.testing.assert_allclose(np.diag(c.values), np.diag(ot.cost_base(a, b).values))

    def test_penalty_hand_value(self):
        c = ot.cost_labeled(np.array([[0.0]]), np.array([0]),
                            np.array([[2.0]]), np.array([1]), lam=1e4)
        assert c.values[0, 0] == pytest.approx(10002.0, abs=1e-9)

    def test_lambda_zero_bitwise_base(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((6, 3)), rng.standard_normal((5, 3))
        ya, yb = rng.integers(0, 3, 6), rng.integers(0, 3, 5)
        lab = ot.cost_labeled(a, ya, b, yb, lam=0.0)
        assert np.array_equal(lab.values, ot.cost_base(a, b).values)
        assert lab.labeled and lab.lambda_used == 0.0

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            ot.cost_labeled(np.zeros((3, 2)), np.zeros(2), np.zeros((3, 2)), np.zeros(3), 1.0)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            ot.cost_labeled(np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros(1), -1.0)


class TestSinkhorn:
    def test_identical_measures_near_zero_value(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((6, 4))
        c = ot.cost_base(z, z)
        u = np.full(6, 1 / 6)
        plan = ot.sinkhorn(u, u, c, ot.SinkhornConfig(epsilon_rel=0.001, max_iters=20000))
        off = c.values[~np.eye(6, dtype=bool)]
        assert plan.value < 1e-3 * off.mean()

    def test_one_by_one_forced(self):
        c = ot.CostMatrix(np.array([[3.7]]))
        for eps in (0.01, 0.5):
            plan = ot.sinkhorn(np.array([1.0]), np.array([1.0]), c,
                               ot.SinkhornConfig(epsilon_rel=eps))
            assert plan.value == pytest.approx(3.7, abs=1e-9)
            assert plan.pi[0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_two_point_line_hand_instance(self):
        # source {0, 4}, target {1, 3}: optimal pairing costs (1+1)/2 = 1
        zs = np.array([[0.0], [4.0]])
        zt = np.array([[1.0], [3.0]])
        c = ot.cost_base(zs, zt)
        exact, _ = ot.exact_ot_uniform(c)
        assert exact == pytest.approx(1.0, abs=1e-12)
        u = np.full(2, 0.5)
        plan = ot.sinkhorn(u, u, c, ot.SinkhornConfig(epsilon_rel=0.01, max_iters=50000))
        assert plan.converged
        assert abs(plan.value - 1.0) < 0.05

    def test_marginal_feasibility_random(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            m, n = rng.integers(2, 9, 2)
            c = ot.cost_base(rng.standard_normal((m, 3)), rng.standard_normal((n, 3)))
            a = np.full(m, 1 / m)
            b = np.full(n, 1 / n)
            cfg = ot.SinkhornConfig(epsilon_rel=0.05, max_iters=20000)
            plan = ot.sinkhorn(a, b, c, cfg)
            assert plan.converged
            assert np.abs(plan.pi.sum(1) - a).max() < cfg.marginal_tol
            assert np.abs(plan.pi.sum(0) - b).max() < cfg.marginal_tol
            assert np.all(plan.pi >= 0)

    def test_oracle_agreement_small(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(2, 17))
            c = ot.cost_base(rng.standard_normal((n, d)), rng.standard_normal((n, d)))
            exact, _ = ot.exact_ot_uniform(c)
            u = np.full(n, 1 / n)
            plan = ot.sinkhorn(u, u, c, ot.SinkhornConfig(epsilon_rel=0.01, max_iters=200000))
            assert abs(plan.value - exact) <= 0.05 * exact + 1e-6

    def test_non_convergence_recoverable(self):
        rng = np.random.default_rng(8)
        c = ot.cost_base(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)))
        u = np.full(5, 0.2)
        plan = ot.sinkhorn(u, u, c, ot.SinkhornConfig(epsilon_rel=0.001, max_iters=2))
        assert not plan.converged
        assert plan.iterations == 2
        assert plan.marginal_violation >= 1e-6
        assert plan.pi.shape == (5, 5)

    def test_zero_cost_matrix(self):
        u = np.full(3, 1 / 3)
        plan = ot.sinkhorn(u, u, ot.CostMatrix(np.zeros((3, 3))))
        assert plan.value == 0.0 and plan.converged
        np.testing.assert_allclose(plan.pi, np.outer(u, u))

    def test_input_validation(self):
        c = ot.CostMatrix(np.ones((2, 2)))
        with pytest.raises(ValueError, match="simplex"):
            ot.sinkhorn(np.array([0.7, 0.7]), np.array([0.5, 0.5]), c)
        with pytest.raises(ValueError, match="finite"):
            ot.sinkhorn(np.array([0.5, 0.5]), np.array([0.5, 0.5]),
                        ot.CostMatrix(np.array([[1.0, np.inf], [1.0, 1.0]])))
        with pytest.raises(ValueError, match="lengths"):
            ot.sinkhorn(np.array([1.0]), np.array([0.5, 0.5]), c)

    def test_monotone_in_lambda(self):
        rng = np.random.default_rng(9)
        zs, zt = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
        ys, yt = rng.integers(0, 3, 8), rng.integers(0, 3, 8)
        vals = []
        for lam in (0.0, 0.5, 1.0, 5.0, 100.0):
            c = ot.cost_labeled(zs, ys, zt, yt, lam)
            vals.append(ot.exact_ot_uniform(c)[0])
        assert all(v2 >= v1 - 1e-12 for v1, v2 in zip(vals, vals[1:]))


class TestExactOracle:
    def test_zero_cost(self):
        v, perm = ot.exact_ot_uniform(np.zeros((4, 4)))
        assert v == 0.0
        assert sorted(perm) == [0, 1, 2, 3]

    def test_recovers_unique_permutation(self):
        rng = np.random.default_rng(10)
        n = 5
        sigma = rng.permutation(n)
        c = np.ones((n, n))
        c[np.arange(n), sigma] = 0.0
        v, perm = ot.exact_ot_uniform(c)
        assert v == 0.0
        assert np.array_equal(perm, sigma)

    def test_matches_brute_force_6x6(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            c = rng.random((6, 6))
            v, perm = ot.exact_ot_uniform(c)
            brute = min(np.mean(c[np.arange(6), list(p)])
                        for p in itertools.permutations(range(6)))
            assert v == pytest.approx(brute, abs=1e-12)
            assert np.mean(c[np.arange(6), perm]) == pytest.approx(brute, abs=1e-12)

    def test_rejects_rectangular_and_large(self):
        with pytest.raises(ValueError, match="equal-size"):
            ot.exact_ot_uniform(np.zeros((3, 4)))
        with pytest.raises(ValueError, match="64"):
            ot.exact_ot_uniform(np.zeros((65, 65)))


class TestLambdaSeparation:
    def test_mass_and_value_split_by_class(self):
        rng = np.random.default_rng(12)
        per_class, k, d = 4, 3, 5
        n = per_class * k
        zs = rng.standard_normal((n, d))
        zt = rng.standard_normal((n, d))
        ys = np.repeat(np.arange(k), per_class)
        yt = np.repeat(np.arange(k), per_class)
        euclid = ot.cost_base(zs, zt).values
        lam = n * euclid.max() * 100
        c = ot.cost_labeled(zs, ys, zt, yt, lam)

        u = np.full(n, 1 / n)
        plan = ot.sinkhorn(u, u, c, ot.SinkhornConfig(epsilon_rel=0.05, max_iters=50000))
        mismatch = ys[:, None] != yt[None, :]
        assert plan.pi[mismatch].sum() < 1e-6

        total, _ = ot.exact_ot_uniform(c)
        per_class_sum = 0.0
        for cls in range(k):
            sub = euclid[np.ix_(ys == cls, yt == cls)]
            v, _ = ot.exact_ot_uniform(sub)
            per_class_sum += (per_class / n) * v
        assert abs(total - per_class_sum) < 1e-6


class TestEnvelopeGradient:
    def test_zero_at_minimum(self):
        z = np.random.default_rng(13).standard_normal((4, 3))
        plan = ot.TransportPlan(np.eye(4) / 4, 0.0, 0, 0.0, True)
        g = ot.ot_grad_targets(plan, z, z.copy())
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_single_pair_hand_value(self):
        plan = ot.TransportPlan(np.array([[1.0]]), 3.0, 0, 0.0, True)
        g = ot.ot_grad_targets(plan, np.array([[0.0]]), np.array([[3.0]]))
        assert g[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_directional_finite_difference_frozen_plan(self):
        rng = np.random.default_rng(14)
        zs = rng.standard_normal((6, 4))
        zt = rng.standard_normal((5, 4)) + 0.5
        a, b = np.full(6, 1 / 6), np.full(5, 1 / 5)
        plan = ot.sinkhorn(a, b, ot.cost_base(zs, zt),
                           ot.SinkhornConfig(epsilon_rel=0.05, max_iters=50000))
        g = ot.ot_grad_targets(plan, zs, zt)
        h = 1e-4
        v0 = ot.plan_value_frozen(plan.pi, zs, zt)
        v1 = ot.plan_value_frozen(plan.pi, zs, zt - h * g)
        drop = v0 - v1
        want = h * (g**2).sum()
        assert abs(drop - want) <= 0.05 * want

    def test_shape_mismatch(self):
        plan = ot.TransportPlan(np.ones((2, 2)) / 4, 0.0, 0, 0.0, True)
        with pytest.raises(ValueError):
            ot.ot_grad_targets(plan, np.zeros((3, 2)), np.zeros((2, 2)))


class TestEmpiricalMeasure:
    def test_default_uniform(self):
        m = ot.EmpiricalMeasure(np.zeros((4, 2)))
        np.testing.assert_allclose(m.weights, 0.25)

    def test_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            ot.EmpiricalMeasure(np.zeros((2, 2)), weights=np.array([0.6, 0.6]))
        with pytest.raises(ValueError, match="nonnegative"):
            ot.EmpiricalMeasure(np.zeros((2, 2)), weights=np.array([1.5, -0.5]))
        with pytest.raises(ValueError, match="labels"):
            ot.EmpiricalMeasure(np.zeros((2, 2)), labels=np.array([1]))
