"""Exact active-set QP solver against closed-form projection oracles."""

import numpy as np
import pytest

from uecbf import AffineConstraint, QpProblem, oracle_project, solve
from uecbf.exceptions import ConfigurationError


def _unit_problem(dim, ref, rows, box=None):
    return QpProblem(dim=dim, hessian_diag=np.ones(dim),
                     linear_ref=np.asarray(ref, dtype=float),
                     constraints=rows, box=box)


class TestUnconstrained:
    def test_returns_reference_point(self):
        sol = solve(_unit_problem(2, [3.0, -1.5], []))
        assert sol.status == "optimal"
        np.testing.assert_array_equal(sol.u_star, [3.0, -1.5])
        assert sol.active_set == ()

    def test_inactive_rows_do_not_move_solution(self):
        rows = [AffineConstraint([1.0, 0.0], -100.0), AffineConstraint([0.0, 1.0], -100.0)]
        sol = solve(_unit_problem(2, [3.0, -1.5], rows))
        np.testing.assert_array_equal(sol.u_star, [3.0, -1.5])


class TestOracleProject:
    def test_hand_example(self):
        z = oracle_project(np.zeros(2), AffineConstraint([1.0, 0.0], 2.0))
        np.testing.assert_array_equal(z, [2.0, 0.0])

    def test_satisfied_point_untouched(self):
        kd = np.array([5.0, 1.0])
        z = oracle_project(kd, AffineConstraint([1.0, 0.0], 2.0))
        np.testing.assert_array_equal(z, kd)

    def test_zero_row_rejected(self):
        with pytest.raises(ConfigurationError):
            oracle_project(np.zeros(2), AffineConstraint([0.0, 0.0], 1.0))

    def test_projection_lands_on_boundary(self, rng):
        for _ in range(20):
            a = rng.normal(size=3)
            c = AffineConstraint(a, 1.0)
            z = oracle_project(rng.normal(size=3) - 5.0 * a, c)
            assert float(a @ z) == pytest.approx(1.0, abs=1e-12)


class TestSingleConstraintAgreement:
    def test_random_problems_match_oracle(self, rng):
        for _ in range(200):
            dim = int(rng.integers(1, 5))
            a = rng.normal(size=dim)
            if np.linalg.norm(a) < 1e-3:
                continue
            c = AffineConstraint(a, float(rng.normal()))
            kd = rng.normal(size=dim) * 3.0
            sol = solve(_unit_problem(dim, kd, [c]))
            assert sol.status == "optimal"
            assert sol.kkt_residual <= 1e-8
            np.testing.assert_allclose(sol.u_star, oracle_project(kd, c), atol=1e-9)

    def test_scale_invariance(self, rng):
        # multiplying a row by a positive factor must not move the optimum
        for _ in range(50):
            a = rng.normal(size=3)
            b = float(rng.normal())
            kd = rng.normal(size=3)
            s = float(rng.uniform(0.1, 1e4))
            z1 = solve(_unit_problem(3, kd, [AffineConstraint(a, b)])).u_star
            z2 = solve(_unit_problem(3, kd, [AffineConstraint(s * a, s * b)])).u_star
            np.testing.assert_allclose(z1, z2, atol=1e-9 * max(1.0, np.linalg.norm(z1)))


class TestMultiConstraint:
    def test_corner_solution(self):
        rows = [AffineConstraint([1.0, 0.0], 1.0), AffineConstraint([0.0, 1.0], 2.0)]
        sol = solve(_unit_problem(2, [0.0, 0.0], rows))
        np.testing.assert_allclose(sol.u_star, [1.0, 2.0], atol=1e-12)
        assert set(sol.active_set) == {0, 1}

    def test_weighted_objective(self):
        # min (z0-0)^2 + 100 (z1-0)^2 s.t. z0 + z1 >= 1: the heavy coordinate
        # barely moves. Analytic optimum: z = (w1, w0) / (w0 + w1).
        p = QpProblem(dim=2, hessian_diag=np.array([1.0, 100.0]),
                      linear_ref=np.zeros(2),
                      constraints=[AffineConstraint([1.0, 1.0], 1.0)])
        sol = solve(p)
        np.testing.assert_allclose(sol.u_star, [100.0 / 101.0, 1.0 / 101.0], atol=1e-12)

    def test_perturbation_optimality(self, rng):
        # the returned point beats every feasible perturbation around it
        rows = [AffineConstraint(rng.normal(size=3), float(rng.normal()) - 1.0)
                for _ in range(4)]
        p = _unit_problem(3, rng.normal(size=3) * 2.0, rows)
        sol = solve(p)
        assert sol.status == "optimal"
        base = p.objective(sol.u_star)
        for _ in range(50):
            cand = sol.u_star + rng.normal(size=3) * 0.05
            if all(row.satisfied(cand, tol=0.0) for row in rows):
                assert p.objective(cand) >= base - 1e-9

    def test_redundant_duplicate_rows(self):
        rows = [AffineConstraint([1.0, 0.0], 2.0), AffineConstraint([1.0, 0.0], 2.0)]
        sol = solve(_unit_problem(2, [0.0, 0.0], rows))
        np.testing.assert_allclose(sol.u_star, [2.0, 0.0], atol=1e-12)


class TestBoxRows:
    def test_box_clamps_reference(self):
        p = _unit_problem(2, [5.0, -5.0], [],
                          box=(np.array([-1.0, -1.0]), np.array([1.0, 1.0])))
        sol = solve(p)
        np.testing.assert_allclose(sol.u_star, [1.0, -1.0], atol=1e-12)

    def test_infinite_bounds_ignored(self):
        p = _unit_problem(1, [7.0], [], box=(np.array([-np.inf]), np.array([np.inf])))
        sol = solve(p)
        assert sol.u_star[0] == 7.0

    def test_box_and_halfspace_interact(self):
        p = _unit_problem(2, [0.0, 0.0], [AffineConstraint([1.0, 1.0], 3.0)],
                          box=(np.array([-np.inf, -np.inf]), np.array([1.0, np.inf])))
        sol = solve(p)
        np.testing.assert_allclose(sol.u_star, [1.0, 2.0], atol=1e-12)


class TestDegenerateRows:
    def test_vacuous_row_dropped(self):
        sol = solve(_unit_problem(2, [1.0, 1.0], [AffineConstraint([0.0, 0.0], -1.0)]))
        np.testing.assert_array_equal(sol.u_star, [1.0, 1.0])

    def test_zero_row_positive_offset_infeasible(self):
        sol = solve(_unit_problem(2, [0.0, 0.0], [AffineConstraint([0.0, 0.0], 1.0)]))
        assert sol.status == "infeasible"
        assert sol.u_star is None

    def test_contradictory_halfspaces_infeasible(self):
        rows = [AffineConstraint([1.0], 1.0), AffineConstraint([-1.0], 0.0)]
        sol = solve(_unit_problem(1, [0.0], rows))
        assert sol.status == "infeasible"


class TestWarmStart:
    def test_warm_set_returns_same_answer(self, rng):
        rows = [AffineConstraint([1.0, 0.0], 1.0), AffineConstraint([0.0, 1.0], -5.0)]
        p = _unit_problem(2, [0.0, 0.0], rows)
        cold = solve(p)
        warm = solve(p, warm_active=cold.active_set)
        np.testing.assert_array_equal(cold.u_star, warm.u_star)
        assert cold.active_set == warm.active_set

    def test_stale_warm_set_is_harmless(self):
        p = _unit_problem(2, [0.0, 0.0], [AffineConstraint([1.0, 0.0], 1.0)])
        sol = solve(p, warm_active=(0, 7))   # index 7 never existed
        np.testing.assert_allclose(sol.u_star, [1.0, 0.0], atol=1e-12)


class TestValidation:
    def test_nonpositive_hessian_rejected(self):
        with pytest.raises(ConfigurationError):
            QpProblem(dim=1, hessian_diag=np.array([0.0]),
                      linear_ref=np.zeros(1), constraints=[])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            QpProblem(dim=2, hessian_diag=np.ones(1),
                      linear_ref=np.zeros(2), constraints=[])
