import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from builders import single_node
from oracles import active_set_qp, random_qp
from storinvest.model import InvestmentDecision
from storinvest.qpform import StandardQP, assemble_iso_qp
from storinvest.qpsolve import (
    SolverSettings,
    SolveStatus,
    StandardQPSolver,
    kkt_residuals,
    solve_box_qp,
    solve_qp,
)


def tiny(P, c, A_in=None, h=None, A_eq=None, b_eq=None):
    n = len(c)
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(A_in)
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(A_eq)
    return StandardQP(
        P=sp.csc_matrix(np.atleast_2d(P)), c=np.asarray(c, float),
        A_eq=sp.csr_matrix(A_eq), b_eq=np.asarray([] if b_eq is None else b_eq, float),
        A_in=sp.csr_matrix(A_in), h=np.asarray([] if h is None else h, float),
        var_map={}, eq_map={}, in_map={}, mode=None,
    )


class TestHandExamples:
    def test_interior_optimum(self):
        sol = solve_qp(tiny([[1.0]], [-1.0], A_in=[[-1.0]], h=[0.0]))
        assert sol.status is SolveStatus.SOLVED
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.y_in[0] == pytest.approx(0.0, abs=1e-8)

    def test_active_upper_bound(self):
        sol = solve_qp(tiny([[1.0]], [-1.0], A_in=[[1.0]], h=[0.5]))
        assert sol.x[0] == pytest.approx(0.5, abs=1e-8)
        assert sol.y_in[0] == pytest.approx(0.5, abs=1e-8)

    def test_single_node_market(self):
        s = single_node([("i1", 9.0, 100.0)])
        qp = assemble_iso_qp(s, "pc", InvestmentDecision.zero(s.catalog))
        sol = solve_qp(qp)
        assert sol.x[qp.col("q", 0, 0, 0)] == pytest.approx(100.0, rel=1e-8)
        _, r = qp.row("balance", 0, 0, 0)
        theta = abs(sol.y_eq[r])
        assert theta / s.weights[0] == pytest.approx(50.0, rel=1e-7)
        _, rc = qp.row("gen-cap", 0, 0, 0)
        assert sol.y_in[rc] / s.weights[0] == pytest.approx(41.0, rel=1e-7)

    def test_equality_constrained(self):
        # min x1^2 + x2^2 s.t. x1 + x2 = 2
        sol = solve_qp(tiny(2 * np.eye(2), [0.0, 0.0], A_eq=[[1.0, 1.0]], b_eq=[2.0]))
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-8)
        assert abs(sol.y_eq[0]) == pytest.approx(2.0, abs=1e-7)

    def test_linear_program(self):
        # min -x1 - x2 on the unit box
        A = np.vstack([np.eye(2), -np.eye(2)])
        sol = solve_qp(tiny(np.zeros((2, 2)), [-1.0, -1.0], A_in=A, h=[1, 1, 0, 0]))
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-7)
        np.testing.assert_allclose(sol.y_in, [1, 1, 0, 0], atol=1e-7)


class TestStatus:
    def test_infeasible(self):
        sol = solve_qp(tiny([[1.0]], [0.0], A_in=[[1.0], [-1.0]], h=[-1.0, -1.0]))
        assert sol.status is SolveStatus.INFEASIBLE

    def test_unbounded(self):
        sol = solve_qp(tiny([[0.0]], [-1.0], A_in=[[-1.0]], h=[0.0]))
        assert sol.status is SolveStatus.UNBOUNDED

    def test_max_iterations(self):
        rng = np.random.default_rng(1)
        qp = random_qp(rng, n=8, m_in=6, m_eq=1)
        sol = solve_qp(qp, SolverSettings(max_iter=1, polish=False))
        assert sol.status is SolveStatus.MAX_ITERATIONS

    def test_bad_settings(self):
        with pytest.raises(ValueError):
            SolverSettings(alpha=2.5)
        with pytest.raises(ValueError):
            SolverSettings(eps_abs=0.0)

    def test_bounds_validation(self):
        with pytest.raises(ValueError):
            solve_box_qp(sp.eye(1), [0.0], sp.eye(1), [1.0], [0.0])


class TestResiduals:
    def test_solved_within_tolerance(self):
        rng = np.random.default_rng(7)
        qp = random_qp(rng, n=6, m_in=5, m_eq=1)
        st_ = SolverSettings()
        sol = solve_qp(qp, st_)
        r = sol.residuals
        assert r.stationarity <= st_.eps_abs + st_.eps_rel * r.scale["stationarity"]
        assert r.eq_feasibility <= st_.eps_abs + st_.eps_rel * r.scale["primal"]
        assert r.ineq_feasibility <= st_.eps_abs + st_.eps_rel * r.scale["primal"]

    def test_perturbation_shows_in_stationarity(self):
        rng = np.random.default_rng(8)
        qp = random_qp(rng, n=5, m_in=3, m_eq=0)
        sol = solve_qp(qp)
        base = kkt_residuals(qp, sol).stationarity
        j = 2
        sol.x = sol.x.copy()
        sol.x[j] += 1.0
        after = kkt_residuals(qp, sol).stationarity
        col = qp.P.toarray()[:, j]
        assert after >= np.abs(col).max() - base - 1e-12


class TestOracle:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_matches_active_set_enumeration(self, seed):
        qp = random_qp(np.random.default_rng(seed))
        sol = solve_qp(qp)
        assert sol.status is SolveStatus.SOLVED
        ref = active_set_qp(qp.P.toarray(), qp.c, qp.A_eq.toarray(), qp.b_eq, qp.A_in.toarray(), qp.h)
        obj = 0.5 * sol.x @ qp.P @ sol.x + qp.c @ sol.x
        assert obj == pytest.approx(ref.objective, rel=1e-6, abs=1e-6)
        np.testing.assert_allclose(sol.y_in, ref.y_in, atol=1e-5)
        np.testing.assert_allclose(sol.y_eq, ref.y_eq, atol=1e-5)

    def test_oracle_on_known_problem(self):
        ref = active_set_qp([[1.0]], [-1.0], np.zeros((0, 1)), [], [[1.0]], [0.5])
        assert ref.x[0] == pytest.approx(0.5)
        assert ref.y_in[0] == pytest.approx(0.5)
        assert ref.active == (0,)


class TestReuse:
    def test_deterministic(self):
        qp = random_qp(np.random.default_rng(11), n=9, m_in=6, m_eq=2)
        a, b = solve_qp(qp), solve_qp(qp)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y_in, b.y_in)
        assert a.iterations == b.iterations

    def test_rhs_update_matches_fresh_solve(self):
        s = single_node([("i1", 9.0, 100.0), ("i2", 30.0, 80.0)], periods=3,
                        sizes=(0.0, 50.0), candidates=("n1",))
        solver = StandardQPSolver()
        zero = InvestmentDecision.zero(s.catalog)
        big = InvestmentDecision.from_sizes(s.catalog, {0: 50.0})
        first = solver.solve(assemble_iso_qp(s, "pc", zero))
        warm = solver.solve(assemble_iso_qp(s, "pc", big), warm_start=first)
        fresh = solve_qp(assemble_iso_qp(s, "pc", big))
        assert warm.status is fresh.status is SolveStatus.SOLVED
        assert warm.residuals.objective == pytest.approx(fresh.residuals.objective, rel=1e-7)
