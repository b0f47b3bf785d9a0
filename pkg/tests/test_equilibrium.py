import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import random_scenario, single_node
from oracles import competitive, cournot
from storinvest.equilibrium import (
    MarketSolveError,
    MarketSolver,
    compute_welfare,
    investment_cost,
    merchant_profit,
    solve_market,
)
from storinvest.io import load_scenario
from storinvest.model import InvestmentDecision
from storinvest.qpsolve import SolverSettings


def price(eq):
    return float(eq.prices[0, 0, 0])


class TestClosedForms:
    def test_competitive_interior(self):
        s = single_node([("i1", 9.0, 1000.0)])
        eq = solve_market(s, "pc")
        p, q = competitive(250.0, 2.0, 9.0)
        assert price(eq) == pytest.approx(p, rel=1e-6)
        assert eq.primal["q"][0, 0, 0] == pytest.approx(q, rel=1e-6)

    def test_competitive_at_capacity(self):
        s = single_node([("i1", 9.0, 100.0)])
        eq = solve_market(s, "pc")
        p, q = competitive(250.0, 2.0, 9.0, 100.0)
        assert (p, q) == (50.0, 100.0)
        assert price(eq) == pytest.approx(p, rel=1e-6)
        beta = eq.dual["beta_conv"][0, 0, 0] / eq.weights[0]
        assert beta == pytest.approx(p - 9.0, rel=1e-6)

    def test_monopoly(self):
        s = single_node([("i1", 9.0, 1000.0)])
        eq = solve_market(s, "co")
        p, qi = cournot(250.0, 2.0, 9.0, 1)
        assert p == pytest.approx((250.0 + 9.0) / 2)
        assert price(eq) == pytest.approx(p, rel=1e-6)
        assert eq.primal["q"][0, 0, 0] == pytest.approx(qi, rel=1e-6)

    def test_duopoly(self):
        s = single_node([("i1", 9.0, 1000.0), ("i2", 9.0, 1000.0)])
        eq = solve_market(s, "co")
        p, qi = cournot(250.0, 2.0, 9.0, 2)
        assert qi == pytest.approx(40.1667, abs=1e-4)
        assert p == pytest.approx(89.3333, abs=1e-4)
        assert price(eq) == pytest.approx(p, rel=1e-6)
        np.testing.assert_allclose(eq.primal["g_conv"][0, 0], [qi, qi], rtol=1e-6)

    def test_prices_divide_by_weight(self):
        s = single_node([("i1", 9.0, 1000.0)], weights=(0.25, 0.75))
        eq = solve_market(s, "pc")
        np.testing.assert_allclose(eq.prices[:, 0, 0], [9.0, 9.0], rtol=1e-6)
        np.testing.assert_allclose(eq.dual["theta"][:, 0, 0], [0.25 * 9.0, 0.75 * 9.0], rtol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(dint=st.floats(50, 500), dslp=st.floats(0.1, 5), cost=st.floats(0, 40),
           producers=st.integers(1, 4))
    def test_symmetric_cournot_property(self, dint, dslp, cost, producers):
        s = single_node([(f"i{k}", cost, 1e5) for k in range(producers)], dint=dint, dslp=dslp)
        eq = solve_market(s, "co")
        p, _ = cournot(dint, dslp, cost, producers)
        assert price(eq) == pytest.approx(p, rel=1e-6)


class TestFeasibility:
    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 5000), mode=st.sampled_from(["pc", "co"]))
    def test_nonnegative_primal(self, seed, mode):
        s = random_scenario(seed)
        eq = solve_market(s, mode)
        for fam in ("q", "g_conv", "g_vres", "sto_p", "in_p", "out_p", "sto_j", "in_j", "out_j"):
            assert eq.primal[fam].min(initial=0.0) >= -1e-6

    def test_max_iterations_raises_with_context(self):
        s = load_scenario("three_node")
        with pytest.raises(MarketSolveError) as err:
            solve_market(s, "pc", settings=SolverSettings(max_iter=2, polish=False))
        assert err.value.context is not None
        assert "pc" in str(err.value)

    def test_solver_reuse_matches_fresh_solves(self):
        s = load_scenario("three_node")
        ms = MarketSolver(s)
        cat = s.catalog
        for size in cat.sizes:
            z = InvestmentDecision.from_sizes(cat, {cat.candidates[0]: size})
            a = ms.solve("pc", z)
            b = solve_market(s, "pc", z)
            assert a.objective == pytest.approx(b.objective, rel=1e-8)


class TestWelfare:
    def test_single_node_has_no_grid_revenue(self):
        s = single_node([("i1", 9.0, 100.0)])
        w = compute_welfare(s, solve_market(s, "pc"))
        assert w.grid_revenue == 0.0

    def test_zero_decision_has_no_investor_surplus(self):
        s = load_scenario("three_node")
        w = compute_welfare(s, solve_market(s, "pc"))
        assert w.investor_surplus == pytest.approx(0.0, abs=1e-9)
        assert w.investment_cost == 0.0

    def test_competitive_welfare_by_hand(self):
        s = single_node([("i1", 9.0, 1000.0)])
        w = compute_welfare(s, solve_market(s, "pc"))
        assert w.social_welfare == pytest.approx((250 - 9) ** 2 / 4.0, rel=1e-6)
        assert w.ps_total == pytest.approx(0.0, abs=1e-5)
        assert w.consumer_surplus == pytest.approx(w.social_welfare, rel=1e-6)

    @pytest.mark.parametrize("mode", ["pc", "co"])
    def test_identity_on_fixture(self, mode):
        s = load_scenario("three_node")
        cat = s.catalog
        z = InvestmentDecision.from_sizes(cat, {cat.candidates[0]: cat.sizes[-1]})
        w = compute_welfare(s, solve_market(s, mode, z))
        assert abs(w.residual()) <= 1e-6 * abs(w.social_welfare)

    @settings(max_examples=12, deadline=None)
    @given(seed=st.integers(0, 5000), mode=st.sampled_from(["pc", "co"]), top=st.booleans())
    def test_identity_property(self, seed, mode, top):
        s = random_scenario(seed, cost=3.0)
        cat = s.catalog
        z = InvestmentDecision.from_sizes(cat, {n: cat.sizes[-1] for n in cat.candidates} if top else {})
        w = compute_welfare(s, solve_market(s, mode, z))
        assert abs(w.residual()) <= 1e-6 * max(1.0, abs(w.social_welfare))

    @settings(max_examples=12, deadline=None)
    @given(seed=st.integers(0, 5000))
    def test_competition_dominates_cournot(self, seed):
        s = random_scenario(seed)
        pc = compute_welfare(s, solve_market(s, "pc")).social_welfare
        co = compute_welfare(s, solve_market(s, "co")).social_welfare
        assert pc >= co - 1e-8 * abs(pc)


class TestMerchantProfit:
    def spread_market(self, cost):
        # two periods; the second has low demand
        return single_node([("i1", 9.0, 1000.0)], periods=2, dint=[[[250.0], [60.0]]],
                           sizes=(0.0, 10.0), cost=cost, candidates=("n1",))

    def test_zero_decision(self):
        s = self.spread_market(1.0)
        assert merchant_profit(s, solve_market(s, "pc")) == pytest.approx(0.0, abs=1e-9)

    def test_flat_prices_lose_money(self):
        s = single_node([("i1", 9.0, 1000.0)], periods=2, sizes=(0.0, 10.0), cost=1.0, candidates=("n1",))
        z = InvestmentDecision.from_sizes(s.catalog, {0: 10.0})
        assert merchant_profit(s, solve_market(s, "pc", z)) < 0.0

    def test_one_cycle_by_hand(self):
        s = self.spread_market(2.0)
        z = InvestmentDecision.from_sizes(s.catalog, {0: 10.0})
        eq = solve_market(s, "pc", z).copy()
        W, R, dp = s.weights[0], 10.0, 30.0
        eq.dual["theta"][0, :, 0] = W * np.array([20.0 + dp, 20.0])
        eq.primal["in_j"][0, :, 0] = [0.0, R]
        eq.primal["out_j"][0, :, 0] = [R, 0.0]
        assert merchant_profit(s, eq) == pytest.approx(W * dp * R - 2.0 * R)

    def test_investment_cost(self):
        s = self.spread_market(2.5)
        z = InvestmentDecision.from_sizes(s.catalog, {0: 10.0})
        assert investment_cost(s, z) == 25.0

    def test_cost_override(self):
        s = self.spread_market(2.5)
        assert s.with_cost(4.0).catalog.cost == 4.0
        assert dataclasses.replace(s.catalog, cost=0.0).cost == 0.0
