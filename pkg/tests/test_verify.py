import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import TECH, random_scenario, single_node
from storinvest.equilibrium import solve_market
from storinvest.io import load_scenario, scenario_from_dict
from storinvest.model import InvestmentDecision
from storinvest.verify import (
    certify,
    check_dual,
    check_primal,
    duality_sides,
    linearization_certificate,
    merchant_reformulation_gap,
    merchant_sides,
    strong_duality_gap,
)


def congested_pair(capacity=20.0):
    """Cheap unit at n1, dear unit at n2, one thin line between them."""
    return scenario_from_dict({
        "name": "pair",
        "nodes": ["n1", "n2"],
        "slack": "n1",
        "lines": [{"from": "n1", "to": "n2", "susceptance": 1.0, "capacity": capacity}],
        "clusters": [{"name": "m1", "weight": 1.0, "durations": [1.0, 2.0]}],
        "producers": ["i1", "i2"],
        "units": [
            {"producer": "i1", "name": "cheap", "node": "n1", "cost": 5.0, "capacity": 500.0,
             "ramp_up": 1.0, "ramp_down": 1.0},
            {"producer": "i2", "name": "dear", "node": "n2", "cost": 60.0, "capacity": 500.0,
             "ramp_up": 1.0, "ramp_down": 1.0},
        ],
        "demand": {"intercept": 200.0, "slope": 1.0},
        "investment": {"investor": "j", "sizes": [0.0, 10.0], "cost": 1.0,
                       "candidates": ["n2"], "tech": dict(TECH)},
    })


def spread_market(cost=1.0):
    """The unit binds in the first period only, so prices differ between periods."""
    return single_node([("i1", 9.0, 100.0)], periods=2, dint=[[[250.0], [60.0]]],
                       sizes=(0.0, 10.0), cost=cost, candidates=("n1",))


@pytest.fixture(scope="module")
def fixture_eqs():
    s = load_scenario("three_node")
    cat = s.catalog
    z = InvestmentDecision.from_sizes(cat, {cat.candidates[0]: cat.sizes[2]})
    return s, {mode: solve_market(s, mode, z) for mode in ("pc", "co")}


class TestPrimal:
    @pytest.mark.parametrize("mode", ["pc", "co"])
    def test_solved_equilibrium_is_feasible(self, fixture_eqs, mode):
        s, eqs = fixture_eqs
        rep = check_primal(s, eqs[mode])
        assert rep.ok(1e-6), rep.failures(1e-6)

    def test_inflated_line_flow(self):
        s = congested_pair()
        eq = solve_market(s, "pc").copy()
        assert check_primal(s, eq).violation["line"] <= 1e-6
        eq.primal["v"] *= 1.1
        viol = check_primal(s, eq).violation["line"]
        # the line binds in the longer period, where T * K = 40
        assert viol == pytest.approx(0.1 * 2.0 * 20.0, rel=1e-6)

    def test_injected_investor_charge(self):
        s = spread_market()
        eq = solve_market(s, "pc").copy()
        eq.primal["in_j"][0, 1, 0] += 3.5
        rep = check_primal(s, eq)
        assert rep.violation["sto-in-j"] == pytest.approx(3.5, rel=1e-9)
        assert not rep.ok(1e-6)


class TestDual:
    @pytest.mark.parametrize("mode", ["pc", "co"])
    def test_solved_equilibrium_is_dual_feasible(self, fixture_eqs, mode):
        s, eqs = fixture_eqs
        rep = check_dual(s, eqs[mode], mode)
        assert rep.ok(1e-5), rep.failures(1e-5)

    def test_price_perturbation(self):
        s = single_node([("i1", 9.0, 1000.0)], periods=2)
        eq = solve_market(s, "pc").copy()
        eq.dual["theta"][0, 1, 0] -= 0.75
        assert check_dual(s, eq).violation["dual-q"] >= 0.75 - 1e-9

    def test_cournot_solution_fails_competitive_rules(self):
        s = single_node([("i1", 9.0, 1000.0)], weights=(1.0,))
        eq = solve_market(s, "co")
        assert check_dual(s, eq, "co").ok(1e-5)
        rep = check_dual(s, eq, "pc")
        q = eq.primal["g_conv"][0, 0, 0]
        expected = s.weights[0] * s.demand.slope[0, 0, 0] * q
        assert q > 0
        assert rep.violation["dual-g_conv"] == pytest.approx(expected, rel=1e-6)
        assert not certify(s, eq, "pc").passed


class TestStrongDuality:
    @pytest.mark.parametrize("mode", ["pc", "co"])
    def test_gap_closes(self, fixture_eqs, mode):
        s, eqs = fixture_eqs
        primal, _ = duality_sides(s, eqs[mode])
        assert abs(strong_duality_gap(s, eqs[mode])) <= 1e-5 * (1 + abs(primal))

    def test_zeroed_duals_leave_the_quadratic_terms(self, fixture_eqs):
        s, eqs = fixture_eqs
        eq = eqs["co"].copy()
        primal, dual = duality_sides(s, eq)
        for k in eq.dual:
            eq.dual[k][:] = 0.0
        primal0, dual0 = duality_sides(s, eq)
        assert primal0 == primal
        # only the quadratic terms survive on the dual side
        assert strong_duality_gap(s, eq) == pytest.approx(primal - dual0, rel=1e-12)
        assert dual0 > 0

    def test_doubled_duals_shift_gap_by_linear_part(self, fixture_eqs):
        s, eqs = fixture_eqs
        eq = eqs["pc"].copy()
        gap = strong_duality_gap(s, eq)
        zeroed = eq.copy()
        for k in zeroed.dual:
            zeroed.dual[k][:] = 0.0
        quad = duality_sides(s, zeroed)[1]
        linear = duality_sides(s, eq)[1] - quad
        for k in eq.dual:
            eq.dual[k] *= 2.0
        assert strong_duality_gap(s, eq) == pytest.approx(gap - linear, rel=1e-9, abs=1e-6)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 5000), mode=st.sampled_from(["pc", "co"]))
    def test_random_solves_certify(self, seed, mode):
        s = random_scenario(seed, cost=2.0)
        cat = s.catalog
        z = InvestmentDecision.from_sizes(cat, {n: cat.sizes[-1] for n in cat.candidates})
        cert = certify(s, solve_market(s, mode, z))
        assert cert.passed, [r for r in cert.table() if not r[-1]]


class TestMerchantReformulation:
    def test_zero_decision(self):
        s = spread_market()
        direct, dual = merchant_sides(s, solve_market(s, "pc"))
        assert direct == pytest.approx(0.0, abs=1e-9)
        assert dual == 0.0

    def test_gap_closes_with_storage(self):
        s = spread_market()
        z = InvestmentDecision.from_sizes(s.catalog, {0: 10.0})
        eq = solve_market(s, "pc", z)
        direct, _ = merchant_sides(s, eq)
        assert direct > 0
        assert merchant_reformulation_gap(s, eq) <= 1e-5 * (1 + abs(direct))

    def test_zeroed_investor_duals(self):
        s = spread_market()
        z = InvestmentDecision.from_sizes(s.catalog, {0: 10.0})
        eq = solve_market(s, "pc", z).copy()
        for fam in ("in", "out", "ub", "lb"):
            eq.dual[f"lam_{fam}_j"][:] = 0.0
        direct, _ = merchant_sides(s, eq)
        assert merchant_reformulation_gap(s, eq) == pytest.approx(direct, rel=1e-12)
        assert not certify(s, eq).merchant_ok


class TestLinearization:
    def solved(self, size):
        s = spread_market()
        z = InvestmentDecision.from_sizes(s.catalog, {0: size} if size else {})
        return s, z, solve_market(s, "pc", z)

    def test_selected_size_carries_the_product(self):
        s, z, eq = self.solved(10.0)
        cert = linearization_certificate(eq, z)
        assert cert.passed
        lam = cert.lam["out"]
        np.testing.assert_array_equal(cert.x["out"][..., 1], lam * 10.0)
        np.testing.assert_array_equal(cert.x_hat["out"][..., 1], 0.0)

    def test_unselected_size_goes_to_complement(self):
        s, z, eq = self.solved(0.0)
        cert = linearization_certificate(eq, z)
        assert cert.passed
        for fam in cert.x:
            np.testing.assert_array_equal(cert.x[fam], 0.0)
            xh = cert.x_hat[fam][..., 1]
            np.testing.assert_array_equal(xh, cert.lam[fam] * 10.0)
            assert np.all(xh >= 0) and np.all(xh <= cert.lam_upper[fam] * 10.0)

    def test_bound_below_observed_dual(self):
        s, z, eq = self.solved(10.0)
        top = max(float(eq.dual["lam_out_j"].max()), float(eq.dual["lam_in_j"].max()))
        assert top > 0
        cert = linearization_certificate(eq, z, upper=top / 2)
        assert not cert.passed
        assert any("upper bound" in msg for msg in cert.failures())
        assert {v[0] for v in cert.bound_violations} & {"out", "in"}

    def test_safety_margin_validated(self):
        _, z, eq = self.solved(10.0)
        with pytest.raises(ValueError):
            linearization_certificate(eq, z, safety_margin=0.5)
