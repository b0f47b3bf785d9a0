"""Market equilibria and their welfare decomposition."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import InvestmentDecision, ScenarioModel
from .qpform import CompetitionMode, StandardQP, assemble_iso_qp, objective_value
from .qpsolve import PrimalDualSolution, SolverError, SolverSettings, SolveStatus, StandardQPSolver

# row family -> dual name used throughout the verification code
DUAL_NAMES = {
    "balance": "theta",
    "slack": "slack",
    "vres-eq": "beta_vres",
    "sto-balance-p": "lam_bal_p",
    "sto-balance-j": "lam_bal_j",
    "gen-cap": "beta_conv",
    "ramp-up": "beta_up",
    "ramp-down": "beta_down",
    "sto-in-p": "lam_in_p",
    "sto-out-p": "lam_out_p",
    "sto-ub-p": "lam_ub_p",
    "sto-lb-p": "lam_lb_p",
    "sto-in-j": "lam_in_j",
    "sto-out-j": "lam_out_j",
    "sto-ub-j": "lam_ub_j",
    "sto-lb-j": "lam_lb_j",
    "line-fwd": "mu_up",
    "line-bwd": "mu_down",
}


class MarketSolveError(SolverError):
    pass


@dataclass(eq=False)
class EquilibriumSolution:
    """Primal quantities and multipliers of one lower-level solve.

    ``primal`` maps variable family (``q``, ``v``, ``g_conv``, ...) and
    ``dual`` maps multiplier name (``theta``, ``beta_conv``, ...) to arrays
    of shape ``(M, T, k)``.  Multipliers follow the sign conventions of the
    maximization problem: every inequality multiplier is non-negative.
    """

    mode: CompetitionMode
    decision: InvestmentDecision
    primal: dict[str, np.ndarray]
    dual: dict[str, np.ndarray]
    objective: float
    weights: np.ndarray | None = None
    iterations: int = 0
    polished: bool = False
    raw: PrimalDualSolution | None = field(default=None, repr=False)

    @property
    def prices(self) -> np.ndarray:
        """Nodal prices ``theta / W`` in EUR/MWh, shape (M, T, N)."""
        return self.dual["theta"] / np.asarray(self.weights)[:, None, None]

    def copy(self) -> "EquilibriumSolution":
        return replace(
            self,
            primal={k: v.copy() for k, v in self.primal.items()},
            dual={k: v.copy() for k, v in self.dual.items()},
        )


def extract(qp: StandardQP, sol: PrimalDualSolution, scenario: ScenarioModel,
            z: InvestmentDecision) -> EquilibriumSolution:
    primal = {name: blk.take(sol.x).copy() for name, blk in qp.var_map.items()}
    dual = {}
    for fam, blk in qp.eq_map.items():
        dual[DUAL_NAMES[fam]] = blk.take(sol.y_eq).copy()
    for fam, blk in qp.in_map.items():
        name = DUAL_NAMES.get(fam, "nu_" + fam[3:] if fam.startswith("nn-") else fam)
        dual[name] = blk.take(sol.y_in).copy()
    return EquilibriumSolution(
        mode=qp.mode, decision=z, primal=primal, dual=dual,
        objective=objective_value(qp, sol.x), weights=np.asarray(scenario.weights),
        iterations=sol.iterations, polished=sol.polished, raw=sol,
    )


class MarketSolver:
    """Solves the market for a sequence of investment decisions.

    The QP structure does not depend on the decision, so one solver
    (scaling, factorizations) is reused per competition mode.
    """

    def __init__(self, scenario: ScenarioModel, settings: SolverSettings | None = None):
        self.scenario = scenario
        self.settings = settings or SolverSettings()
        self._solvers: dict[CompetitionMode, StandardQPSolver] = {}

    def solve(self, mode, z: InvestmentDecision | None = None,
              warm_start: EquilibriumSolution | None = None) -> EquilibriumSolution:
        mode = CompetitionMode.parse(mode)
        if z is None:
            z = InvestmentDecision.zero(self.scenario.catalog)
        qp = assemble_iso_qp(self.scenario, mode, z)
        solver = self._solvers.setdefault(mode, StandardQPSolver(self.settings))
        sol = solver.solve(qp, warm_start.raw if warm_start is not None else None)
        if sol.status is not SolveStatus.SOLVED:
            label = z.label(self.scenario.nodes)
            raise MarketSolveError(
                f"market solve ({mode.value}, decision {label}) ended with status {sol.status.value}",
                status=sol.status, context=z,
            )
        return extract(qp, sol, self.scenario, z)


def solve_market(scenario: ScenarioModel, mode, z: InvestmentDecision | None = None,
                 settings: SolverSettings | None = None, warm_start=None) -> EquilibriumSolution:
    return MarketSolver(scenario, settings).solve(mode, z, warm_start)


# -- welfare --------------------------------------------------------------------

@dataclass
class WelfareReport:
    """Cluster-weighted weekly welfare decomposition (EUR/week, CO2 in t/week)."""

    social_welfare: float
    investor_surplus: float
    producer_surplus: dict[str, float]
    consumer_surplus: float
    grid_revenue: float
    emissions: float
    investment_cost: float
    gross_benefit: float = 0.0
    operating_cost: float = 0.0

    @property
    def ps_total(self) -> float:
        return float(sum(self.producer_surplus.values()))

    def residual(self) -> float:
        """SW - (CS + PS + IS + GR)."""
        return self.social_welfare - (self.consumer_surplus + self.ps_total
                                      + self.investor_surplus + self.grid_revenue)

    def to_record(self) -> dict:
        rec = {
            "SW": self.social_welfare,
            "IS": self.investor_surplus,
            "PS": self.ps_total,
            "CS": self.consumer_surplus,
            "GR": self.grid_revenue,
            "CO2": self.emissions,
            "investment_cost": self.investment_cost,
        }
        rec.update({f"PS[{k}]": v for k, v in self.producer_surplus.items()})
        return rec


def investment_cost(scenario: ScenarioModel, z: InvestmentDecision) -> float:
    return float(scenario.catalog.cost * z.capacity.sum())


def compute_welfare(scenario: ScenarioModel, eq: EquilibriumSolution,
                    z: InvestmentDecision | None = None) -> WelfareReport:
    s = scenario
    z = z or eq.decision
    W = s.weights[:, None, None]
    p = eq.dual["theta"] / W
    x = eq.primal
    q = x["q"]
    dint, dslp = s.demand.intercept, s.demand.slope

    gross = float(np.sum(W * (dint * q - 0.5 * dslp * q * q)))
    cs = float(np.sum(W * (dint * q - 0.5 * dslp * q * q - p * q)))

    cost_u = np.array([u.cost for u in s.units])
    emis_u = np.array([u.emission for u in s.units])
    cand = np.array(s.catalog.candidates, dtype=int)
    cs_sto = s.storage_cost

    ps = {name: 0.0 for name in s.producers}
    g = x["g_conv"]
    for k, u in enumerate(s.units):
        ps[u.producer] += float(np.sum(W[:, :, 0] * (p[:, :, u.node] - u.cost) * g[:, :, k]))
    for k, a in enumerate(s.vres):
        ps[a.producer] += float(np.sum(W[:, :, 0] * p[:, :, a.node] * x["g_vres"][:, :, k]))
    for k, a in enumerate(s.storage):
        out, inn = x["out_p"][:, :, k], x["in_p"][:, :, k]
        ps[a.owner] += float(np.sum(W[:, :, 0] * (p[:, :, a.node] * (out - inn) - cs_sto * out)))

    inv = investment_cost(s, z)
    is_ = float(np.sum(W * (p[:, :, cand] * (x["out_j"] - x["in_j"]) - cs_sto * x["out_j"]))) - inv

    net_import = s.durations[:, :, None] * np.einsum("ab,mtb->mta", s.network.B, x["v"])
    gr = float(np.sum(W * p * net_import))

    op = float(np.sum(W * cost_u * g)) + float(np.sum(W * cs_sto * x["out_p"])) \
        + float(np.sum(W * cs_sto * x["out_j"]))
    emissions = float(np.sum(W * emis_u * g))
    return WelfareReport(
        social_welfare=gross - op - inv,
        investor_surplus=is_,
        producer_surplus=ps,
        consumer_surplus=cs,
        grid_revenue=gr,
        emissions=emissions,
        investment_cost=inv,
        gross_benefit=gross,
        operating_cost=op,
    )


def merchant_profit(scenario: ScenarioModel, eq: EquilibriumSolution,
                    z: InvestmentDecision | None = None) -> float:
    """Price-taking arbitrage profit of the investor net of investment cost."""
    z = z or eq.decision
    theta = eq.dual["theta"]
    cand = list(scenario.catalog.candidates)
    W = scenario.weights[:, None, None]
    x = eq.primal
    operating = np.sum(theta[:, :, cand] * (x["out_j"] - x["in_j"]) - W * scenario.storage_cost * x["out_j"])
    return float(operating) - investment_cost(scenario, z)
