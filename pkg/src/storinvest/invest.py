"""Exhaustive search over discrete storage investments.

Every decision in the catalog's product space is priced by solving the
market once.  The decision-independent parts of each upper-level objective
are kept per decision, so a cost sweep only re-ranks the table.
"""
from __future__ import annotations

import enum
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import EquilibriumSolution, MarketSolver, WelfareReport, compute_welfare, merchant_profit
from .model import InvestmentCatalog, InvestmentDecision, ScenarioModel
from .qpform import CompetitionMode
from .qpsolve import SolverSettings

log = logging.getLogger(__name__)

DEFAULT_DECISION_CAP = 2 ** 20
TIE_RTOL = 1e-8
# chunk winners within this band are shipped back so the global winner never needs a re-solve
KEEP_RTOL = 1e-6


class InvestorType(str, enum.Enum):
    WELFARE = "sw"
    MERCHANT = "merchant"

    @classmethod
    def parse(cls, value) -> "InvestorType":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower()
        aliases = {"sw": cls.WELFARE, "welfare": cls.WELFARE, "welfaremaximizer": cls.WELFARE,
                   "m": cls.MERCHANT, "merchant": cls.MERCHANT}
        if v not in aliases:
            raise ValueError(f"unknown investor type {value!r}; expected 'sw' or 'merchant'")
        return aliases[v]


def regime_label(investor, mode) -> str:
    if investor == "CP":
        return "CP"
    inv = InvestorType.parse(investor)
    mode = CompetitionMode.parse(mode)
    return f"{'SW' if inv is InvestorType.WELFARE else 'M'}-{mode.value.upper()}"


def enumerate_decisions(catalog: InvestmentCatalog, cap: int = DEFAULT_DECISION_CAP) -> list[InvestmentDecision]:
    """All decisions, node-major lexicographic with sizes ascending; all-zero first."""
    count = len(catalog.sizes) ** len(catalog.candidates)
    if count > cap:
        raise ValueError(f"{count} investment decisions exceed the enumeration cap of {cap}")
    return [InvestmentDecision(catalog.candidates, catalog.sizes, choice)
            for choice in itertools.product(range(len(catalog.sizes)), repeat=len(catalog.candidates))]


@dataclass(frozen=True)
class DecisionRecord:
    """One enumeration table row.

    ``*_gross`` values exclude the investment cost, which is charged per
    evaluation so that the same market solve can serve several cost levels.
    """

    choice: tuple[int, ...]
    capacity: tuple[float, ...]
    sw_gross: float
    is_gross: float
    cp_gross: float
    merchant_gross: float
    ps: float
    cs: float
    gr: float
    iterations: int

    @property
    def total(self) -> float:
        return float(sum(self.capacity))

    def objective(self, kind: str, cost: float) -> float:
        gross = {"CP": self.cp_gross, "SW": self.sw_gross, "M": self.merchant_gross}[kind]
        return gross - cost * self.total


@dataclass
class RegimeResult:
    label: str
    investor: str
    mode: CompetitionMode
    cost: float
    best: InvestmentDecision
    equilibrium: EquilibriumSolution
    welfare: WelfareReport
    table: list[DecisionRecord]
    stats: dict = field(default_factory=dict)
    reference: dict | None = None  # summary at the no-investment decision, same regime

    def objective_kind(self) -> str:
        return "CP" if self.label == "CP" else self.label.split("-")[0]

    def table_rows(self, node_names=None) -> list[dict]:
        kind = self.objective_kind()
        rows = []
        for rec in self.table:
            d = InvestmentDecision(self.best.nodes, self.best.sizes, rec.choice)
            inv = self.cost * rec.total
            rows.append({
                "decision": d.label(node_names),
                "total_mwh": rec.total,
                "objective": rec.objective(kind, self.cost),
                "SW": rec.sw_gross - inv,
                "IS": rec.is_gross - inv,
                "PS": rec.ps,
                "CS": rec.cs,
                "GR": rec.gr,
                "iterations": rec.iterations,
            })
        return rows

    def summary(self, node_names=None) -> dict:
        return summarize(self.label, self.equilibrium, self.welfare, node_names)


def summarize(label: str, eq: EquilibriumSolution, welfare: WelfareReport, node_names=None) -> dict:
    """One report row: welfare split, mean price and the invested capacity."""
    d = eq.decision
    names = list(node_names) if node_names else [str(n) for n in range(max(d.nodes, default=-1) + 1)]
    by_node = {names[n]: float(c) for n, c in zip(d.nodes, d.capacity)}
    return {
        "model": label,
        "SW": welfare.social_welfare,
        "IS": welfare.investor_surplus,
        "PS": welfare.ps_total,
        "CS": welfare.consumer_surplus,
        "GR": welfare.grid_revenue,
        "price_mean": float(np.mean(eq.prices)),
        "investment_total_gwh": d.total / 1000.0,
        "investment_by_node": ";".join(f"{k}={v:g}" for k, v in by_node.items() if v) or "-",
    }


# -- enumeration --------------------------------------------------------------------

def _record(scenario: ScenarioModel, eq: EquilibriumSolution) -> DecisionRecord:
    z = eq.decision
    w = compute_welfare(scenario, eq, z)
    inv = w.investment_cost
    return DecisionRecord(
        choice=tuple(z.choice),
        capacity=tuple(float(c) for c in z.capacity),
        sw_gross=w.social_welfare + inv,
        is_gross=w.investor_surplus + inv,
        cp_gross=eq.objective,
        merchant_gross=merchant_profit(scenario, eq, z) + inv,
        ps=w.ps_total,
        cs=w.consumer_surplus,
        gr=w.grid_revenue,
        iterations=eq.iterations,
    )


def _solve_chunk(scenario: ScenarioModel, mode: CompetitionMode, settings: SolverSettings,
                 choices: list[tuple[int, ...]], anchor: EquilibriumSolution,
                 keep: list[tuple[str, float]]):
    """Solve a contiguous slice of decisions, each warm-started from ``anchor``.

    Returns the table rows and, per objective kind in ``keep``, the full
    solutions whose objective lies within ``KEEP_RTOL`` of the slice maximum.
    """
    solver = MarketSolver(scenario, settings)
    cat = scenario.catalog
    records, sols = [], {}
    for choice in choices:
        z = InvestmentDecision(cat.candidates, cat.sizes, choice)
        eq = solver.solve(mode, z, warm_start=anchor)
        records.append(_record(scenario, eq))
        sols[choice] = eq
    kept = {}
    for kind, cost in keep:
        if not records:
            continue
        vals = [r.objective(kind, cost) for r in records]
        top = max(vals)
        band = KEEP_RTOL * (1.0 + abs(top))
        for r, v in zip(records, vals):
            if v >= top - band:
                kept[r.choice] = sols[r.choice]
    return records, kept


def _solve_chunk_star(args):
    return _solve_chunk(*args)


def select_best(table: list[DecisionRecord], kind: str, cost: float, rtol: float = TIE_RTOL) -> DecisionRecord:
    """Argmax with ties (within ``rtol``) broken by smaller MWh, then table order."""
    vals = [r.objective(kind, cost) for r in table]
    top = max(vals)
    band = rtol * max(1.0, abs(top))
    tied = [k for k, v in enumerate(vals) if v >= top - band]
    k = min(tied, key=lambda k: (table[k].total, table[k].choice))
    return table[k]


@dataclass
class Enumeration:
    """Market solutions for every decision under one competition mode."""

    scenario: ScenarioModel
    mode: CompetitionMode
    table: list[DecisionRecord]
    solutions: dict[tuple[int, ...], EquilibriumSolution]
    stats: dict

    def regime(self, kind: str, cost: float | None = None) -> RegimeResult:
        cost = self.scenario.catalog.cost if cost is None else float(cost)
        rec = select_best(self.table, kind, cost)
        eq = self.solutions.get(rec.choice)
        scen = self.scenario.with_cost(cost)
        if eq is None:
            # only reachable if the keep band failed to cover the winner
            log.warning("re-solving winning decision %s", rec.choice)
            eq = MarketSolver(scen, self.stats.get("settings")).solve(self.mode, InvestmentDecision(
                scen.catalog.candidates, scen.catalog.sizes, rec.choice))
        label = "CP" if kind == "CP" else f"{kind}-{self.mode.value.upper()}"
        investor = {"CP": "central-planner", "SW": InvestorType.WELFARE.value,
                    "M": InvestorType.MERCHANT.value}[kind]
        stats = {k: v for k, v in self.stats.items() if k != "settings"}
        zero = InvestmentDecision.zero(scen.catalog).choice
        anchor = self.solutions.get(zero)
        reference = None
        if anchor is not None:
            reference = summarize(label, anchor, compute_welfare(scen, anchor), scen.nodes)
        return RegimeResult(
            label=label, investor=investor, mode=self.mode, cost=cost,
            best=eq.decision, equilibrium=eq, welfare=compute_welfare(scen, eq),
            table=list(self.table), stats=stats, reference=reference,
        )


def run_enumeration(scenario: ScenarioModel, mode, settings: SolverSettings | None = None,
                    workers: int = 1, keep: list[tuple[str, float]] | None = None,
                    cap: int = DEFAULT_DECISION_CAP) -> Enumeration:
    """Solve the market for every decision.

    The all-zero decision is solved first from a cold start; every other
    decision is warm-started from that solution, so each solve depends only on
    its own decision and serial and parallel runs agree up to rounding.
    """
    mode = CompetitionMode.parse(mode)
    settings = settings or SolverSettings()
    if workers < 1:
        raise ValueError("workers must be at least 1")
    decisions = enumerate_decisions(scenario.catalog, cap)
    keep = keep or []
    t0 = time.perf_counter()
    anchor = MarketSolver(scenario, settings).solve(mode, decisions[0])
    table = [_record(scenario, anchor)]
    solutions = {decisions[0].choice: anchor}  # also the no-investment baseline
    rest = [d.choice for d in decisions[1:]]
    n_chunks = max(1, min(workers, len(rest)))
    bounds = np.linspace(0, len(rest), n_chunks + 1).round().astype(int)
    jobs = [(scenario, mode, settings, rest[a:b], anchor, keep) for a, b in zip(bounds[:-1], bounds[1:])]
    if workers == 1 or len(jobs) == 1:
        results = [_solve_chunk_star(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_solve_chunk_star, jobs))
    for records, kept in results:
        table.extend(records)
        solutions.update(kept)
    elapsed = time.perf_counter() - t0
    stats = {
        "solves": len(table),
        "decisions": len(decisions),
        "workers": workers,
        "seconds": elapsed,
        "iterations": int(sum(r.iterations for r in table)),
        "settings": settings,
    }
    log.info("enumerated %d decisions (%s) in %.2fs", len(table), mode.value, elapsed)
    return Enumeration(scenario, mode, table, solutions, stats)


def optimize_investment(scenario: ScenarioModel, investor, mode, settings: SolverSettings | None = None,
                        workers: int = 1, cost: float | None = None) -> RegimeResult:
    inv = InvestorType.parse(investor)
    kind = "SW" if inv is InvestorType.WELFARE else "M"
    c = scenario.catalog.cost if cost is None else float(cost)
    return run_enumeration(scenario, mode, settings, workers, keep=[(kind, c)]).regime(kind, c)


def solve_central_planning(scenario: ScenarioModel, settings: SolverSettings | None = None,
                           workers: int = 1, cost: float | None = None) -> RegimeResult:
    """Welfare-maximizing benchmark priced from the market objective itself.

    The upper objective is the optimal market objective minus the investment
    cost, rather than the welfare decomposition used for the SW investor.
    """
    c = scenario.catalog.cost if cost is None else float(cost)
    return run_enumeration(scenario, CompetitionMode.PERFECT, settings, workers,
                           keep=[("CP", c)]).regime("CP", c)


def cost_sweep(scenario: ScenarioModel, investor, mode, costs, settings: SolverSettings | None = None,
               workers: int = 1) -> list[RegimeResult]:
    """One enumeration, re-ranked at each investment cost."""
    kind = "CP" if investor == "CP" else ("SW" if InvestorType.parse(investor) is InvestorType.WELFARE else "M")
    mode = CompetitionMode.PERFECT if kind == "CP" else mode
    costs = [float(c) for c in costs]
    en = run_enumeration(scenario, mode, settings, workers, keep=[(kind, c) for c in costs])
    return [en.regime(kind, c) for c in costs]


def parse_regime(label: str) -> tuple[str, CompetitionMode]:
    """``'CP'``, ``'SW-PC'``, ``'M-CO'`` ... -> (objective kind, market mode)."""
    lab = label.strip().upper()
    if lab == "CP":
        return "CP", CompetitionMode.PERFECT
    kind, _, mode = lab.partition("-")
    if kind not in ("SW", "M") or not mode:
        raise ValueError(f"unknown regime {label!r}; expected CP, SW-PC, M-PC, SW-CO or M-CO")
    return kind, CompetitionMode.parse(mode.lower())


def run_regimes(scenario: ScenarioModel, regimes, costs=None, settings: SolverSettings | None = None,
                workers: int = 1) -> dict[tuple[str, float], RegimeResult]:
    """Evaluate several regimes at several costs with one enumeration per market mode.

    Keys of the result are ``(label, cost)``.
    """
    costs = [scenario.catalog.cost] if not costs else [float(c) for c in costs]
    by_mode: dict[CompetitionMode, list[str]] = {}
    for label in regimes:
        kind, mode = parse_regime(label)
        by_mode.setdefault(mode, [])
        if kind not in by_mode[mode]:
            by_mode[mode].append(kind)
    out = {}
    for mode, kinds in by_mode.items():
        en = run_enumeration(scenario, mode, settings, workers, keep=[(k, c) for k in kinds for c in costs])
        for kind in kinds:
            for c in costs:
                res = en.regime(kind, c)
                out[(res.label, c)] = res
    return out
