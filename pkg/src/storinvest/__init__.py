"""Storage investment under perfect competition and Cournot oligopoly on a DC network."""

from .equilibrium import EquilibriumSolution, WelfareReport, compute_welfare, merchant_profit, solve_market
from .model import InvestmentDecision, ScenarioError, ScenarioModel, validate_scenario
from .qpform import CompetitionMode, assemble_iso_qp
from .qpsolve import SolverError, SolverSettings, solve_qp

__all__ = [
    "CompetitionMode",
    "EquilibriumSolution",
    "InvestmentDecision",
    "ScenarioError",
    "ScenarioModel",
    "SolverError",
    "SolverSettings",
    "WelfareReport",
    "assemble_iso_qp",
    "compute_welfare",
    "merchant_profit",
    "solve_market",
    "solve_qp",
    "validate_scenario",
]
