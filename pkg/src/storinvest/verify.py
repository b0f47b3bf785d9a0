"""Certificates for market solutions.

Everything here is recomputed from the scenario data and the named primal
and dual arrays of an :class:`EquilibriumSolution`; the assembled QP
matrices are deliberately not used, so these checks are an independent
route to the solver's own KKT residuals.

Residuals are reported per constraint family together with a family scale;
a family passes when ``violation <= tol * (1 + scale)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .equilibrium import EquilibriumSolution
from .model import InvestmentDecision, ScenarioModel
from .qpform import CompetitionMode

LINEARIZED_FAMILIES = ("lb", "ub", "out", "in")


def _amax(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.max(np.abs(a))) if a.size else 0.0


def _pos(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.max(np.maximum(a, 0.0))) if a.size else 0.0


def _next(a: np.ndarray) -> np.ndarray:
    """Value at period t+1 with cyclic wrap, along axis 1."""
    return np.roll(a, -1, axis=1)


def _prev(a: np.ndarray) -> np.ndarray:
    return np.roll(a, 1, axis=1)


@dataclass
class ResidualReport:
    """Worst violation per family and the magnitude it is judged against."""

    violation: dict[str, float] = field(default_factory=dict)
    scale: dict[str, float] = field(default_factory=dict)

    def add(self, family: str, violation: float, scale: float) -> None:
        self.violation[family] = max(self.violation.get(family, 0.0), float(violation))
        self.scale[family] = max(self.scale.get(family, 0.0), float(scale))

    def scaled(self) -> dict[str, float]:
        return {f: v / (1.0 + self.scale[f]) for f, v in self.violation.items()}

    def worst(self) -> tuple[str, float]:
        sc = self.scaled()
        if not sc:
            return "", 0.0
        f = max(sc, key=sc.get)
        return f, sc[f]

    def failures(self, tol: float) -> list[str]:
        return [f for f, v in self.scaled().items() if v > tol]

    def ok(self, tol: float) -> bool:
        return not self.failures(tol)

    def rows(self) -> list[tuple[str, float, float]]:
        return [(f, self.violation[f], self.scale[f]) for f in self.violation]


# -- shared paper-form quantities ----------------------------------------------------

def _storage_params(s: ScenarioModel, z: InvestmentDecision):
    """Per-asset storage parameters for the producers' and the investor's storage."""
    Tt = s.durations[:, :, None]
    ptech = [s.storage_tech[a.owner] for a in s.storage]
    jt = s.catalog.tech
    Sj = len(s.catalog.candidates)
    p = {
        "cap": np.array([a.capacity for a in s.storage], dtype=float),
        "lb": np.array([a.min_factor for a in s.storage], dtype=float),
        "eff": np.array([t.efficiency_in for t in ptech], dtype=float),
        "keep": (1.0 - np.array([t.decay for t in ptech], dtype=float))[None, None, :] ** Tt,
        "rin": np.array([t.rate_in for t in ptech], dtype=float),
        "rout": np.array([t.rate_out for t in ptech], dtype=float),
        "node": [a.node for a in s.storage],
    }
    j = {
        "cap": np.asarray(z.capacity, dtype=float),
        "lb": np.full(Sj, s.catalog.min_factor),
        "eff": np.full(Sj, jt.efficiency_in),
        "keep": np.broadcast_to((1.0 - jt.decay) ** Tt, Tt.shape[:2] + (Sj,)),
        "rin": np.full(Sj, jt.rate_in),
        "rout": np.full(Sj, jt.rate_out),
        "node": list(s.catalog.candidates),
    }
    return {"p": p, "j": j}


def producer_net_output(s: ScenarioModel, eq: EquilibriumSolution) -> dict[str, np.ndarray]:
    """Net output of each producer at each node, ``(M, T, N)`` per producer."""
    x = eq.primal
    M, T, N = s.n_clusters, s.n_periods, s.n_nodes
    out = {i: np.zeros((M, T, N)) for i in s.producers}
    for k, u in enumerate(s.units):
        out[u.producer][:, :, u.node] += x["g_conv"][:, :, k]
    for k, a in enumerate(s.vres):
        out[a.producer][:, :, a.node] += x["g_vres"][:, :, k]
    for k, a in enumerate(s.storage):
        out[a.owner][:, :, a.node] += x["out_p"][:, :, k] - x["in_p"][:, :, k]
    return out


def _cournot_gradient(s: ScenarioModel, eq: EquilibriumSolution) -> dict[str, np.ndarray]:
    W = s.weights[:, None, None]
    return {i: W * s.demand.slope * y for i, y in producer_net_output(s, eq).items()}


def _flows(s: ScenarioModel, v: np.ndarray) -> np.ndarray:
    """Line flows ``T_t H v`` in MWh, shape (M, T, L)."""
    return s.durations[:, :, None] * np.einsum("ln,mtn->mtl", s.network.H, v)


# -- primal -------------------------------------------------------------------------

def check_primal(scenario: ScenarioModel, eq: EquilibriumSolution,
                 z: InvestmentDecision | None = None) -> ResidualReport:
    """Equalities in the infinity norm, inequalities as their positive part."""
    s = scenario
    z = z or eq.decision
    x = eq.primal
    rep = ResidualReport()
    Tt = s.durations[:, :, None]
    inj = np.zeros_like(x["q"])
    for k, u in enumerate(s.units):
        inj[:, :, u.node] += x["g_conv"][:, :, k]
    for k, a in enumerate(s.vres):
        inj[:, :, a.node] += x["g_vres"][:, :, k]
    for k, a in enumerate(s.storage):
        inj[:, :, a.node] += x["out_p"][:, :, k] - x["in_p"][:, :, k]
    for k, n in enumerate(s.catalog.candidates):
        inj[:, :, n] += x["out_j"][:, :, k] - x["in_j"][:, :, k]
    net_import = Tt * np.einsum("ab,mtb->mta", s.network.B, x["v"])
    rep.add("balance", _amax(x["q"] - inj - net_import), _amax(x["q"]))

    target = s.vres_energy()
    rep.add("vres-eq", _amax(x["g_vres"] - target), _amax(target))

    gcap = np.array([u.effective_capacity for u in s.units], dtype=float)
    rup = np.array([u.ramp_up for u in s.units], dtype=float)
    rdn = np.array([u.ramp_down for u in s.units], dtype=float)
    g = x["g_conv"]
    rep.add("gen-cap", _pos(g - Tt * gcap), _amax(Tt * gcap))
    rep.add("ramp-up", _pos(g - _prev(g) - Tt * rup * gcap), _amax(Tt * gcap))
    rep.add("ramp-down", _pos(_prev(g) - g - Tt * rdn * gcap), _amax(Tt * gcap))

    for tag, prm in _storage_params(s, z).items():
        sto, rin, rout = x[f"sto_{tag}"], x[f"in_{tag}"], x[f"out_{tag}"]
        cap = prm["cap"]
        bal = sto - prm["keep"] * _prev(sto) - prm["eff"] * rin + rout
        rep.add(f"sto-balance-{tag}", _amax(bal), _amax(cap))
        rep.add(f"sto-in-{tag}", _pos(rin - Tt * prm["rin"] * cap), _amax(Tt * cap))
        rep.add(f"sto-out-{tag}", _pos(rout - Tt * prm["rout"] * cap), _amax(Tt * cap))
        rep.add(f"sto-ub-{tag}", _pos(sto - cap), _amax(cap))
        rep.add(f"sto-lb-{tag}", _pos(prm["lb"] * cap - sto), _amax(cap))

    flows = _flows(s, x["v"])
    K = Tt * s.network.capacity
    rep.add("line", _pos(np.abs(flows) - K), _amax(K) if s.network.n_lines else 0.0)

    for fam in ("q", "g_conv", "g_vres", "sto_p", "in_p", "out_p", "sto_j", "in_j", "out_j"):
        rep.add(f"nonneg-{fam}", _pos(-x[fam]), _amax(x[fam]))
    return rep


# -- dual ---------------------------------------------------------------------------

def reduced_costs(scenario: ScenarioModel, eq: EquilibriumSolution, mode) -> dict[str, np.ndarray]:
    """Left-hand sides of the dual constraints, one array per primal variable.

    Every entry must be ``>= 0`` except ``v``, which must vanish; a strictly
    positive entry forces the paired primal variable to zero.
    """
    mode = CompetitionMode.parse(mode)
    s = scenario
    x, d = eq.primal, eq.dual
    W = s.weights[:, None, None]
    Tt = s.durations[:, :, None]
    theta = d["theta"]
    z = eq.decision
    grad = _cournot_gradient(s, eq) if mode is CompetitionMode.COURNOT else None

    def co(producer, node):
        return grad[producer][:, :, node] if grad is not None else 0.0

    r = {"q": W * (s.demand.slope * x["q"] - s.demand.intercept) + theta}

    B, H = s.network.B, s.network.H
    r["v"] = (-Tt * np.einsum("ab,mta->mtb", B, theta)
              + Tt * np.einsum("ln,mtl->mtn", H, d["mu_up"] - d["mu_down"]))

    bu, bd = d["beta_up"], d["beta_down"]
    rg = np.empty_like(x["g_conv"])
    for k, u in enumerate(s.units):
        rg[:, :, k] = (co(u.producer, u.node) + W[:, :, 0] * u.cost - theta[:, :, u.node]
                       + d["beta_conv"][:, :, k] + bu[:, :, k] - _next(bu)[:, :, k]
                       + _next(bd)[:, :, k] - bd[:, :, k])
    r["g_conv"] = rg

    re = np.empty_like(x["g_vres"])
    for k, a in enumerate(s.vres):
        re[:, :, k] = co(a.producer, a.node) - theta[:, :, a.node] + d["beta_vres"][:, :, k]
    r["g_vres"] = re

    owners = {"p": [a.owner for a in s.storage], "j": [None] * len(s.catalog.candidates)}
    for tag, prm in _storage_params(s, z).items():
        lam = d[f"lam_bal_{tag}"]
        r[f"sto_{tag}"] = lam - _next(prm["keep"] * lam) + d[f"lam_ub_{tag}"] - d[f"lam_lb_{tag}"]
        ri = np.empty_like(lam)
        ro = np.empty_like(lam)
        for k, node in enumerate(prm["node"]):
            owner = owners[tag][k]
            g_co = co(owner, node) if owner is not None else 0.0
            ri[:, :, k] = -g_co + theta[:, :, node] - prm["eff"][k] * lam[:, :, k] + d[f"lam_in_{tag}"][:, :, k]
            ro[:, :, k] = (W[:, :, 0] * s.storage_cost + g_co - theta[:, :, node]
                           + lam[:, :, k] + d[f"lam_out_{tag}"][:, :, k])
        r[f"in_{tag}"] = ri
        r[f"out_{tag}"] = ro
    return r


def _inequality_slacks(s: ScenarioModel, eq: EquilibriumSolution) -> dict[str, np.ndarray]:
    """Slack of each inequality family, keyed by the multiplier name."""
    x = eq.primal
    Tt = s.durations[:, :, None]
    gcap = np.array([u.effective_capacity for u in s.units], dtype=float)
    rup = np.array([u.ramp_up for u in s.units], dtype=float)
    rdn = np.array([u.ramp_down for u in s.units], dtype=float)
    g = x["g_conv"]
    out = {
        "beta_conv": Tt * gcap - g,
        "beta_up": Tt * rup * gcap - (g - _prev(g)),
        "beta_down": Tt * rdn * gcap - (_prev(g) - g),
    }
    for tag, prm in _storage_params(s, eq.decision).items():
        cap = prm["cap"]
        out[f"lam_in_{tag}"] = Tt * prm["rin"] * cap - x[f"in_{tag}"]
        out[f"lam_out_{tag}"] = Tt * prm["rout"] * cap - x[f"out_{tag}"]
        out[f"lam_ub_{tag}"] = cap - x[f"sto_{tag}"]
        out[f"lam_lb_{tag}"] = x[f"sto_{tag}"] - prm["lb"] * cap
    flows = _flows(s, x["v"])
    K = Tt * s.network.capacity
    out["mu_up"] = K - flows
    out["mu_down"] = K + flows
    return out


def check_dual(scenario: ScenarioModel, eq: EquilibriumSolution, mode=None) -> ResidualReport:
    """Dual feasibility under ``mode`` rules plus worst complementarity products.

    Families: ``dual-<var>`` for each stationarity condition, ``sign-<mult>``
    for multiplier signs, ``comp-<var>`` and ``comp-<mult>`` for products.
    """
    s = scenario
    mode = CompetitionMode.parse(mode if mode is not None else eq.mode)
    W = s.weights[:, None, None]
    rep = ResidualReport()
    r = reduced_costs(s, eq, mode)
    price_scale = _amax(W * s.demand.intercept)
    for fam, val in r.items():
        if fam == "v":
            rep.add("dual-v", _amax(val), price_scale)
            continue
        rep.add(f"dual-{fam}", _pos(-val), price_scale)
        xv = eq.primal[fam]
        rep.add(f"comp-{fam}", _amax(np.maximum(val, 0.0) * np.maximum(xv, 0.0)),
                price_scale * (1.0 + _amax(xv)))
    for name, slack in _inequality_slacks(s, eq).items():
        lam = eq.dual[name]
        rep.add(f"sign-{name}", _pos(-lam), price_scale)
        rep.add(f"comp-{name}", _amax(np.maximum(lam, 0.0) * slack),
                price_scale * (1.0 + _amax(slack)))
    return rep


# -- strong duality -----------------------------------------------------------------

def duality_sides(scenario: ScenarioModel, eq: EquilibriumSolution,
                  z: InvestmentDecision | None = None, mode=None) -> tuple[float, float]:
    """``(primal objective side, dual expression side)`` of the activation inequality."""
    s = scenario
    z = z or eq.decision
    mode = CompetitionMode.parse(mode if mode is not None else eq.mode)
    x, d = eq.primal, eq.dual
    W = s.weights[:, None, None]
    Tt = s.durations[:, :, None]
    q = x["q"]
    quad = 0.5 * np.sum(W * s.demand.slope * q * q)
    if mode is CompetitionMode.COURNOT:
        for y in producer_net_output(s, eq).values():
            quad += 0.5 * np.sum(W * s.demand.slope * y * y)
    cost_u = np.array([u.cost for u in s.units], dtype=float)
    primal = (np.sum(W * s.demand.intercept * q) - quad
              - np.sum(W * cost_u * x["g_conv"])
              - np.sum(W * s.storage_cost * x["out_p"]) - np.sum(W * s.storage_cost * x["out_j"]))

    gcap = np.array([u.effective_capacity for u in s.units], dtype=float)
    rup = np.array([u.ramp_up for u in s.units], dtype=float)
    rdn = np.array([u.ramp_down for u in s.units], dtype=float)
    dual = quad + np.sum(Tt * s.network.capacity * (d["mu_up"] + d["mu_down"]))
    dual += np.sum(Tt * gcap * (d["beta_conv"] + rup * d["beta_up"] + rdn * d["beta_down"]))
    dual += np.sum(s.vres_energy() * d["beta_vres"])
    for tag, prm in _storage_params(s, z).items():
        cap = prm["cap"]
        dual += np.sum(cap * (Tt * prm["rin"] * d[f"lam_in_{tag}"] + Tt * prm["rout"] * d[f"lam_out_{tag}"]
                              + d[f"lam_ub_{tag}"] - prm["lb"] * d[f"lam_lb_{tag}"]))
    return float(primal), float(dual)


def strong_duality_gap(scenario: ScenarioModel, eq: EquilibriumSolution,
                       z: InvestmentDecision | None = None, mode=None) -> float:
    """Primal objective side minus dual expression side; zero at an equilibrium."""
    primal, dual = duality_sides(scenario, eq, z, mode)
    return primal - dual


def merchant_sides(scenario: ScenarioModel, eq: EquilibriumSolution,
                   z: InvestmentDecision | None = None) -> tuple[float, float]:
    """Investor arbitrage profit before investment cost, and its dual valuation."""
    s = scenario
    z = z or eq.decision
    x, d = eq.primal, eq.dual
    W = s.weights[:, None, None]
    Tt = s.durations[:, :, None]
    cand = list(s.catalog.candidates)
    direct = np.sum(d["theta"][:, :, cand] * (x["out_j"] - x["in_j"]) - W * s.storage_cost * x["out_j"])
    tech = s.catalog.tech
    cap = np.asarray(z.capacity, dtype=float)
    dual = np.sum(cap * (Tt * tech.rate_in * d["lam_in_j"] + Tt * tech.rate_out * d["lam_out_j"]
                         + d["lam_ub_j"] - s.catalog.min_factor * d["lam_lb_j"]))
    return float(direct), float(dual)


def merchant_reformulation_gap(scenario: ScenarioModel, eq: EquilibriumSolution,
                               z: InvestmentDecision | None = None) -> float:
    direct, dual = merchant_sides(scenario, eq, z)
    return abs(direct - dual)


# -- combined certificate -----------------------------------------------------------

@dataclass
class DualityCertificate:
    primal: ResidualReport
    dual: ResidualReport
    gap: float
    objective: float
    merchant_gap: float
    merchant_profit: float
    mode: CompetitionMode
    tol: float

    @property
    def gap_ok(self) -> bool:
        return abs(self.gap) <= self.tol * (1.0 + abs(self.objective))

    @property
    def merchant_ok(self) -> bool:
        return self.merchant_gap <= self.tol * (1.0 + abs(self.merchant_profit))

    @property
    def complementarity(self) -> float:
        sc = self.dual.scaled()
        return max((v for f, v in sc.items() if f.startswith("comp-")), default=0.0)

    @property
    def passed(self) -> bool:
        return self.primal.ok(self.tol) and self.dual.ok(self.tol) and self.gap_ok and self.merchant_ok

    def table(self) -> list[tuple[str, str, float, float, bool]]:
        rows = []
        for kind, rep in (("primal", self.primal), ("dual", self.dual)):
            for fam, viol, scale in rep.rows():
                rows.append((kind, fam, viol, scale, viol <= self.tol * (1.0 + scale)))
        rows.append(("duality", "strong-duality-gap", abs(self.gap), abs(self.objective), self.gap_ok))
        rows.append(("duality", "merchant-reformulation", self.merchant_gap,
                     abs(self.merchant_profit), self.merchant_ok))
        return rows


def certify(scenario: ScenarioModel, eq: EquilibriumSolution, mode=None, tol: float = 1e-5,
            z: InvestmentDecision | None = None) -> DualityCertificate:
    mode = CompetitionMode.parse(mode if mode is not None else eq.mode)
    z = z or eq.decision
    primal_side, _ = duality_sides(scenario, eq, z, mode)
    direct, _ = merchant_sides(scenario, eq, z)
    return DualityCertificate(
        primal=check_primal(scenario, eq, z),
        dual=check_dual(scenario, eq, mode),
        gap=strong_duality_gap(scenario, eq, z, mode),
        objective=primal_side,
        merchant_gap=merchant_reformulation_gap(scenario, eq, z),
        merchant_profit=direct,
        mode=mode,
        tol=tol,
    )


# -- linearization of dual x decision products ---------------------------------------

@dataclass
class LinearizationCertificate:
    """Auxiliary variables replacing the products of investor duals and ``z``.

    Arrays are indexed ``(M, T, candidate, size)``.  ``x`` carries the
    product ``lambda * Rd_y * z``; ``x_hat`` the complement.
    """

    lam: dict[str, np.ndarray]
    x: dict[str, np.ndarray]
    x_hat: dict[str, np.ndarray]
    lam_lower: dict[str, float]
    lam_upper: dict[str, float]
    residuals: dict[str, dict[str, float]]
    exactness: dict[str, float]
    bound_violations: list[tuple[str, str, int, int, int, float]]
    tol: float

    @property
    def passed(self) -> bool:
        if self.bound_violations:
            return False
        for fam, res in self.residuals.items():
            if any(v > self.tol for v in res.values()):
                return False
        return all(v <= self.tol for v in self.exactness.values())

    def failures(self) -> list[str]:
        out = []
        for fam, side, m, t, k, val in self.bound_violations:
            bound = self.lam_upper[fam] if side == "upper" else self.lam_lower[fam]
            out.append(f"{fam}: dual {val:.6g} at (m={m}, t={t}, k={k}) violates {side} bound {bound:.6g}")
        for fam, res in self.residuals.items():
            out += [f"{fam}: constraint {name} violated by {v:.3g}" for name, v in res.items() if v > self.tol]
        out += [f"{fam}: exactness error {v:.3g}" for fam, v in self.exactness.items() if v > self.tol]
        return out


def linearization_certificate(eq: EquilibriumSolution, z: InvestmentDecision | None = None,
                              safety_margin: float = 2.0, upper: float | dict | None = None,
                              tol: float = 1e-9) -> LinearizationCertificate:
    """Build and check the exact big-M linearization at a solved point.

    The lower dual bound is 0.  The upper bound is ``safety_margin`` times the
    largest observed dual plus one, unless ``upper`` overrides it (a number
    for every family, or a per-family mapping).
    """
    if safety_margin < 1:
        raise ValueError("safety margin must be at least 1")
    z = z or eq.decision
    zz = z.z  # (S, Y)
    Rd = np.asarray(z.sizes, dtype=float)
    lam, xs, xh, lo, hi, res, exact = {}, {}, {}, {}, {}, {}, {}
    violations = []
    for fam in LINEARIZED_FAMILIES:
        l = np.asarray(eq.dual[f"lam_{fam}_j"], dtype=float)
        lam[fam] = l
        lo[fam] = 0.0
        if upper is None:
            hi[fam] = safety_margin * (float(l.max()) if l.size else 0.0) + 1.0
        elif isinstance(upper, dict):
            hi[fam] = float(upper[fam])
        else:
            hi[fam] = float(upper)
        prod = l[..., None] * Rd  # (M, T, S, Y)
        x = prod * zz
        x_hat = prod * (1.0 - zz)
        xs[fam], xh[fam] = x, x_hat
        scale = 1.0 + hi[fam] * (Rd.max() if Rd.size else 0.0)
        zR = zz * Rd
        res[fam] = {
            "definition": _amax(x - (prod - x_hat)) / scale,
            "x-lower": _pos(zR * lo[fam] - x) / scale,
            "x-upper": _pos(x - zR * hi[fam]) / scale,
            "xhat-lower": _pos((1.0 - zz) * Rd * lo[fam] - x_hat) / scale,
            "xhat-upper": _pos(x_hat - (1.0 - zz) * Rd * hi[fam]) / scale,
        }
        # selected branch carries the product, the other branch vanishes
        exact[fam] = max(_amax(x.sum(axis=-1) - l * np.asarray(z.capacity)),
                         _amax(x * (1.0 - zz)), _amax(x_hat * zz)) / scale
        for m, t, k in zip(*np.nonzero(l > hi[fam])):
            violations.append((fam, "upper", int(m), int(t), int(k), float(l[m, t, k])))
        for m, t, k in zip(*np.nonzero(l < lo[fam] - tol * scale)):
            violations.append((fam, "lower", int(m), int(t), int(k), float(l[m, t, k])))
    return LinearizationCertificate(lam, xs, xh, lo, hi, res, exact, violations, tol)
