"""Assembly of the ISO market problem as a sparse convex QP.

The market maximizes gross consumer benefit minus generation and discharge
cost (plus, under Cournot oligopoly, minus the producers' extended cost
term).  It is stored in minimization form::

    min  1/2 x'Px + c'x   s.t.  A_eq x = b_eq,  A_in x <= h

Variable and row blocks are laid out family-major; inside a family the
order is cluster, period, then the family's own index (node, unit, asset).
Periods couple cyclically within each cluster for storage and ramping.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import IO

import numpy as np
import scipy.sparse as sp

from .model import InvestmentDecision, ScenarioModel


class CompetitionMode(str, enum.Enum):
    PERFECT = "pc"
    COURNOT = "co"

    @classmethod
    def parse(cls, value) -> "CompetitionMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


VAR_FAMILIES = ("q", "v", "g_conv", "g_vres", "sto_p", "in_p", "out_p", "sto_j", "in_j", "out_j")
NONNEG = tuple(f for f in VAR_FAMILIES if f != "v")
EQ_FAMILIES = ("balance", "slack", "vres-eq", "sto-balance-p", "sto-balance-j")
IN_FAMILIES = (
    "gen-cap", "ramp-up", "ramp-down",
    "sto-in-p", "sto-out-p", "sto-ub-p", "sto-lb-p",
    "sto-in-j", "sto-out-j", "sto-ub-j", "sto-lb-j",
    "line-fwd", "line-bwd",
) + tuple(f"nn-{f}" for f in NONNEG)


@dataclass(frozen=True)
class Block:
    offset: int
    shape: tuple[int, int, int]

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1] * self.shape[2]

    def index(self) -> np.ndarray:
        return self.offset + np.arange(self.size).reshape(self.shape)

    def take(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec[self.offset:self.offset + self.size]).reshape(self.shape)


def _layout(families, counts, M, T) -> dict[str, Block]:
    out, off = {}, 0
    for f in families:
        blk = Block(off, (M, T, counts[f]))
        out[f] = blk
        off += blk.size
    return out


@dataclass(eq=False)
class StandardQP:
    P: sp.csc_matrix
    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix
    h: np.ndarray
    var_map: dict[str, Block]
    eq_map: dict[str, Block]
    in_map: dict[str, Block]
    mode: CompetitionMode
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.c)

    def col(self, symbol: str, m: int, t: int, k: int) -> int:
        blk = self.var_map[symbol]
        return int(blk.index()[m, t, k])

    def symbol_of(self, col: int) -> tuple[str, int, int, int]:
        return _lookup(self.var_map, col)

    def row(self, family: str, m: int, t: int, k: int) -> tuple[str, int]:
        if family in self.eq_map:
            return "eq", int(self.eq_map[family].index()[m, t, k])
        return "in", int(self.in_map[family].index()[m, t, k])

    def family_of(self, kind: str, row: int) -> tuple[str, int, int, int]:
        return _lookup(self.eq_map if kind == "eq" else self.in_map, row)

    def structure_key(self) -> tuple:
        """Fingerprint of everything except the right-hand sides."""
        parts = []
        for mat in (self.P.tocsc(), self.A_eq.tocsr(), self.A_in.tocsr()):
            parts.append((mat.shape, hash(mat.indptr.tobytes()), hash(mat.indices.tobytes()),
                          hash(mat.data.tobytes())))
        return tuple(parts) + (hash(self.c.tobytes()),)


def _lookup(mapping: dict[str, Block], idx: int):
    for name, blk in mapping.items():
        if blk.offset <= idx < blk.offset + blk.size:
            m, t, k = np.unravel_index(idx - blk.offset, blk.shape)
            return name, int(m), int(t), int(k)
    raise IndexError(idx)


class _Triplets:
    def __init__(self):
        self.r, self.c, self.v = [], [], []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        if rows.shape != cols.shape:
            raise ValueError(f"row/column index shapes differ: {rows.shape} vs {cols.shape}")
        vals = np.broadcast_to(np.asarray(vals, dtype=float), rows.shape).ravel()
        rows = rows.ravel()
        cols = cols.ravel()
        self.r.append(rows)
        self.c.append(cols)
        self.v.append(vals)

    def matrix(self, shape, fmt="csr"):
        if self.r:
            r, c, v = np.concatenate(self.r), np.concatenate(self.c), np.concatenate(self.v)
        else:
            r = c = np.zeros(0, dtype=int)
            v = np.zeros(0)
        mat = sp.coo_matrix((v, (r, c)), shape=shape).asformat(fmt)
        mat.sum_duplicates()
        mat.eliminate_zeros()
        return mat


def check_decision(scenario: ScenarioModel, z: InvestmentDecision) -> None:
    cat = scenario.catalog
    if tuple(z.nodes) != tuple(cat.candidates):
        bad = sorted(set(z.nodes) - set(cat.candidates))
        raise ValueError(f"decision references non-candidate nodes {bad}" if bad
                         else "decision nodes do not match the candidate set")
    if tuple(z.sizes) != tuple(cat.sizes):
        raise ValueError("decision sizes do not match the catalog")


def assemble_iso_qp(scenario: ScenarioModel, mode, z: InvestmentDecision) -> StandardQP:
    mode = CompetitionMode.parse(mode)
    check_decision(scenario, z)
    s = scenario
    M, T, N = s.n_clusters, s.n_periods, s.n_nodes
    net = s.network
    U, K, L = len(s.units), len(s.vres), net.n_lines
    Sp, Sj = len(s.storage), len(s.catalog.candidates)
    counts = {"q": N, "v": N, "g_conv": U, "g_vres": K,
              "sto_p": Sp, "in_p": Sp, "out_p": Sp, "sto_j": Sj, "in_j": Sj, "out_j": Sj}
    var = _layout(VAR_FAMILIES, counts, M, T)
    eqc = {"balance": N, "slack": 1, "vres-eq": K, "sto-balance-p": Sp, "sto-balance-j": Sj}
    inc = {"gen-cap": U, "ramp-up": U, "ramp-down": U,
           "sto-in-p": Sp, "sto-out-p": Sp, "sto-ub-p": Sp, "sto-lb-p": Sp,
           "sto-in-j": Sj, "sto-out-j": Sj, "sto-ub-j": Sj, "sto-lb-j": Sj,
           "line-fwd": L, "line-bwd": L}
    inc.update({f"nn-{f}": counts[f] for f in NONNEG})
    eqm = _layout(EQ_FAMILIES, eqc, M, T)
    inm = _layout(IN_FAMILIES, inc, M, T)
    n = sum(b.size for b in var.values())
    Tt = s.durations[:, :, None]  # (M, T, 1)
    W = s.weights[:, None, None]
    prev = (np.arange(T) - 1) % T

    X = {f: var[f].index() for f in VAR_FAMILIES}
    unit_node = np.array([u.node for u in s.units], dtype=int)
    vres_node = np.array([a.node for a in s.vres], dtype=int)
    sto_node = np.array([a.node for a in s.storage], dtype=int)
    cand = np.array(s.catalog.candidates, dtype=int)
    gcap = np.array([u.effective_capacity for u in s.units])
    rup = np.array([u.ramp_up for u in s.units])
    rdn = np.array([u.ramp_down for u in s.units])
    ptech = [s.storage_tech[a.owner] for a in s.storage]
    jt = s.catalog.tech

    # objective
    c = np.zeros(n)
    c[X["q"].ravel()] = (-W * s.demand.intercept).ravel()
    cost_u = np.array([u.cost for u in s.units])
    c[X["g_conv"].ravel()] = (W * cost_u[None, None, :] * np.ones((M, T, U))).ravel()
    c[X["out_p"].ravel()] = (W * s.storage_cost * np.ones((M, T, Sp))).ravel()
    c[X["out_j"].ravel()] = (W * s.storage_cost * np.ones((M, T, Sj))).ravel()

    Pt = _Triplets()
    Pt.add(X["q"], X["q"], W * s.demand.slope)
    if mode is CompetitionMode.COURNOT:
        for node, members in producer_groups(s).items():
            coef = W[:, :, 0] * s.demand.slope[:, :, node[0]]  # (M, T)
            for fa, ka, sa in members:
                for fb, kb, sb in members:
                    Pt.add(X[fa][:, :, ka], X[fb][:, :, kb], coef * sa * sb)
    P = Pt.matrix((n, n), "csc")

    # equality block
    E = _Triplets()
    b_eq = np.zeros(sum(b.size for b in eqm.values()))
    bal = eqm["balance"].index()
    E.add(bal, X["q"], 1.0)
    E.add(bal[:, :, unit_node], X["g_conv"], -1.0)
    E.add(bal[:, :, vres_node], X["g_vres"], -1.0)
    E.add(bal[:, :, sto_node], X["out_p"], -1.0)
    E.add(bal[:, :, sto_node], X["in_p"], 1.0)
    E.add(bal[:, :, cand], X["out_j"], -1.0)
    E.add(bal[:, :, cand], X["in_j"], 1.0)
    Bn = net.B
    for a in range(N):
        for b in np.nonzero(Bn[a])[0]:
            E.add(bal[:, :, a], X["v"][:, :, b], -Tt[:, :, 0] * Bn[a, b])
    E.add(eqm["slack"].index()[:, :, 0], X["v"][:, :, net.slack], 1.0)
    ve = eqm["vres-eq"].index()
    E.add(ve, X["g_vres"], 1.0)
    b_eq[ve.ravel()] = s.vres_energy().ravel()
    for fam, sto, rin, rout, techs in (
        ("sto-balance-p", "sto_p", "in_p", "out_p", ptech),
        ("sto-balance-j", "sto_j", "in_j", "out_j", [jt] * Sj),
    ):
        rows = eqm[fam].index()
        if rows.size == 0:
            continue
        decay = np.array([tc.decay for tc in techs])
        eff = np.array([tc.efficiency_in for tc in techs])
        keep = (1.0 - decay)[None, None, :] ** Tt  # (M, T, S)
        E.add(rows, X[sto], 1.0)
        E.add(rows, X[sto][:, prev, :], -keep)
        E.add(rows, X[rin], -eff[None, None, :] * np.ones_like(keep))
        E.add(rows, X[rout], 1.0)
    A_eq = E.matrix((len(b_eq), n))

    # inequality block
    I = _Triplets()
    h = np.zeros(sum(b.size for b in inm.values()))

    def put(fam, cols, coef, rhs):
        rows = inm[fam].index()
        if rows.size == 0:
            return
        if isinstance(cols, (list, tuple)):
            for cc, cf in zip(cols, coef):
                I.add(rows, cc, cf)
        else:
            I.add(rows, cols, coef)
        h[rows.ravel()] = np.broadcast_to(rhs, rows.shape).ravel()

    g = X["g_conv"]
    put("gen-cap", g, 1.0, Tt * gcap)
    put("ramp-up", [g, g[:, prev, :]], [1.0, -1.0], Tt * rup * gcap)
    put("ramp-down", [g[:, prev, :], g], [1.0, -1.0], Tt * rdn * gcap)

    pcap = np.array([a.capacity for a in s.storage])
    pmin = np.array([a.min_factor for a in s.storage])
    p_rin = np.array([tc.rate_in for tc in ptech])
    p_rout = np.array([tc.rate_out for tc in ptech])
    put("sto-in-p", X["in_p"], 1.0, Tt * p_rin * pcap)
    put("sto-out-p", X["out_p"], 1.0, Tt * p_rout * pcap)
    put("sto-ub-p", X["sto_p"], 1.0, np.broadcast_to(pcap, (M, T, Sp)))
    put("sto-lb-p", X["sto_p"], -1.0, np.broadcast_to(-pmin * pcap, (M, T, Sp)))

    jcap = z.capacity
    put("sto-in-j", X["in_j"], 1.0, Tt * jt.rate_in * jcap)
    put("sto-out-j", X["out_j"], 1.0, Tt * jt.rate_out * jcap)
    put("sto-ub-j", X["sto_j"], 1.0, np.broadcast_to(jcap, (M, T, Sj)))
    put("sto-lb-j", X["sto_j"], -1.0, np.broadcast_to(-s.catalog.min_factor * jcap, (M, T, Sj)))

    for fam, sign in (("line-fwd", 1.0), ("line-bwd", -1.0)):
        rows = inm[fam].index()
        for l in range(L):
            for nd in np.nonzero(net.H[l])[0]:
                I.add(rows[:, :, l], X["v"][:, :, nd], sign * Tt[:, :, 0] * net.H[l, nd])
        if L:
            h[rows.ravel()] = (Tt * net.capacity[None, None, :]).ravel()
    for f in NONNEG:
        put(f"nn-{f}", X[f], -1.0, 0.0)
    A_in = I.matrix((len(h), n))

    return StandardQP(
        P=P, c=c, A_eq=A_eq, b_eq=b_eq, A_in=A_in, h=h,
        var_map=var, eq_map=eqm, in_map=inm, mode=mode,
        meta={"temporal_coupling": "cyclic", "ramp_wraps": True},
    )


def producer_groups(s: ScenarioModel) -> dict[tuple[int, str], list[tuple[str, int, float]]]:
    """Columns entering each producer's net output at each node, with signs."""
    groups: dict[tuple[int, str], list] = {}
    for k, u in enumerate(s.units):
        groups.setdefault((u.node, u.producer), []).append(("g_conv", k, 1.0))
    for k, a in enumerate(s.vres):
        groups.setdefault((a.node, a.producer), []).append(("g_vres", k, 1.0))
    for k, a in enumerate(s.storage):
        groups.setdefault((a.node, a.owner), []).append(("out_p", k, 1.0))
        groups.setdefault((a.node, a.owner), []).append(("in_p", k, -1.0))
    return dict(sorted(groups.items(), key=lambda kv: (kv[0][0], s.producers.index(kv[0][1]))))


def objective_value(qp: StandardQP, x) -> float:
    """ISO objective in maximization sense at ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (qp.n,):
        raise ValueError(f"x has shape {x.shape}, expected ({qp.n},)")
    return float(-(0.5 * x @ (qp.P @ x) + qp.c @ x))


def write_triplets(qp: StandardQP, fh: IO[str]) -> None:
    """Plain-text dump: index-map header lines then ``row col value`` triplets."""
    fh.write(f"# mode {qp.mode.value} n {qp.n} m_eq {qp.A_eq.shape[0]} m_in {qp.A_in.shape[0]}\n")
    for kind, mp in (("var", qp.var_map), ("eq", qp.eq_map), ("in", qp.in_map)):
        for name, blk in mp.items():
            fh.write(f"# {kind} {name} {blk.offset} {blk.shape[0]} {blk.shape[1]} {blk.shape[2]}\n")
    for tag, mat in (("P", qp.P), ("Aeq", qp.A_eq), ("Ain", qp.A_in)):
        coo = mat.tocoo()
        fh.write(f"## {tag}\n")
        for r, cidx, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {cidx} {float(v)!r}\n")
    for tag, vec in (("c", qp.c), ("beq", qp.b_eq), ("h", qp.h)):
        fh.write(f"## {tag}\n")
        for k, v in enumerate(vec):
            if v != 0:
                fh.write(f"{k} {float(v)!r}\n")
