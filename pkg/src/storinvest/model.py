"""Scenario data model: sets, network matrices, producers, demand and the
storage investment catalog.

Arrays indexed by cluster and period use the layout ``(M, T, ...)``.
Scenario objects are immutable once built; every numpy array they hold is
flagged read-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

VRES_TYPES = ("solar", "wind")
WEIGHT_TOL = 1e-12


class ScenarioError(ValueError):
    """Raised for malformed scenario input that cannot be turned into a model."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def calibrate_demand(q_ref, p_ref, elasticity: float):
    """Linear inverse demand through a reference point with a given point elasticity.

    Returns ``(intercept, slope)`` such that ``p(q) = intercept - slope * q``
    passes through ``(q_ref, p_ref)`` and ``dq/dp * p/q = elasticity`` there.
    Accepts scalars or arrays (broadcast).
    """
    q = np.asarray(q_ref, dtype=float)
    p = np.asarray(p_ref, dtype=float)
    if not elasticity < 0:
        raise ValueError(f"elasticity must be negative, got {elasticity}")
    if np.any(q <= 0):
        raise ValueError("reference quantity must be positive")
    if np.any(p <= 0):
        raise ValueError("reference price must be positive")
    slope = -p / (elasticity * q)
    intercept = p + slope * q
    if slope.ndim == 0:
        return float(intercept), float(slope)
    return intercept, slope


@dataclass(frozen=True, eq=False)
class TransmissionNetwork:
    """DC load-flow network.

    ``H`` is the line-by-node transfer matrix (``+b`` at the from-node,
    ``-b`` at the to-node) and ``B`` the node susceptance matrix
    ``sum_l b_l a_l a_l^T``.
    """

    nodes: tuple[str, ...]
    from_idx: np.ndarray
    to_idx: np.ndarray
    susceptance: np.ndarray
    capacity: np.ndarray
    B: np.ndarray
    H: np.ndarray
    slack: int

    @property
    def n_lines(self) -> int:
        return len(self.susceptance)

    def incidence(self) -> np.ndarray:
        A = np.zeros((self.n_lines, len(self.nodes)))
        A[np.arange(self.n_lines), self.from_idx] = 1.0
        A[np.arange(self.n_lines), self.to_idx] = -1.0
        return A

    def without_limits(self, capacity: float = 1e9) -> "TransmissionNetwork":
        return replace(self, capacity=_frozen(np.full(self.n_lines, capacity)))

    def scaled_limits(self, factor: float) -> "TransmissionNetwork":
        return replace(self, capacity=_frozen(self.capacity * factor))


def build_network(nodes: Sequence[str], lines: Iterable, slack) -> TransmissionNetwork:
    """Build B and H from ``(from, to, susceptance, capacity)`` tuples.

    ``slack`` is a node name or index; pass exactly one.
    """
    nodes = tuple(nodes)
    pos = {n: k for k, n in enumerate(nodes)}
    if len(pos) != len(nodes):
        raise ScenarioError("duplicate node names")
    if isinstance(slack, (list, tuple)):
        if len(slack) != 1:
            raise ScenarioError(f"exactly one slack node required, got {list(slack)}")
        slack = slack[0]
    slack_idx = pos.get(slack, slack) if not isinstance(slack, (int, np.integer)) else int(slack)
    if not isinstance(slack_idx, (int, np.integer)) or not 0 <= slack_idx < len(nodes):
        raise ScenarioError(f"unknown slack node {slack!r}")

    fr, to, b, cap = [], [], [], []
    for k, (f, t, s, c) in enumerate(lines):
        if f not in pos or t not in pos:
            raise ScenarioError(f"line {k}: unknown endpoint {f!r}->{t!r}")
        if f == t:
            raise ScenarioError(f"line {k}: self loop at {f!r}")
        if not s > 0:
            raise ScenarioError(f"line {k}: susceptance must be positive, got {s}")
        fr.append(pos[f])
        to.append(pos[t])
        b.append(float(s))
        cap.append(float(c))
    fr_a = np.array(fr, dtype=int)
    to_a = np.array(to, dtype=int)
    b_a = np.array(b)

    n = len(nodes)
    # connectivity via union-find
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for f, t in zip(fr, to):
        parent[find(f)] = find(t)
    if len({find(i) for i in range(n)}) > 1:
        raise ScenarioError("network graph is disconnected")

    L = len(b)
    H = np.zeros((L, n))
    H[np.arange(L), fr_a] = b_a
    H[np.arange(L), to_a] = -b_a
    A = np.zeros((L, n))
    A[np.arange(L), fr_a] = 1.0
    A[np.arange(L), to_a] = -1.0
    B = A.T @ (b_a[:, None] * A)
    return TransmissionNetwork(
        nodes=nodes,
        from_idx=_frozen(fr_a, int),
        to_idx=_frozen(to_a, int),
        susceptance=_frozen(b_a),
        capacity=_frozen(cap),
        B=_frozen(B),
        H=_frozen(H),
        slack=int(slack_idx),
    )


@dataclass(frozen=True)
class GenerationUnit:
    producer: str
    name: str
    node: int
    cost: float
    capacity: float
    ramp_up: float
    ramp_down: float
    emission: float = 0.0
    availability: float = 1.0

    @property
    def effective_capacity(self) -> float:
        """Installed capacity derated by availability (MW)."""
        return self.availability * self.capacity


@dataclass(frozen=True)
class VresAsset:
    producer: str
    kind: str
    node: int
    capacity: float


@dataclass(frozen=True)
class StorageTech:
    efficiency_in: float
    decay: float
    rate_in: float
    rate_out: float


@dataclass(frozen=True)
class StorageAsset:
    """Existing producer-owned storage at one node."""

    owner: str
    node: int
    capacity: float
    min_factor: float = 0.0


@dataclass(frozen=True)
class InvestmentCatalog:
    sizes: tuple[float, ...]
    cost: float
    tech: StorageTech
    candidates: tuple[int, ...]
    min_factor: float = 0.0
    investor: str = "j"


@dataclass(frozen=True)
class InvestmentDecision:
    """One discrete size per candidate node.

    ``choice[k]`` indexes ``sizes`` for candidate ``nodes[k]``; the one-hot
    matrix ``z`` therefore always has unit row sums.
    """

    nodes: tuple[int, ...]
    sizes: tuple[float, ...]
    choice: tuple[int, ...]

    def __post_init__(self):
        if len(self.nodes) != len(self.choice):
            raise ValueError("one choice per candidate node required")
        for c in self.choice:
            if not 0 <= c < len(self.sizes):
                raise ValueError(f"size index {c} out of range")

    @classmethod
    def zero(cls, catalog: InvestmentCatalog) -> "InvestmentDecision":
        return cls(catalog.candidates, catalog.sizes, (0,) * len(catalog.candidates))

    @classmethod
    def from_sizes(cls, catalog: InvestmentCatalog, sizes: Mapping[int, float]) -> "InvestmentDecision":
        """Decision from ``{node_index: MWh}``; unlisted candidates get size 0."""
        choice = [0] * len(catalog.candidates)
        for node, mwh in sizes.items():
            if node not in catalog.candidates:
                raise ValueError(f"node {node} is not an investment candidate")
            matches = [y for y, s in enumerate(catalog.sizes) if abs(s - mwh) <= 1e-9 * max(1.0, abs(s))]
            if not matches:
                raise ValueError(f"{mwh} MWh is not a catalog size {catalog.sizes}")
            choice[catalog.candidates.index(node)] = matches[0]
        return cls(catalog.candidates, catalog.sizes, tuple(choice))

    @classmethod
    def from_z(cls, catalog: InvestmentCatalog, z) -> "InvestmentDecision":
        z = np.asarray(z)
        if z.shape != (len(catalog.candidates), len(catalog.sizes)):
            raise ValueError(f"z must have shape {(len(catalog.candidates), len(catalog.sizes))}")
        if not np.all((z == 0) | (z == 1)) or not np.all(z.sum(axis=1) == 1):
            raise ValueError("each candidate needs exactly one selected size")
        return cls(catalog.candidates, catalog.sizes, tuple(int(k) for k in z.argmax(axis=1)))

    @property
    def z(self) -> np.ndarray:
        out = np.zeros((len(self.nodes), len(self.sizes)))
        out[np.arange(len(self.nodes)), list(self.choice)] = 1.0
        return out

    @property
    def capacity(self) -> np.ndarray:
        """Installed investor capacity per candidate node, ``sum_y z R^d_y`` (MWh)."""
        return np.array([self.sizes[c] for c in self.choice], dtype=float)

    @property
    def total(self) -> float:
        return float(self.capacity.sum())

    def label(self, node_names: Sequence[str] | None = None) -> str:
        names = node_names or [str(n) for n in range(max(self.nodes, default=-1) + 1)]
        parts = [f"{names[n]}={self.sizes[c]:g}" for n, c in zip(self.nodes, self.choice)]
        return ";".join(parts) if parts else "-"


@dataclass(frozen=True, eq=False)
class DemandCurve:
    intercept: np.ndarray
    slope: np.ndarray


@dataclass(frozen=True, eq=False)
class ScenarioModel:
    """Full market description. See ``storinvest.io`` for the file schema."""

    name: str
    nodes: tuple[str, ...]
    network: TransmissionNetwork
    cluster_names: tuple[str, ...]
    weights: np.ndarray
    durations: np.ndarray
    producers: tuple[str, ...]
    units: tuple[GenerationUnit, ...]
    vres: tuple[VresAsset, ...]
    storage: tuple[StorageAsset, ...]
    storage_tech: Mapping[str, StorageTech]
    availability: Mapping[str, np.ndarray]
    demand: DemandCurve
    catalog: InvestmentCatalog
    storage_cost: float = 0.0
    source: Mapping = field(default_factory=dict, repr=False)

    @property
    def n_clusters(self) -> int:
        return len(self.weights)

    @property
    def n_periods(self) -> int:
        return self.durations.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def node_index(self, name: str) -> int:
        return self.nodes.index(name)

    def with_cost(self, cost: float) -> "ScenarioModel":
        return replace(self, catalog=replace(self.catalog, cost=float(cost)))

    def with_network(self, network: TransmissionNetwork) -> "ScenarioModel":
        return replace(self, network=network)

    def vres_energy(self) -> np.ndarray:
        """Fixed VRES output ``T_t A^e Gbar^e`` per asset, shape (M, T, K)."""
        out = np.zeros((self.n_clusters, self.n_periods, len(self.vres)))
        for k, a in enumerate(self.vres):
            out[:, :, k] = self.durations * self.availability[a.kind][:, :, a.node] * a.capacity
        return out


def validate_scenario(s: ScenarioModel) -> list[str]:
    """Return every invariant violation found; an empty list means valid."""
    problems: list[str] = []
    w = np.asarray(s.weights)
    if w.ndim != 1 or len(w) == 0:
        problems.append("clusters: at least one cluster required")
    else:
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            problems.append(f"clusters: weights sum to {w.sum():.15g}, expected 1")
        if np.any(w <= 0):
            problems.append("clusters: every weight must be positive")
    if np.any(np.asarray(s.durations) <= 0):
        problems.append("clusters: every period duration must be positive")

    net = s.network
    if np.any(net.capacity <= 0):
        problems.append("lines: every capacity must be positive")
    if net.n_lines:
        nz = (net.H != 0).sum(axis=1)
        if np.any(nz != 2) or np.any(np.abs(net.H.sum(axis=1)) > 1e-12):
            problems.append("lines: transfer matrix rows must hold +b/-b at the endpoints")
    if not np.allclose(net.B, net.B.T) or np.any(np.abs(net.B.sum(axis=1)) > 1e-9):
        problems.append("lines: susceptance matrix must be symmetric with zero row sums")

    cat = s.catalog
    if cat.investor in s.producers:
        problems.append(f"investment: investor {cat.investor!r} must not be a producer")
    if not cat.sizes or cat.sizes[0] != 0:
        problems.append("investment: first catalog size must be exactly 0")
    if any(b <= a for a, b in zip(cat.sizes, cat.sizes[1:])):
        problems.append("investment: sizes must be strictly increasing")
    if cat.cost < 0:
        problems.append("investment: cost must be non-negative")
    if len(set(cat.candidates)) != len(cat.candidates):
        problems.append("investment: duplicate candidate nodes")
    if any(not 0 <= c < s.n_nodes for c in cat.candidates):
        problems.append("investment: candidate outside node set")
    problems += _tech_problems("investment tech", cat.tech)
    if not 0 <= cat.min_factor < 1:
        problems.append("investment: minimum storage factor must lie in [0, 1)")

    for u in s.units:
        tag = f"unit {u.producer}/{u.name}"
        if u.producer not in s.producers:
            problems.append(f"{tag}: unknown producer")
        if u.cost < 0:
            problems.append(f"{tag}: negative cost")
        if u.capacity < 0:
            problems.append(f"{tag}: negative capacity")
        if not (0 < u.ramp_up <= 1 and 0 < u.ramp_down <= 1):
            problems.append(f"{tag}: ramp rates must lie in (0, 1]")
        if not 0 <= u.availability <= 1:
            problems.append(f"{tag}: availability must lie in [0, 1]")
    for a in s.vres:
        if a.kind not in VRES_TYPES:
            problems.append(f"vres {a.producer}: unknown type {a.kind!r}")
        if a.capacity < 0:
            problems.append(f"vres {a.producer}/{a.kind}: negative capacity")
    for kind, arr in s.availability.items():
        if np.any(arr < 0) or np.any(arr > 1):
            problems.append(f"availability {kind}: factors must lie in [0, 1]")
    for st in s.storage:
        if st.owner not in s.producers:
            problems.append(f"storage at node {st.node}: unknown owner {st.owner!r}")
        elif st.owner not in s.storage_tech:
            problems.append(f"storage {st.owner}: missing storage technology")
        if st.capacity < 0:
            problems.append(f"storage {st.owner}: negative capacity")
        if not 0 <= st.min_factor < 1:
            problems.append(f"storage {st.owner}: minimum factor must lie in [0, 1)")
    for owner, tech in s.storage_tech.items():
        problems += _tech_problems(f"storage tech {owner}", tech)

    d = s.demand
    if np.any(d.slope <= 0):
        problems.append("demand: every slope must be positive")
    if np.any(d.intercept <= 0):
        problems.append("demand: every intercept must be positive")
    return problems


def _tech_problems(tag: str, tech: StorageTech) -> list[str]:
    out = []
    if not 0 < tech.efficiency_in <= 1:
        out.append(f"{tag}: input efficiency must lie in (0, 1]")
    if not 0 <= tech.decay < 1:
        out.append(f"{tag}: decay must lie in [0, 1)")
    if not (0 < tech.rate_in <= 1 and 0 < tech.rate_out <= 1):
        out.append(f"{tag}: charge/discharge rates must lie in (0, 1]")
    return out
