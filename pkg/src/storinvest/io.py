"""Scenario files, bundled fixtures, run manifests and report emission.

Scenario JSON schema (all energies in MWh, powers in MW, prices in EUR/MWh)::

    {
      "name": "three_node",
      "nodes": ["n1", "n2", "n3"],
      "slack": "n1",
      "lines": [{"from": "n1", "to": "n2", "susceptance": 1.0, "capacity": 40.0}],
      "clusters": [{"name": "m1", "weight": 0.5, "durations": [1, 1]}],
      "producers": ["i1", "i2"],
      "units": [{"producer": "i1", "name": "u1", "node": "n1", "cost": 20,
                 "capacity": 100, "ramp_up": 0.5, "ramp_down": 0.5,
                 "emission": 0.9, "availability": 1.0}],
      "vres": [{"producer": "i1", "kind": "wind", "node": "n2", "capacity": 50}],
      "storage_tech": {"i1": {"efficiency_in": 0.75, "decay": 0.0,
                              "rate_in": 0.16, "rate_out": 0.16}},
      "storage": [{"owner": "i1", "node": "n1", "capacity": 10.0}],
      "availability": {"wind": <grid>, "solar": <grid>},
      "demand": {"intercept": <grid>, "slope": <grid>}
             or {"q_ref": <grid>, "p_ref": <grid>, "elasticity": -0.25},
      "investment": {"investor": "j", "sizes": [0, 50], "cost": 50,
                    "candidates": ["n1"], "min_factor": 0.0,
                    "tech": {...}},
      "storage_cost": 0.0
    }

A ``<grid>`` is a scalar, a per-node list, or a nested ``[M][T][N]`` list.
"""
from __future__ import annotations

import copy
import csv
import datetime as _dt
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .model import (
    DemandCurve,
    GenerationUnit,
    InvestmentCatalog,
    ScenarioError,
    ScenarioModel,
    StorageAsset,
    StorageTech,
    VresAsset,
    build_network,
    calibrate_demand,
    validate_scenario,
)

FIXTURES = ("three_node", "western_europe")
REGIME_ORDER = ("CP", "SW-PC", "M-PC", "SW-CO", "M-CO")
REPORT_COLUMNS = ("model", "SW", "IS", "PS", "CS", "GR", "price_mean",
                  "investment_total_gwh", "investment_by_node")


class ValidationError(ScenarioError):
    """Scenario parsed but failed validation; ``problems`` lists every issue."""

    def __init__(self, problems: list[str], source: str = "<scenario>"):
        self.problems = list(problems)
        super().__init__(f"{source}: {len(problems)} problem(s):\n  " + "\n  ".join(problems))


# -- parsing ------------------------------------------------------------------------

def _need(d: Mapping, key: str, where: str):
    if key not in d:
        raise ScenarioError(f"{where}: missing required field '{key}'")
    return d[key]


def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}: expected a number, got {v!r}")
    if not math.isfinite(v):
        raise ScenarioError(f"{where}: value must be finite")
    return float(v)


def _grid(value, M: int, T: int, N: int, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: not a numeric array ({exc})") from None
    if arr.ndim == 0:
        arr = np.full((M, T, N), float(arr))
    elif arr.shape == (N,):
        arr = np.broadcast_to(arr, (M, T, N)).copy()
    elif arr.shape != (M, T, N):
        raise ScenarioError(f"{where}: shape {arr.shape} is neither scalar, ({N},) nor ({M}, {T}, {N})")
    if not np.all(np.isfinite(arr)):
        raise ScenarioError(f"{where}: values must be finite")
    return arr


def _tech(d: Mapping, where: str) -> StorageTech:
    return StorageTech(
        efficiency_in=_num(_need(d, "efficiency_in", where), f"{where}.efficiency_in"),
        decay=_num(d.get("decay", 0.0), f"{where}.decay"),
        rate_in=_num(_need(d, "rate_in", where), f"{where}.rate_in"),
        rate_out=_num(_need(d, "rate_out", where), f"{where}.rate_out"),
    )


def scenario_from_dict(data: Mapping[str, Any], source: str = "<scenario>",
                       validate: bool = True) -> ScenarioModel:
    """Build a :class:`ScenarioModel` from the JSON schema above."""
    if not isinstance(data, Mapping):
        raise ScenarioError(f"{source}: top level must be an object")
    nodes = tuple(str(n) for n in _need(data, "nodes", source))
    pos = {n: k for k, n in enumerate(nodes)}

    def node(name, where):
        if name not in pos:
            raise ScenarioError(f"{where}: unknown node {name!r}")
        return pos[name]

    lines = []
    for k, ln in enumerate(data.get("lines", [])):
        w = f"lines[{k}]"
        lines.append((_need(ln, "from", w), _need(ln, "to", w),
                      _num(_need(ln, "susceptance", w), f"{w}.susceptance"),
                      _num(_need(ln, "capacity", w), f"{w}.capacity")))
    network = build_network(nodes, lines, _need(data, "slack", source))

    clusters = _need(data, "clusters", source)
    if not clusters:
        raise ScenarioError(f"{source}: at least one cluster required")
    names, weights, durations = [], [], []
    for k, c in enumerate(clusters):
        w = f"clusters[{k}]"
        names.append(str(c.get("name", f"m{k + 1}")))
        weights.append(_num(_need(c, "weight", w), f"{w}.weight"))
        durations.append([_num(x, f"{w}.durations") for x in _need(c, "durations", w)])
    if len({len(d) for d in durations}) != 1:
        raise ScenarioError(f"{source}: every cluster needs the same number of periods")
    M, T, N = len(clusters), len(durations[0]), len(nodes)

    producers = tuple(str(p) for p in data.get("producers", []))
    units = []
    for k, u in enumerate(data.get("units", [])):
        w = f"units[{k}]"
        units.append(GenerationUnit(
            producer=str(_need(u, "producer", w)),
            name=str(u.get("name", f"u{k + 1}")),
            node=node(_need(u, "node", w), w),
            cost=_num(_need(u, "cost", w), f"{w}.cost"),
            capacity=_num(_need(u, "capacity", w), f"{w}.capacity"),
            ramp_up=_num(u.get("ramp_up", 1.0), f"{w}.ramp_up"),
            ramp_down=_num(u.get("ramp_down", 1.0), f"{w}.ramp_down"),
            emission=_num(u.get("emission", 0.0), f"{w}.emission"),
            availability=_num(u.get("availability", 1.0), f"{w}.availability"),
        ))
    vres = []
    for k, a in enumerate(data.get("vres", [])):
        w = f"vres[{k}]"
        vres.append(VresAsset(
            producer=str(_need(a, "producer", w)), kind=str(_need(a, "kind", w)),
            node=node(_need(a, "node", w), w),
            capacity=_num(_need(a, "capacity", w), f"{w}.capacity"),
        ))
    tech = {str(o): _tech(t, f"storage_tech.{o}") for o, t in data.get("storage_tech", {}).items()}
    storage = []
    for k, st in enumerate(data.get("storage", [])):
        w = f"storage[{k}]"
        storage.append(StorageAsset(
            owner=str(_need(st, "owner", w)), node=node(_need(st, "node", w), w),
            capacity=_num(_need(st, "capacity", w), f"{w}.capacity"),
            min_factor=_num(st.get("min_factor", 0.0), f"{w}.min_factor"),
        ))

    avail_raw = data.get("availability", {})
    kinds = sorted({a.kind for a in vres} | set(avail_raw))
    availability = {}
    for kind in kinds:
        arr = _grid(avail_raw.get(kind, 0.0), M, T, N, f"availability.{kind}")
        arr.setflags(write=False)
        availability[kind] = arr

    dem = _need(data, "demand", source)
    if "intercept" in dem or "slope" in dem:
        dint = _grid(_need(dem, "intercept", "demand"), M, T, N, "demand.intercept")
        dslp = _grid(_need(dem, "slope", "demand"), M, T, N, "demand.slope")
    else:
        q_ref = _grid(_need(dem, "q_ref", "demand"), M, T, N, "demand.q_ref")
        p_ref = _grid(_need(dem, "p_ref", "demand"), M, T, N, "demand.p_ref")
        try:
            dint, dslp = calibrate_demand(q_ref, p_ref, _num(_need(dem, "elasticity", "demand"),
                                                             "demand.elasticity"))
        except ValueError as exc:
            raise ScenarioError(f"demand: {exc}") from None
    for arr in (dint, dslp):
        arr.setflags(write=False)

    inv = data.get("investment", {})
    catalog = InvestmentCatalog(
        sizes=tuple(_num(x, "investment.sizes") for x in inv.get("sizes", [0.0])),
        cost=_num(inv.get("cost", 0.0), "investment.cost"),
        tech=_tech(inv.get("tech", {"efficiency_in": 1.0, "rate_in": 1.0, "rate_out": 1.0}),
                   "investment.tech"),
        candidates=tuple(node(n, "investment.candidates") for n in inv.get("candidates", [])),
        min_factor=_num(inv.get("min_factor", 0.0), "investment.min_factor"),
        investor=str(inv.get("investor", "j")),
    )

    w_arr = np.array(weights)
    d_arr = np.array(durations)
    for arr in (w_arr, d_arr):
        arr.setflags(write=False)
    scenario = ScenarioModel(
        name=str(data.get("name", Path(source).stem)),
        nodes=nodes, network=network, cluster_names=tuple(names),
        weights=w_arr, durations=d_arr, producers=producers,
        units=tuple(units), vres=tuple(vres), storage=tuple(storage),
        storage_tech=tech, availability=availability,
        demand=DemandCurve(dint, dslp), catalog=catalog,
        storage_cost=_num(data.get("storage_cost", 0.0), "storage_cost"),
        source=copy.deepcopy(dict(data)),
    )
    if validate:
        problems = validate_scenario(scenario)
        if problems:
            raise ValidationError(problems, source)
    return scenario


def scenario_to_dict(s: ScenarioModel) -> dict:
    """Serialize in fully expanded form; ``scenario_from_dict`` inverts it exactly."""
    names = s.nodes
    net = s.network
    tech = lambda t: {"efficiency_in": t.efficiency_in, "decay": t.decay,  # noqa: E731
                      "rate_in": t.rate_in, "rate_out": t.rate_out}
    return {
        "name": s.name,
        "nodes": list(names),
        "slack": names[net.slack],
        "lines": [{"from": names[f], "to": names[t], "susceptance": float(b), "capacity": float(c)}
                  for f, t, b, c in zip(net.from_idx, net.to_idx, net.susceptance, net.capacity)],
        "clusters": [{"name": n, "weight": float(w), "durations": [float(x) for x in d]}
                     for n, w, d in zip(s.cluster_names, s.weights, s.durations)],
        "producers": list(s.producers),
        "units": [{"producer": u.producer, "name": u.name, "node": names[u.node], "cost": u.cost,
                   "capacity": u.capacity, "ramp_up": u.ramp_up, "ramp_down": u.ramp_down,
                   "emission": u.emission, "availability": u.availability} for u in s.units],
        "vres": [{"producer": a.producer, "kind": a.kind, "node": names[a.node], "capacity": a.capacity}
                 for a in s.vres],
        "storage_tech": {o: tech(t) for o, t in s.storage_tech.items()},
        "storage": [{"owner": a.owner, "node": names[a.node], "capacity": a.capacity,
                     "min_factor": a.min_factor} for a in s.storage],
        "availability": {k: np.asarray(v).tolist() for k, v in s.availability.items()},
        "demand": {"intercept": np.asarray(s.demand.intercept).tolist(),
                   "slope": np.asarray(s.demand.slope).tolist()},
        "investment": {"investor": s.catalog.investor, "sizes": list(s.catalog.sizes),
                       "cost": s.catalog.cost, "candidates": [names[c] for c in s.catalog.candidates],
                       "min_factor": s.catalog.min_factor, "tech": tech(s.catalog.tech)},
        "storage_cost": s.storage_cost,
    }


def scenarios_equal(a: ScenarioModel, b: ScenarioModel) -> bool:
    return _canon(scenario_to_dict(a)) == _canon(scenario_to_dict(b))


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def fixture_path(name: str) -> Path:
    if name not in FIXTURES:
        raise ScenarioError(f"unknown fixture {name!r}; bundled: {', '.join(FIXTURES)}")
    return Path(str(resources.files("storinvest") / "data" / f"{name}.json"))


def resolve_scenario_path(ref: str | os.PathLike) -> Path:
    """Accept a file path or the name of a bundled fixture."""
    p = Path(ref)
    if p.exists():
        return p
    if str(ref) in FIXTURES:
        return fixture_path(str(ref))
    raise ScenarioError(f"scenario {str(ref)!r} is neither a file nor a bundled fixture")


def load_scenario(ref: str | os.PathLike, validate: bool = True) -> ScenarioModel:
    path = resolve_scenario_path(ref)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(data, str(path), validate=validate)


def save_scenario(s: ScenarioModel, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scenario_to_dict(s), indent=1))
    return path


def file_hash(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- run manifests ------------------------------------------------------------------

def artifact_version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        return "0+unknown"


@dataclass
class RunManifest:
    """Everything that determines a run's results, plus wall-clock bookkeeping.

    ``key()`` hashes only the result-determining fields, so two runs with the
    same key produce identical outputs.
    """

    command: str
    scenario: str
    scenario_hash: str
    regimes: list[str] = field(default_factory=list)
    solver: dict = field(default_factory=dict)
    cost_sweep: list[float] = field(default_factory=list)
    options: dict = field(default_factory=dict)
    version: str = field(default_factory=artifact_version)
    created: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    finished: str | None = None

    def key(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if k not in ("created", "finished", "scenario")}
        return hashlib.sha256(_canon(payload).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {**asdict(self), "key": self.key()}


def run_directory(out: str | os.PathLike, manifest: RunManifest) -> Path:
    return Path(out) / f"{manifest.command}-{manifest.key()}"


def run_is_complete(run_dir: Path) -> bool:
    mf = run_dir / "manifest.json"
    if not mf.exists():
        return False
    try:
        return json.loads(mf.read_text()).get("finished") is not None
    except json.JSONDecodeError:
        return False


# -- emission -----------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def write_json(path: Path, payload) -> Path:
    # repr-based float output keeps 17 significant digits
    path.write_text(json.dumps(_jsonable(payload), indent=1, allow_nan=False))
    return path


def _display(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_csv(path: Path, rows: Iterable[Mapping], columns: Iterable[str],
              manifest: "RunManifest | None" = None) -> Path:
    """CSV rounded for display; the manifest rides along as a leading ``#`` line."""
    columns = list(columns)
    with path.open("w", newline="") as fh:
        if manifest is not None:
            fh.write("# manifest: " + json.dumps(_jsonable(manifest.to_dict()), separators=(",", ":")) + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_display(row.get(c, "")) for c in columns])
    return path


def order_rows(rows: Iterable[Mapping]) -> list[dict]:
    rank = {m: k for k, m in enumerate(REGIME_ORDER)}
    return sorted((dict(r) for r in rows), key=lambda r: (rank.get(r["model"], len(rank)), r["model"]))


def delta_rows(rows: list[dict], baseline: Mapping[str, Mapping]) -> list[dict]:
    """Row-wise ``run - baseline`` for every numeric report column."""
    out = []
    for r in rows:
        base = baseline.get(r["model"]) or baseline.get("*")
        if base is None:
            continue
        d = {"model": r["model"]}
        for c in REPORT_COLUMNS[1:-1]:
            d[c] = float(r[c]) - float(base[c])
        out.append(d)
    return out


def emit_report(rows: Iterable[Mapping], out_dir: str | os.PathLike, manifest: RunManifest | None = None,
                formats: Iterable[str] = ("json", "csv"), baseline: Mapping[str, Mapping] | None = None,
                extra: Mapping | None = None, stem: str = "report") -> list[Path]:
    """Write the regime summary table as JSON (full precision) and CSV."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir} is not writable")
    rows = order_rows(rows)
    deltas = delta_rows(rows, baseline) if baseline else []
    written = []
    formats = set(formats)
    if "json" in formats:
        payload = {"manifest": manifest.to_dict() if manifest else None, "rows": rows}
        if deltas:
            payload["delta_vs_baseline"] = deltas
        if extra:
            payload.update(extra)
        written.append(write_json(out_dir / f"{stem}.json", payload))
    if "csv" in formats:
        written.append(write_csv(out_dir / f"{stem}.csv", rows, REPORT_COLUMNS, manifest))
        if deltas:
            written.append(write_csv(out_dir / f"{stem}_delta.csv", deltas, REPORT_COLUMNS[:-1], manifest))
    return written


def read_csv_rows(path: str | os.PathLike) -> list[dict]:
    """Rows of a CSV written by :func:`write_csv`, skipping ``#`` lines."""
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


# -- solutions ----------------------------------------------------------------------

SOLUTION_FORMAT = "storinvest-solution/1"


def solution_to_dict(eq, scenario_ref: str | None = None, scenario_hash: str | None = None,
                     manifest: RunManifest | None = None) -> dict:
    d = eq.decision
    return {
        "format": SOLUTION_FORMAT,
        "manifest": manifest.to_dict() if manifest else None,
        "scenario": scenario_ref,
        "scenario_hash": scenario_hash,
        "mode": eq.mode.value,
        "decision": {"nodes": list(d.nodes), "sizes": list(d.sizes), "choice": list(d.choice)},
        "objective": eq.objective,
        "weights": eq.weights,
        "iterations": eq.iterations,
        "polished": eq.polished,
        "primal": eq.primal,
        "dual": eq.dual,
    }


def solution_from_dict(data: Mapping, scenario: ScenarioModel | None = None):
    """Rebuild an equilibrium solution; shapes are checked against ``scenario`` when given."""
    from .equilibrium import EquilibriumSolution
    from .model import InvestmentDecision
    from .qpform import CompetitionMode

    if data.get("format") != SOLUTION_FORMAT:
        raise ScenarioError(f"not a solution file (format {data.get('format')!r})")
    for key in ("mode", "decision", "primal", "dual", "objective"):
        _need(data, key, "solution")
    dec = data["decision"]
    z = InvestmentDecision(tuple(int(n) for n in dec["nodes"]), tuple(float(x) for x in dec["sizes"]),
                           tuple(int(c) for c in dec["choice"]))
    primal = {k: np.asarray(v, dtype=float) for k, v in data["primal"].items()}
    dual = {k: np.asarray(v, dtype=float) for k, v in data["dual"].items()}
    weights = np.asarray(data.get("weights") if data.get("weights") is not None
                         else (scenario.weights if scenario is not None else []), dtype=float)
    if scenario is not None:
        M, T = scenario.n_clusters, scenario.n_periods
        bad = [k for k, v in {**primal, **dual}.items() if v.shape[:2] != (M, T)]
        if bad:
            raise ScenarioError(f"solution arrays do not match the scenario's ({M}, {T}) grid: {', '.join(bad)}")
        if z.nodes != scenario.catalog.candidates or z.sizes != scenario.catalog.sizes:
            raise ScenarioError("solution decision does not match the scenario's investment catalog")
    return EquilibriumSolution(
        mode=CompetitionMode.parse(data["mode"]), decision=z, primal=primal, dual=dual,
        objective=float(data["objective"]), weights=weights,
        iterations=int(data.get("iterations", 0)), polished=bool(data.get("polished", False)),
    )


def save_solution(path: str | os.PathLike, eq, **meta) -> Path:
    return write_json(Path(path), solution_to_dict(eq, **meta))


def load_solution(path: str | os.PathLike, scenario: ScenarioModel | None = None):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return solution_from_dict(data, scenario)
