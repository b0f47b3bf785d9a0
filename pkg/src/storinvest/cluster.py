"""Representative weeks from a year of hourly demand and renewable series.

Weeks are flattened into feature vectors (region x channel x hour), grouped by
agglomerative clustering and each group is represented by the real week that
lies closest to the group centroid.  Weights are group sizes over the number
of weeks.
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage as _linkage

from .model import ScenarioError, ScenarioModel

log = logging.getLogger(__name__)

HOURS_PER_WEEK = 168
CHANNELS = ("demand", "wind", "solar")
CSV_HEADER = ("timestamp", "region", "demand_mw", "wind_availability", "solar_availability")
LINKAGES = ("ward", "complete", "average")


@dataclass(frozen=True, eq=False)
class HourlySeries:
    """Hourly series per region; every array has shape ``(regions, hours)``.

    ``demand`` is in MW.  ``wind`` and ``solar`` hold either capacity factors
    or MW output; :func:`normalize` divides by the installed capacity when one
    is supplied.
    """

    regions: tuple[str, ...]
    demand: np.ndarray
    wind: np.ndarray
    solar: np.ndarray

    def __post_init__(self):
        shape = (len(self.regions), self.hours)
        for name in CHANNELS:
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} series has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} series contains missing or non-finite values")
            object.__setattr__(self, name, arr)

    @property
    def hours(self) -> int:
        return np.asarray(self.demand).shape[1]

    @property
    def n_weeks(self) -> int:
        return self.hours // HOURS_PER_WEEK

    def channel(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def weekly(self, name: str) -> np.ndarray:
        """``(weeks, regions, 168)`` view of one channel, trailing partial week dropped."""
        w = self.n_weeks
        arr = self.channel(name)[:, : w * HOURS_PER_WEEK]
        return arr.reshape(len(self.regions), w, HOURS_PER_WEEK).transpose(1, 0, 2)

    def whole_weeks(self) -> "HourlySeries":
        extra = self.hours - self.n_weeks * HOURS_PER_WEEK
        if extra == 0:
            return self
        log.warning("dropping trailing %d hours that do not fill a whole week", extra)
        cut = self.n_weeks * HOURS_PER_WEEK
        return HourlySeries(self.regions, self.demand[:, :cut], self.wind[:, :cut], self.solar[:, :cut])


def read_hourly_csv(path) -> HourlySeries:
    """Parse the long-format CSV (one row per timestamp and region).

    Rows are ordered by timestamp within each region as they appear in the
    file; every region must cover the same number of hours.
    """
    path = Path(path)
    rows: dict[str, list[tuple[float, float, float]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ScenarioError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(CSV_HEADER):
                raise ScenarioError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
            try:
                vals = tuple(float(c) for c in rec[2:])
            except ValueError as exc:
                raise ScenarioError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise ScenarioError(f"{path}:{lineno}: non-finite value")
            rows.setdefault(rec[1].strip(), []).append(vals)
    if not rows:
        raise ScenarioError(f"{path}: no data rows")
    lengths = {r: len(v) for r, v in rows.items()}
    if len(set(lengths.values())) != 1:
        raise ScenarioError(f"{path}: regions cover different numbers of hours: {lengths}")
    regions = tuple(rows)
    data = np.array([rows[r] for r in regions])  # (R, H, 3)
    series = HourlySeries(regions, data[:, :, 0], data[:, :, 1], data[:, :, 2])
    if series.n_weeks == 0:
        raise ScenarioError(f"{path}: fewer than {HOURS_PER_WEEK} hours of data")
    return series.whole_weeks()


def normalize(series: HourlySeries, capacities: Mapping[str, Mapping[str, float]] | None = None) -> np.ndarray:
    """Week-by-feature matrix with demand scaled by its regional maximum and
    renewables by installed capacity (1.0 when no capacity is given).

    The channels are not weighted against each other.
    """
    capacities = capacities or {}
    series = series.whole_weeks()
    blocks = []
    for r, region in enumerate(series.regions):
        peak = float(series.demand[r].max())
        if not peak > 0:
            raise ScenarioError(f"region {region!r}: maximum demand is zero")
        caps = capacities.get(region, {})
        per_channel = {"demand": peak}
        for ch in ("wind", "solar"):
            cap = float(caps.get(ch, 1.0))
            if not cap > 0:
                raise ScenarioError(f"region {region!r}: installed {ch} capacity must be positive")
            per_channel[ch] = cap
        for ch in CHANNELS:
            blocks.append(series.weekly(ch)[:, r, :] / per_channel[ch])
    return np.concatenate(blocks, axis=1)


@dataclass(frozen=True, eq=False)
class ClusterResult:
    """``assignments[w]`` is the cluster of week ``w``; clusters are numbered
    by first appearance in the year."""

    assignments: np.ndarray
    representatives: np.ndarray
    weights: np.ndarray

    @property
    def k(self) -> int:
        return len(self.representatives)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == c)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "assignments": [int(a) for a in self.assignments],
            "representatives": [int(r) for r in self.representatives],
            "weights": [float(w) for w in self.weights],
            "sizes": [int(s) for s in self.sizes],
        }


def _first_appearance(labels: np.ndarray) -> np.ndarray:
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(lab)] for lab in labels], dtype=int)


def cluster_weeks(matrix, k: int, linkage: str = "ward") -> ClusterResult:
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("expected a non-empty (weeks x features) matrix")
    n = x.shape[0]
    if not (isinstance(k, (int, np.integer)) and 1 <= k <= n):
        raise ValueError(f"k must be an integer between 1 and {n}, got {k!r}")
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}; choose from {', '.join(LINKAGES)}")
    if n == 1:
        labels = np.zeros(1, dtype=int)
    else:
        tree = _linkage(x, method=linkage, metric="euclidean")
        labels = _first_appearance(cut_tree(tree, n_clusters=k).ravel())
    reps = np.empty(k, dtype=int)
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        centroid = x[idx].mean(axis=0)
        # argmin keeps the earliest week on exact ties
        reps[c] = idx[np.argmin(np.linalg.norm(x[idx] - centroid, axis=1))]
    weights = np.bincount(labels, minlength=k) / n
    return ClusterResult(labels, reps, weights)


def _week_grid(series: HourlySeries, channel: str, reps, nodes: Sequence[str], scale=None) -> list:
    """``[M][168][N]`` nested list for the representative weeks."""
    weekly = series.weekly(channel)
    out = np.zeros((len(reps), HOURS_PER_WEEK, len(nodes)))
    for j, node in enumerate(nodes):
        if node not in series.regions:
            continue
        r = series.regions.index(node)
        div = 1.0 if scale is None else scale(node)
        out[:, :, j] = weekly[reps, r, :] / div
    return out.tolist()


def reduce_scenario(series: HourlySeries, k: int, skeleton: Mapping, *,
                    capacities: Mapping[str, Mapping[str, float]] | None = None,
                    linkage: str = "ward", result: ClusterResult | None = None) -> ScenarioModel:
    """Install ``k`` representative weeks into a scenario description.

    ``skeleton`` is a scenario dictionary (file schema of ``storinvest.io``)
    without ``clusters`` or ``availability``.  Its ``demand`` entry supplies
    ``p_ref`` and ``elasticity``; reference quantities come from the chosen
    weeks.  Regions are matched to nodes by name, and every node needs data.
    """
    from .io import scenario_from_dict

    if "clusters" in skeleton:
        raise ScenarioError("skeleton already defines clusters")
    series = series.whole_weeks()
    nodes = list(skeleton.get("nodes", []))
    missing = [n for n in nodes if n not in series.regions]
    if missing:
        raise ScenarioError(f"no hourly data for node(s): {', '.join(missing)}")
    demand_spec = dict(skeleton.get("demand") or {})
    for key in ("p_ref", "elasticity"):
        if key not in demand_spec:
            raise ScenarioError(f"skeleton demand: missing required field '{key}'")
    if result is None:
        result = cluster_weeks(normalize(series, capacities), k, linkage)
    elif result.k != k:
        raise ValueError("precomputed clustering has a different k")
    reps = result.representatives
    caps = capacities or {}

    data = copy.deepcopy(dict(skeleton))
    data["clusters"] = [
        {"name": f"week{int(w) + 1}", "weight": float(wt), "durations": [1.0] * HOURS_PER_WEEK}
        for w, wt in zip(reps, result.weights)
    ]
    data["availability"] = {
        ch: _week_grid(series, ch, reps, nodes, lambda node, ch=ch: float(caps.get(node, {}).get(ch, 1.0)))
        for ch in ("wind", "solar")
    }
    data["demand"] = {
        "q_ref": _week_grid(series, "demand", reps, nodes),
        "p_ref": demand_spec["p_ref"],
        "elasticity": demand_spec["elasticity"],
    }
    return scenario_from_dict(data, source="<reduced scenario>")
