"""Regenerate the bundled scenario fixtures in src/storinvest/data/.

    python scripts/build_fixtures.py
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DATA = Path(__file__).resolve().parents[1] / "src" / "storinvest" / "data"


def three_node() -> dict:
    """Stylized three-node market: cheap ramp-limited supply at n1, wind-heavy load at n3.

    Prices stay flat at the n1 marginal cost unless the corridor into n3
    binds, which it does only in low-wind periods.
    """
    wind_n3 = [[0.5, 0.05], [0.8, 0.3]]  # [season][period]
    return {
        "name": "three_node",
        "nodes": ["n1", "n2", "n3"],
        "slack": "n1",
        "lines": [{"from": a, "to": b, "susceptance": 1.0, "capacity": 140.0}
                  for a, b in (("n1", "n2"), ("n2", "n3"), ("n1", "n3"))],
        "clusters": [
            {"name": "m1", "weight": 0.5, "durations": [1.0, 1.0]},
            {"name": "m2", "weight": 0.5, "durations": [1.0, 1.0]},
        ],
        "producers": ["i1", "i2"],
        "units": [
            {"producer": "i1", "name": "u1", "node": "n1", "cost": 20.0, "capacity": 400.0,
             "ramp_up": 0.3, "ramp_down": 0.3, "emission": 0.9},
            {"producer": "i2", "name": "u2", "node": "n3", "cost": 45.0, "capacity": 200.0,
             "ramp_up": 1.0, "ramp_down": 1.0, "emission": 0.4},
        ],
        "vres": [
            {"producer": "i1", "kind": "wind", "node": "n2", "capacity": 60.0},
            {"producer": "i2", "kind": "wind", "node": "n3", "capacity": 300.0},
        ],
        "availability": {"wind": [[[0.3, 0.3, wind_n3[m][t]] for t in range(2)] for m in range(2)]},
        "demand": {
            "intercept": [[[60.0, 60.0, 110.0], [62.0, 62.0, 120.0]]] * 2,
            "slope": [[[0.5, 0.5, 0.25]] * 2] * 2,
        },
        "investment": {
            "investor": "j", "sizes": [0.0, 50.0, 100.0, 150.0, 200.0], "cost": 7.0,
            "candidates": ["n1", "n2", "n3"],
            "tech": {"efficiency_in": 1.0, "decay": 0.0, "rate_in": 0.5, "rate_out": 0.5},
        },
        "cost_sweep": [14.0, 10.5, 7.0, 4.2, 2.1],
    }


# -- Western European network ---------------------------------------------------------

# type: (marginal cost EUR/MWh, hourly ramp fraction, t CO2 per MWh, availability)
TECH = {
    "u1": (9.0, 0.10, 0.0, 0.80),
    "u2": (30.0, 0.10, 0.94, 0.85),
    "u3": (44.0, 0.20, 0.83, 0.84),
    "u4": (39.0, 0.30, 0.37, 0.89),
    "u5": (53.0, 0.30, 0.50, 0.86),
    "u6": (91.0, 0.70, 0.72, 0.86),
    "u7": (0.0, 0.30, 0.0, 0.30),
}
UNIT_TYPES = ("u1", "u2", "u3", "u4", "u5", "u6", "u7", "solar", "wind")

# installed GW by node group and producer, columns as UNIT_TYPES (None = not present)
FLEET = [
    (("n1",), "Uniper", (None, 0.9, 3.2, 2.7, 0.5, 1.2, None, None, 0.3)),
    (("n1",), "RWE", (2.6, 9.1, 2.8, 2.5, 1.7, None, 0.3, None, 0.3)),
    (("n1",), "EnBW", (2.7, 0.9, 3.0, 0.4, None, 0.4, 0.2, None, 0.3)),
    (("n1",), "Vattenfall", (None, None, 2.9, 0.6, 0.9, 0.1, None, None, 0.6)),
    (("n1",), "FringeD", (4.2, 7.4, 9.3, 10.9, 2.2, 0.4, 1.3, 40.1, 54.6)),
    (("n2",), "EDF", (63.1, None, 4.0, 1.4, None, 7.0, 15.0, 0.3, 1.5)),
    (("n2",), "FringeF", (None, None, None, 3.8, 2.4, None, 3.6, 6.5, 12.3)),
    (("n3", "n6"), "Electrabel", (5.9, None, None, 1.7, 1.4, None, None, None, 0.5)),
    (("n3", "n6"), "EDF Luminus", (None, None, None, 0.4, 0.4, None, None, None, 0.2)),
    (("n3", "n6"), "FringeB", (None, None, None, 1.0, None, None, None, 3.3, 2.2)),
    (("n4", "n5", "n7"), "Electrabel", (None, None, None, 2.8, 0.1, None, None, None, None)),
    (("n4", "n5", "n7"), "Essent/RWE", (None, None, 1.3, 1.9, 0.6, None, None, None, None)),
    (("n4", "n5", "n7"), "Nuon/Vattenfall", (None, None, 0.9, 3.2, 1.1, None, None, None, None)),
    (("n4", "n5", "n7"), "FringeN", (0.5, None, 2.9, 3.2, 0.7, None, None, 2.0, 4.3)),
]

# existing storage energy in GWh
STORAGE = [("Uniper", "n1", 7.0), ("RWE", "n1", 11.0), ("EnBW", "n1", 1.0), ("Vattenfall", "n1", 17.0),
           ("FringeD", "n1", 10.0), ("EDF", "n2", 34.0), ("Electrabel", "n3", 1.0), ("Electrabel", "n6", 5.0)]

COUNTRY = {"n1": "DE", "n2": "FR", "n3": "BE", "n6": "BE", "n4": "NL", "n5": "NL", "n7": "NL"}
# mean load (MW) and reference price (EUR/MWh) per country
LOAD = {"DE": (56000.0, 34.0), "FR": (55000.0, 45.0), "BE": (9500.0, 44.0), "NL": (13000.0, 39.0)}

LINES = [  # from, to, susceptance, capacity MW
    ("n1", "n8", 1.2, 3000.0), ("n8", "n2", 1.2, 3000.0),
    ("n1", "n9", 1.0, 2500.0), ("n9", "n4", 1.0, 2500.0),
    ("n1", "n10", 0.9, 2000.0), ("n10", "n5", 0.9, 2000.0),
    ("n2", "n11", 1.1, 2200.0), ("n11", "n3", 1.1, 2200.0),
    ("n2", "n12", 0.8, 1400.0), ("n12", "n6", 0.8, 1400.0),
    ("n3", "n13", 1.0, 1700.0), ("n13", "n4", 1.0, 1700.0),
    ("n6", "n14", 0.7, 1000.0), ("n14", "n7", 0.7, 1000.0),
    ("n5", "n15", 1.5, 3500.0), ("n15", "n7", 1.5, 3500.0),
    ("n3", "n6", 2.0, 3000.0), ("n4", "n5", 2.0, 4000.0),
]

# representative weeks: weight, demand level, wind level, solar level
WEEKS = [("w06", 7 / 52, 1.10, 0.16, 0.04), ("w18", 12 / 52, 0.92, 0.34, 0.16),
         ("w20", 23 / 52, 0.90, 0.14, 0.17), ("w47", 10 / 52, 1.08, 0.36, 0.05)]
BLOCK_HOURS = 4


def _hourly_profiles(rng: np.random.Generator, level_d, level_w, level_s, n_regions):
    """Synthetic 168-hour demand, wind and solar shapes for one week."""
    h = np.arange(168)
    hod = h % 24
    dow = h // 24
    daily = 1.0 + 0.15 * np.sin((hod - 8) / 24 * 2 * np.pi) + 0.05 * np.sin((hod - 18) / 12 * 2 * np.pi)
    weekly = np.where(dow >= 5, 0.88, 1.0)
    demand = level_d * daily * weekly
    wind = level_w * (1.0 + 0.6 * np.sin(h / 168 * 4 * np.pi + rng.uniform(0, 2 * np.pi, n_regions)[:, None]))
    wind = np.clip(wind + rng.normal(0, 0.02, (n_regions, 168)), 0.0, 0.95)
    solar = level_s * 3.0 * np.clip(np.sin((hod - 6) / 12 * np.pi), 0.0, None)
    solar = np.clip(np.broadcast_to(solar, (n_regions, 168)), 0.0, 0.9)
    return np.broadcast_to(demand, (n_regions, 168)), wind, solar


def western_europe(seed: int = 2017) -> dict:
    rng = np.random.default_rng(seed)
    nodes = [f"n{k}" for k in range(1, 16)]
    regions = ("DE", "FR", "BE", "NL")
    T = 168 // BLOCK_HOURS
    M = len(WEEKS)
    q_ref = np.zeros((M, T, len(nodes)))
    p_ref = np.zeros((M, T, len(nodes)))
    wind = np.zeros((M, T, len(nodes)))
    solar = np.zeros((M, T, len(nodes)))
    share = {n: 1.0 / sum(1 for v in COUNTRY.values() if v == c) for n, c in COUNTRY.items()}
    for m, (_, _, ld, lw, ls) in enumerate(WEEKS):
        d, w, s = _hourly_profiles(rng, ld, lw, ls, len(regions))
        blocks = lambda a: a.reshape(a.shape[0], T, BLOCK_HOURS)  # noqa: E731
        d_blk = blocks(d).sum(axis=2)  # load-hours per block, scaled below
        w_blk = blocks(w).mean(axis=2)
        s_blk = blocks(s).mean(axis=2)
        for k, n in enumerate(nodes):
            c = COUNTRY.get(n)
            if c is None:
                # transit nodes carry a token load so every node has a demand curve
                q_ref[m, :, k] = float(BLOCK_HOURS)
                p_ref[m, :, k] = 40.0
                continue
            r = regions.index(c)
            q_ref[m, :, k] = LOAD[c][0] * share[n] * d_blk[r]
            p_ref[m, :, k] = LOAD[c][1] * (0.85 + 0.3 * d_blk[r] / d_blk[r].max())
            wind[m, :, k] = w_blk[r]
            solar[m, :, k] = s_blk[r]

    units, vres, producers = [], [], []
    for group, producer, caps in FLEET:
        if producer not in producers:
            producers.append(producer)
        for node in group:
            for typ, gw in zip(UNIT_TYPES, caps):
                if gw is None:
                    continue
                mw = round(gw * 1000.0 / len(group), 6)
                if typ in ("solar", "wind"):
                    vres.append({"producer": producer, "kind": typ, "node": node, "capacity": mw})
                    continue
                cost, ramp, co2, avail = TECH[typ]
                units.append({"producer": producer, "name": typ, "node": node, "cost": cost,
                              "capacity": mw, "ramp_up": ramp, "ramp_down": ramp,
                              "emission": co2, "availability": avail})
    existing = {"efficiency_in": 0.75, "decay": 0.0, "rate_in": 0.16, "rate_out": 0.16}
    return {
        "name": "western_europe",
        "nodes": nodes,
        "slack": "n1",
        "lines": [{"from": a, "to": b, "susceptance": s, "capacity": c} for a, b, s, c in LINES],
        "clusters": [{"name": name, "weight": w, "durations": [float(BLOCK_HOURS)] * T}
                     for name, w, *_ in WEEKS],
        "producers": producers,
        "units": units,
        "vres": vres,
        "storage_tech": {o: dict(existing) for o in sorted({o for o, _, _ in STORAGE})},
        "storage": [{"owner": o, "node": n, "capacity": gwh * 1000.0} for o, n, gwh in STORAGE],
        "availability": {"wind": np.round(wind, 6).tolist(), "solar": np.round(solar, 6).tolist()},
        "demand": {"q_ref": np.round(q_ref, 3).tolist(), "p_ref": np.round(p_ref, 4).tolist(),
                   "elasticity": -0.25},
        "investment": {
            "investor": "j", "sizes": [0.0, 100.0], "cost": 50.0,
            "candidates": [f"n{k}" for k in range(1, 8)],
            "tech": {"efficiency_in": 0.95, "decay": 0.0, "rate_in": 0.5, "rate_out": 0.5},
        },
        "cost_sweep": [80.0, 65.0, 50.0, 35.0, 25.0, 15.0],
    }


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    for name, build in (("three_node", three_node), ("western_europe", western_europe)):
        path = DATA / f"{name}.json"
        path.write_text(json.dumps(build(), indent=1) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
