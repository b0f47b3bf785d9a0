import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import PLANTED_SIZES, planted_year
from storinvest.cluster import (
    CSV_HEADER,
    HOURS_PER_WEEK,
    HourlySeries,
    cluster_weeks,
    normalize,
    read_hourly_csv,
    reduce_scenario,
)
from storinvest.io import fixture_path
from storinvest.model import ScenarioError

H = HOURS_PER_WEEK


def flat_series(weeks=2, regions=("r1",), demand=500.0, wind=0.3, solar=0.0):
    shape = (len(regions), weeks * H)
    return HourlySeries(tuple(regions), np.full(shape, demand), np.full(shape, wind), np.full(shape, solar))


def skeleton():
    data = json.loads(fixture_path("three_node").read_text())
    for key in ("clusters", "availability"):
        data.pop(key, None)
    data["demand"] = {"p_ref": 50.0, "elasticity": -0.25}
    return data


def three_region_year(seed=0):
    series, labels = planted_year(seed, regions=("n1", "n2", "n3"))
    return series, labels


class TestNormalize:
    def test_constant_demand(self):
        x = normalize(flat_series(demand=500.0))
        assert x.shape == (2, 3 * H)
        np.testing.assert_array_equal(x[:, :H], 1.0)

    def test_capacity_scaling(self):
        x = normalize(flat_series(wind=30.0), {"r1": {"wind": 100.0}})
        np.testing.assert_allclose(x[:, H:2 * H], 0.3)

    def test_identical_regions_give_identical_blocks(self):
        one, _ = planted_year(1, regions=("a",))
        s = HourlySeries(("a", "b"), *(np.vstack([getattr(one, ch)] * 2) for ch in ("demand", "wind", "solar")))
        x = normalize(s)
        np.testing.assert_array_equal(x[:, : 3 * H], x[:, 3 * H:])

    def test_zero_demand_rejected(self):
        with pytest.raises(ScenarioError, match="zero"):
            normalize(flat_series(demand=0.0))

    def test_bad_capacity_rejected(self):
        with pytest.raises(ScenarioError):
            normalize(flat_series(), {"r1": {"solar": 0.0}})

    def test_partial_week_dropped(self, caplog):
        s = HourlySeries(("r1",), np.ones((1, H + 5)), np.zeros((1, H + 5)), np.zeros((1, H + 5)))
        assert normalize(s).shape == (1, 3 * H)
        assert "dropping trailing 5 hours" in caplog.text

    def test_missing_values_rejected(self):
        d = np.ones((1, H))
        d[0, 3] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            HourlySeries(("r1",), d, np.zeros((1, H)), np.zeros((1, H)))


class TestClusterWeeks:
    def test_every_week_its_own_cluster(self):
        x = normalize(planted_year(2)[0])
        r = cluster_weeks(x, len(x))
        assert sorted(r.representatives.tolist()) == list(range(len(x)))
        np.testing.assert_allclose(r.weights, 1.0 / len(x))

    def test_single_cluster_is_the_medoid(self):
        x = normalize(planted_year(3)[0])
        r = cluster_weeks(x, 1)
        assert r.weights.tolist() == [1.0]
        dist = np.linalg.norm(x - x.mean(axis=0), axis=1)
        assert r.representatives[0] == int(np.argmin(dist))

    @pytest.mark.parametrize("seed", range(3))
    def test_planted_partition_recovered(self, seed):
        series, labels = planted_year(seed)
        r = cluster_weeks(normalize(series), 4)
        for c in range(4):
            assert len(set(labels[r.members(c)].tolist())) == 1
        got = {int(labels[r.members(c)][0]): r.weights[c] for c in range(4)}
        for planted, size in enumerate(PLANTED_SIZES):
            assert got[planted] == pytest.approx(size / 52)

    def test_identical_weeks(self):
        x = np.ones((6, 10))
        r = cluster_weeks(x, 3)
        assert r.weights.sum() == pytest.approx(1.0)
        assert len(r.representatives) == 3

    def test_labels_by_first_appearance(self):
        r = cluster_weeks(normalize(planted_year(0)[0]), 4)
        firsts = [int(np.flatnonzero(r.assignments == c)[0]) for c in range(4)]
        assert firsts == sorted(firsts)

    @pytest.mark.parametrize("k", [0, 53, 2.5])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            cluster_weeks(np.zeros((52, 3)), k)

    def test_bad_linkage(self):
        with pytest.raises(ValueError, match="linkage"):
            cluster_weeks(np.zeros((4, 3)), 2, linkage="single")

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), weeks=st.integers(1, 30), k=st.integers(1, 30),
           linkage=st.sampled_from(["ward", "complete", "average"]))
    def test_partition_properties(self, seed, weeks, k, linkage):
        k = min(k, weeks)
        x = np.random.default_rng(seed).normal(size=(weeks, 8))
        r = cluster_weeks(x, k, linkage)
        assert r.k == k
        assert r.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(r.sizes > 0)
        for c in range(k):
            assert r.assignments[r.representatives[c]] == c

    def test_to_dict(self):
        r = cluster_weeks(normalize(planted_year(0)[0]), 4)
        d = r.to_dict()
        assert d["k"] == 4 and sum(d["sizes"]) == 52
        json.dumps(d)


class TestReadCsv:
    def write(self, tmp_path, rows, header=CSV_HEADER):
        p = tmp_path / "hourly.csv"
        lines = [",".join(header)] + [",".join(map(str, r)) for r in rows]
        p.write_text("\n".join(lines) + "\n")
        return p

    def test_roundtrip(self, tmp_path):
        rows = [(f"t{h}", reg, 100 + h, 0.5, 0.1) for reg in ("a", "b") for h in range(H)]
        s = read_hourly_csv(self.write(tmp_path, rows))
        assert s.regions == ("a", "b")
        assert s.n_weeks == 1
        assert s.demand[1, 5] == 105

    def test_bad_header(self, tmp_path):
        with pytest.raises(ScenarioError, match="header"):
            read_hourly_csv(self.write(tmp_path, [], header=("time", "zone")))

    def test_bad_value_names_the_line(self, tmp_path):
        rows = [("t0", "a", "oops", 0.1, 0.1)]
        with pytest.raises(ScenarioError, match=":2:"):
            read_hourly_csv(self.write(tmp_path, rows))

    def test_uneven_regions(self, tmp_path):
        rows = [("t", "a", 1, 0, 0)] * H + [("t", "b", 1, 0, 0)] * (H - 1)
        with pytest.raises(ScenarioError, match="different numbers"):
            read_hourly_csv(self.write(tmp_path, rows))

    def test_too_short(self, tmp_path):
        with pytest.raises(ScenarioError, match="fewer than"):
            read_hourly_csv(self.write(tmp_path, [("t", "a", 1, 0, 0)] * 10))


class TestReduceScenario:
    def test_four_clusters(self):
        series, _ = three_region_year()
        s = reduce_scenario(series, 4, skeleton())
        assert s.n_clusters == 4 and s.n_periods == H
        assert s.weights.sum() == pytest.approx(1.0)

    def test_single_cluster_uses_the_medoid_week(self):
        series, _ = three_region_year(1)
        s = reduce_scenario(series, 1, skeleton())
        r = cluster_weeks(normalize(series), 1)
        w = r.representatives[0]
        assert s.cluster_names == (f"week{w + 1}",)
        np.testing.assert_allclose(s.availability["wind"][0, :, 0], series.weekly("wind")[w, 0])

    def test_identical_weeks(self):
        series = flat_series(weeks=5, regions=("n1", "n2", "n3"), demand=400.0, wind=0.2, solar=0.1)
        s = reduce_scenario(series, 3, skeleton())
        grids = [s.demand.intercept[m] for m in range(3)]
        for g in grids[1:]:
            np.testing.assert_array_equal(g, grids[0])

    def test_skeleton_with_clusters_rejected(self):
        sk = skeleton()
        sk["clusters"] = []
        with pytest.raises(ScenarioError, match="already"):
            reduce_scenario(three_region_year()[0], 2, sk)

    def test_node_without_data(self):
        series, _ = planted_year(0, regions=("n1", "n2"))
        with pytest.raises(ScenarioError, match="n3"):
            reduce_scenario(series, 2, skeleton())
