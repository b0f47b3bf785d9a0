import json

import numpy as np
import pytest

from storinvest.equilibrium import solve_market
from storinvest.io import (
    REGIME_ORDER,
    REPORT_COLUMNS,
    RunManifest,
    delta_rows,
    emit_report,
    fixture_path,
    load_scenario,
    load_solution,
    read_csv_rows,
    run_directory,
    run_is_complete,
    save_scenario,
    save_solution,
    scenario_from_dict,
    scenarios_equal,
    write_json,
)
from storinvest.model import InvestmentDecision, ScenarioError
from storinvest.verify import certify


def fixture_dict(name="three_node"):
    return json.loads(fixture_path(name).read_text())


class TestFixtures:
    def test_edf_nuclear(self):
        s = load_scenario("western_europe")
        n2 = s.node_index("n2")
        edf = [u for u in s.units if u.producer == "EDF" and u.node == n2]
        assert max(u.capacity for u in edf) == pytest.approx(63_100.0)

    def test_lignite(self):
        s = load_scenario("western_europe")
        lignite = [u for u in s.units if u.cost == 30.0 and u.emission == 0.94]
        assert lignite

    def test_western_europe_catalog(self):
        cat = load_scenario("western_europe").catalog
        assert len(cat.sizes) == 2 and len(cat.candidates) == 7

    def test_unknown_fixture(self):
        with pytest.raises(ScenarioError, match="neither"):
            load_scenario("atlantis")


class TestScenarioParsing:
    def test_missing_slack_named(self):
        data = fixture_dict()
        del data["slack"]
        with pytest.raises(ScenarioError, match="slack"):
            scenario_from_dict(data)

    def test_unknown_node_reference(self):
        data = fixture_dict()
        data["units"][0]["node"] = "nowhere"
        with pytest.raises(ScenarioError, match="nowhere"):
            scenario_from_dict(data)

    def test_bad_grid_shape(self):
        data = fixture_dict()
        data["demand"] = {"intercept": [[1.0, 2.0]], "slope": 1.0}
        with pytest.raises(ScenarioError, match="shape"):
            scenario_from_dict(data)

    def test_json_error_has_position(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n "name": "x",\n "nodes": [1,,]\n}')
        with pytest.raises(ScenarioError, match="line 3 column"):
            load_scenario(p)

    def test_validation_failure_lists_problems(self):
        data = fixture_dict()
        data["clusters"][0]["weight"] = 0.9
        with pytest.raises(ScenarioError, match="sum"):
            scenario_from_dict(data)

    @pytest.mark.parametrize("name", ["three_node", "western_europe"])
    def test_roundtrip(self, tmp_path, name):
        s = load_scenario(name)
        back = load_scenario(save_scenario(s, tmp_path / "s.json"))
        assert scenarios_equal(s, back)
        np.testing.assert_array_equal(s.demand.intercept, back.demand.intercept)

    def test_calibrated_demand_form(self):
        data = fixture_dict()
        data["demand"] = {"q_ref": 100.0, "p_ref": 50.0, "elasticity": -0.25}
        s = scenario_from_dict(data)
        np.testing.assert_allclose(s.demand.slope, 2.0)
        np.testing.assert_allclose(s.demand.intercept, 250.0)


def row(model, sw=1.0):
    r = {c: sw for c in REPORT_COLUMNS}
    r["model"] = model
    r["z"] = "n1=0"
    return r


class TestReports:
    def test_regime_order(self, tmp_path):
        rows = [row(m) for m in ("M-CO", "SW-PC", "CP", "SW-CO", "M-PC")]
        emit_report(rows, tmp_path)
        got = [r["model"] for r in read_csv_rows(tmp_path / "report.csv")]
        assert got == list(REGIME_ORDER)

    def test_two_regimes(self, tmp_path):
        emit_report([row("M-PC"), row("CP")], tmp_path)
        data = json.loads((tmp_path / "report.json").read_text())
        assert [r["model"] for r in data["rows"]] == ["CP", "M-PC"]

    def test_deltas(self):
        rows = [row("SW-PC", 5.0)]
        out = delta_rows(rows, {"SW-PC": row("SW-PC", 2.0)})
        assert out[0]["SW"] == 3.0 and out[0]["model"] == "SW-PC"

    def test_delta_file_written(self, tmp_path):
        emit_report([row("SW-PC", 5.0)], tmp_path, baseline={"*": row("*", 1.0)})
        d = read_csv_rows(tmp_path / "report_delta.csv")
        assert float(d[0]["SW"]) == 4.0

    def test_manifest_embedded(self, tmp_path):
        m = RunManifest("invest", "three_node", "abc", regimes=["SW-PC"])
        emit_report([row("SW-PC")], tmp_path, manifest=m)
        first = (tmp_path / "report.csv").read_text().splitlines()[0]
        assert first.startswith("# manifest:")
        assert json.loads(first.split(":", 1)[1])["key"] == m.key()
        assert json.loads((tmp_path / "report.json").read_text())["manifest"]["key"] == m.key()

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            emit_report([row("CP")], blocker / "sub")

    def test_full_precision_json(self, tmp_path):
        write_json(tmp_path / "x.json", {"v": np.float64(1 / 3)})
        assert json.loads((tmp_path / "x.json").read_text())["v"] == 1 / 3


class TestManifest:
    def test_key_ignores_timestamps(self):
        a = RunManifest("solve", "three_node", "h", solver={"eps_abs": 1e-8})
        b = RunManifest("solve", "three_node", "h", solver={"eps_abs": 1e-8}, created="yesterday")
        assert a.key() == b.key()

    def test_key_tracks_settings(self):
        a = RunManifest("solve", "three_node", "h", solver={"eps_abs": 1e-8})
        b = RunManifest("solve", "three_node", "h", solver={"eps_abs": 1e-6})
        assert a.key() != b.key()

    def test_completion_marker(self, tmp_path):
        m = RunManifest("solve", "three_node", "h")
        d = run_directory(tmp_path, m)
        d.mkdir()
        assert not run_is_complete(d)
        m.finished = "now"
        write_json(d / "manifest.json", m.to_dict())
        assert run_is_complete(d)


class TestSolutions:
    def test_roundtrip_keeps_certificate(self, tmp_path):
        s = load_scenario("three_node")
        z = InvestmentDecision.from_sizes(s.catalog, {s.catalog.candidates[-1]: 100.0})
        eq = solve_market(s, "co", z)
        path = save_solution(tmp_path / "sol.json", eq, scenario_ref="three_node")
        back = load_solution(path, s)
        assert back.decision == z and back.mode == eq.mode
        for k in eq.dual:
            np.testing.assert_array_equal(back.dual[k], eq.dual[k])
        assert certify(s, back).passed

    def test_catalog_mismatch(self, tmp_path):
        s = load_scenario("three_node")
        path = save_solution(tmp_path / "sol.json", solve_market(s, "pc"))
        with pytest.raises(ScenarioError):
            load_solution(path, load_scenario("western_europe"))

    def test_wrong_format(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text('{"format": "other"}')
        with pytest.raises(ScenarioError, match="not a solution"):
            load_solution(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError, match="no such file"):
            load_solution(tmp_path / "absent.json")
