"""Tests for scenario models, loading and dotted-key overrides."""

import json

import pytest

from dooc.controller import ControlMode
from dooc.errors import ScenarioValidationError
from dooc.models import (
    EdgeConfig,
    GraphConfig,
    apply_overrides,
    load_scenario,
    load_shipped,
    parse_scenario,
    resolve_scenario_path,
)

from .conftest import shipped_raw, single_agent_raw


class TestShippedScenario:

    def test_loads(self, example_scenario):
        assert example_scenario.n == 5
        assert [p.family for p in example_scenario.plants] == ["A", "A", "B", "B", "B"]
        assert example_scenario.controller.mode is ControlMode.OUTPUT_FEEDBACK
        assert example_scenario.integration.t_final == 100.0

    def test_load_shipped_by_name(self):
        assert load_shipped().name == "paper_sec4"

    def test_resolves_bare_file_name(self):
        assert resolve_scenario_path("paper_sec4.json").name == "paper_sec4.json"

    def test_dump_uses_file_keys(self, example_scenario):
        dumped = example_scenario.dump()
        assert dumped["graph"]["edges"][0] == {"from": 3, "to": 1, "weight": 1.0}
        assert parse_scenario(dumped) == example_scenario


class TestValidation:

    def test_edge_aliases(self):
        edge = EdgeConfig.model_validate({"from": 1, "to": 2})
        assert (edge.source, edge.target, edge.weight) == (1, 2, 1.0)

    def test_rejects_unknown_key(self):
        raw = shipped_raw()
        raw["controller"]["gain"] = 1.0
        with pytest.raises(ScenarioValidationError):
            parse_scenario(raw)

    @pytest.mark.parametrize(
        "edges",
        [
            [{"from": 1, "to": 4}],
            [{"from": 2, "to": 2}],
            [{"from": 1, "to": 2}, {"from": 1, "to": 2}],
        ],
    )
    def test_rejects_bad_edges(self, edges):
        with pytest.raises(ValueError):
            GraphConfig.model_validate({"nodes": 3, "edges": edges})

    def test_rejects_wrong_cost_count(self):
        raw = shipped_raw()
        raw["costs"].pop()
        with pytest.raises(ScenarioValidationError, match="costs"):
            parse_scenario(raw)

    def test_rejects_wrong_plant_count(self):
        raw = shipped_raw()
        raw["plants"].pop()
        with pytest.raises(ScenarioValidationError, match="plants"):
            parse_scenario(raw)

    def test_coordinator_only_needs_no_plants(self, ring_scenario):
        assert ring_scenario.plants == []

    def test_rejects_non_positive_cost_curvature(self):
        raw = single_agent_raw()
        raw["costs"][0]["q"] = 0.0
        with pytest.raises(ScenarioValidationError):
            parse_scenario(raw)

    def test_rejects_horizon_shorter_than_step(self):
        raw = single_agent_raw()
        raw["integration"]["t_final"] = 1e-4
        with pytest.raises(ScenarioValidationError, match="t_final"):
            parse_scenario(raw)


class TestOverrides:

    def test_nested_value(self):
        raw = apply_overrides(shipped_raw(), ["controller.K=100"])
        assert raw["controller"]["K"] == 100

    def test_list_index(self):
        raw = apply_overrides(shipped_raw(), ["plants.2.amplitude=0", "costs.0.b=1.5"])
        assert raw["plants"][2]["amplitude"] == 0
        assert raw["costs"][0]["b"] == 1.5

    def test_json_value(self):
        raw = apply_overrides(shipped_raw(), ["controller.gamma=[1.0, 2.0]"])
        assert raw["controller"]["gamma"] == [1.0, 2.0]

    def test_string_value(self):
        raw = apply_overrides(shipped_raw(), ["controller.mode=state-feedback"])
        assert raw["controller"]["mode"] == "state-feedback"

    @pytest.mark.parametrize(
        "override", ["controller.gain=1", "plants.9.b=1", "noequals", "graph.edges.x=1"]
    )
    def test_rejects_bad_override(self, override):
        with pytest.raises(ScenarioValidationError):
            apply_overrides(shipped_raw(), [override])

    def test_defaulted_key_can_be_set(self, tmp_path):
        path = tmp_path / "single.json"
        path.write_text(json.dumps(single_agent_raw()))
        scn = load_scenario(path, overrides=["diagnostics.settle_band=0.1"], seed=9)
        assert scn.diagnostics.settle_band == 0.1
        assert scn.seed == 9

    def test_resolved_plant_defaults_can_be_set(self, tmp_path):
        path = tmp_path / "single.json"
        path.write_text(json.dumps(single_agent_raw()))
        assert "gamma" not in single_agent_raw()["plants"][0]
        scn = load_scenario(path, overrides=["plants.0.gamma=[2.0, 1.0]"])
        assert scn.plants[0].gamma == [2.0, 1.0]

    def test_override_is_validated(self, example_scenario):
        with pytest.raises(ScenarioValidationError):
            example_scenario.with_overrides(["integration.dt=-1"])


class TestLoading:

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioValidationError, match="not found"):
            load_scenario(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{")
        with pytest.raises(ScenarioValidationError, match="not valid JSON"):
            load_scenario(path)
