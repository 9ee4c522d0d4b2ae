import json

import jsonschema
import pytest
from hypothesis import given, strategies as st

from conftest import ev_appliance, two_bus_doc
from gridtrade.grid import (Branch, Bus, DuplicateEntityError, NetworkModel, ScenarioError, SyntheticSpec,
                            builtin_scenario, dumps_scenario, generate_scenario, load_scenario,
                            loads_scenario, normalize_buses, scenario_from_dict, scenario_to_dict, schema)


def test_minimal_two_bus_file(tmp_path):
    path = tmp_path / "min.json"
    path.write_text(json.dumps(two_bus_doc()))
    scen = load_scenario(path)
    assert len(scen.aggregators) == 1
    assert len(scen.generators) == 0
    assert scen.network.slack == 1


def test_feeder123_entity_counts():
    scen = builtin_scenario("feeder123")
    assert scen.network.n == 123
    assert len(scen.generators) == 10
    assert len(scen.aggregators) == 113
    entity_buses = {a.bus for a in scen.aggregators} | {g.bus for g in scen.generators}
    assert len(entity_buses) == 123


def test_two_generators_on_one_bus_rejected():
    doc = two_bus_doc(generators=[{"bus": 1, "cost": [1, 1, 0], "p_min": 0, "p_max": 1},
                                  {"bus": 1, "cost": [1, 1, 0], "p_min": 0, "p_max": 1}])
    with pytest.raises(DuplicateEntityError):
        scenario_from_dict(doc)


def test_parse_error_reports_line():
    with pytest.raises(ScenarioError, match="line 2"):
        loads_scenario('{\n  "name": ,\n}')


def test_schema_error_names_field():
    doc = two_bus_doc()
    doc["network"]["branches"][0]["s_max"] = -1.0
    with pytest.raises(ScenarioError, match="s_max"):
        scenario_from_dict(doc)


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d["network"]["buses"][1].update(v_min=1.2), "v_min"),
    (lambda d: d["network"]["buses"][0].update(kind="generator"), "slack"),
    (lambda d: d["network"]["branches"][0].update(alpha=1.0), "alpha"),
    (lambda d: d["market"].update(xi1=0.0), "tolerance|xi1"),
    (lambda d: d["aggregators"][0].update(bus=7), "unknown bus|7"),
])
def test_invariant_violations(mutate, match):
    doc = two_bus_doc()
    mutate(doc)
    with pytest.raises(ScenarioError, match=match):
        scenario_from_dict(doc)


def _net(*kinds):
    buses = tuple(Bus(i + 1, k) for i, k in enumerate(kinds))
    branches = tuple(Branch(i, i + 1, 0.01, 0.1, 5.0) for i in range(1, len(kinds)))
    return NetworkModel(buses, branches)


def test_normalize_splits_shared_bus():
    net = _net("slack", "aggregator")
    out, remap = normalize_buses(net, [("aggregator", 2), ("generator", 2)])
    assert out.n == 3
    assert remap[("generator", 2)] == 2
    new = remap[("aggregator", 2)]
    assert out.bus(new).kind == "aggregator"
    split = [b for b in out.branches if {b.from_bus, b.to_bus} == {2, new}]
    assert len(split) == 1 and split[0].r == 0.0 and split[0].x > 0.0


def test_normalize_marks_empty_bus_virtual():
    net = _net("slack", "aggregator", "aggregator")
    out, _ = normalize_buses(net, [("aggregator", 2)])
    assert out.bus(3).kind == "virtual-aggregator"


def test_normalize_is_idempotent():
    net = _net("slack", "aggregator", "generator")
    ents = [("aggregator", 2), ("generator", 3)]
    once, remap = normalize_buses(net, ents)
    twice, remap2 = normalize_buses(once, [(k, remap[(k, b)]) for k, b in ents])
    assert once == twice
    assert all(remap2[(k, remap[(k, b)])] == remap[(k, b)] for k, b in ents)


def test_round_trip_through_json(ref5):
    again = loads_scenario(dumps_scenario(ref5))
    assert again == ref5


@pytest.mark.parametrize("name", ["ref5", "toy2", "feeder13", "feeder37", "feeder123"])
def test_shipped_scenarios_validate(name):
    scen = builtin_scenario(name)
    jsonschema.validate(scenario_to_dict(scen), schema("scenario"))


def test_generate_deterministic():
    spec = SyntheticSpec(5, 1, (10, 20))
    assert generate_scenario(spec, 42) == generate_scenario(spec, 42)


def test_generate_123_bus_population():
    scen = generate_scenario(SyntheticSpec(123, 10), 1)
    assert len(scen.generators) == 10 and len(scen.aggregators) == 113


def test_generate_rejects_impossible_spec():
    with pytest.raises(ScenarioError):
        generate_scenario(SyntheticSpec(2, 5), 0)


@given(st.integers(2, 30), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_generated_scenarios_are_valid(n, g, seed):
    g = min(g, n)
    scen = generate_scenario(SyntheticSpec(n, g, (5, 10), horizon=6), seed)
    doc = scenario_to_dict(scen)
    jsonschema.validate(doc, schema("scenario"))
    assert scenario_from_dict(doc) == scen
    assert len(scen.aggregators) + len(scen.generators) == n


def test_appliance_validation_reaches_scenario():
    doc = two_bus_doc(horizon=2, appliances=[ev_appliance(E_min=3.0, E_max=2.0)])
    with pytest.raises(ScenarioError, match="E_min"):
        scenario_from_dict(doc)
