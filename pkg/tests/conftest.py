import copy
import os
import sys

import pytest
from ruamel.yaml import YAML

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

SCENARIO_DIR = os.path.join(ROOT, "scenarios")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-network simulations")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-network rolling-horizon run")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TWO_BUS = {
    "schema_version": 1,
    "name": "two_bus",
    "epn": {
        "base_mva": 1.0,
        "buses": [{"id": 1, "reference": True}, {"id": 2}],
        "feeders": [{"from_bus": 1, "to_bus": 2, "r_pu": 0.0, "x_pu": 0.1}],
    },
    "participants": [
        {"id": "gen", "network": "epn", "role": "producer", "bus": 1, "q_min_mvar": -1.0, "q_max_mvar": 1.0},
        {"id": "load", "network": "epn", "role": "consumer", "bus": 2},
    ],
    "bids": {
        "gen": {"agent": "envelope", "price": 30.0, "p_min_mw": 0.0, "p_max_mw": 2.0},
        "load": {"agent": "flexible", "price": 40.0, "flexibility": 1.0, "base_mw": 0.5},
    },
    "horizon": {"steps": 2, "dt_s": 900, "span_steps": 2, "mode": "epn-only"},
}

# pump -> producer -> supply pipe -> consumer -> return pipe, one loop
LOOP_DHN = {
    "schema_version": 1,
    "name": "loop",
    "dhn": {
        "pump_mode": "fixed",
        "nodes": [
            {"id": 1, "side": "supply"},
            {"id": 2, "side": "supply"},
            {"id": 20, "side": "return"},
            {"id": 21, "side": "return"},
            {"id": 22, "side": "return"},
        ],
        "edges": [
            {"id": "pump", "from_node": 20, "to_node": 21, "kind": "controlled-pump", "head_bar": 2.0,
             "m_max_kg_s": 50.0},
            {"id": "source", "from_node": 21, "to_node": 1, "kind": "producer", "mu_bar_s2_kg2": 1.0e-3,
             "m_max_kg_s": 50.0},
            {"id": "s12", "from_node": 1, "to_node": 2, "kind": "pipeline", "length_m": 500.0, "diameter_m": 0.15,
             "roughness_mm": 0.05, "r_thermal_mk_w": 3.0, "reference_flow_kg_s": 10.0, "m_max_kg_s": 50.0},
            {"id": "sink", "from_node": 2, "to_node": 22, "kind": "consumer", "mu_bar_s2_kg2": 2.0e-3,
             "m_max_kg_s": 50.0},
            {"id": "r22", "from_node": 22, "to_node": 20, "kind": "pipeline", "length_m": 500.0, "diameter_m": 0.15,
             "roughness_mm": 0.05, "r_thermal_mk_w": 3.0, "reference_flow_kg_s": 10.0, "m_max_kg_s": 50.0},
        ],
    },
    "participants": [
        {"id": "heat_source", "network": "dhn", "role": "producer", "edge": "source"},
        {"id": "heat_sink", "network": "dhn", "role": "consumer", "edge": "sink", "curve": {"t_return_c": 50.0}},
    ],
}


def with_valve(doc):
    """Insert a control valve in front of the consumer."""
    doc = copy.deepcopy(doc)
    dhn = doc["dhn"]
    dhn["nodes"].append({"id": 3, "side": "supply"})
    sink = next(e for e in dhn["edges"] if e["id"] == "sink")
    sink["from_node"] = 3
    dhn["edges"].append({"id": "valve", "from_node": 2, "to_node": 3, "kind": "control-valve", "kvs_m3_s": 0.02,
                         "m_max_kg_s": 50.0})
    return doc


@pytest.fixture
def two_bus_doc():
    return copy.deepcopy(TWO_BUS)


@pytest.fixture
def loop_doc():
    return copy.deepcopy(LOOP_DHN)


@pytest.fixture
def valve_doc():
    return with_valve(LOOP_DHN)


def write_yaml(doc, path):
    with open(path, "w", encoding="utf-8") as f:
        YAML().dump(doc, f)
    return str(path)


@pytest.fixture
def two_bus_file(tmp_path, two_bus_doc):
    return write_yaml(two_bus_doc, tmp_path / "two_bus.yaml")
