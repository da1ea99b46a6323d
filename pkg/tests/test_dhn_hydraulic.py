import numpy as np
import pytest

from core.dhn_hydraulic import (HydraulicState, component_pressure_residual, continuity_residual,
                                control_path_residual, hydraulic_inequality_set, loop_residual, pressure_law,
                                steady_flow_estimate)
from core.network_model import EdgeKind, load_network


def _steady_loop(network):
    """Single series loop: the pump head equals the sum of the quadratic drops."""
    quad = [e for e in network.edges if e.kind != EdgeKind.PUMP]
    m = np.sqrt(2.0 / sum(e.mu for e in quad))
    state = HydraulicState.zeros(network)
    state.m[:, 0] = m
    for i, edge in enumerate(network.edges):
        if edge.kind == EdgeKind.PUMP:
            state.head[i, 0] = 2.0
            state.dp[i, 0] = -2.0
        else:
            state.dp[i, 0] = pressure_law(network, i, m)
    return state


def test_steady_loop_satisfies_all_laws(loop_doc):
    network = load_network(loop_doc)
    state = _steady_loop(network)
    np.testing.assert_allclose(continuity_residual(state, network, 0), 0.0, atol=1e-12)
    np.testing.assert_allclose(loop_residual(state, network, 0), 0.0, atol=1e-12)
    np.testing.assert_allclose(component_pressure_residual(state, network, 0), 0.0, atol=1e-12)
    assert control_path_residual(state, network, 0).size == 0
    assert np.all(hydraulic_inequality_set(state, network, 0) >= 0)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_pressure_drops_from_node_pressures_close_every_loop(valve_doc, seed):
    """Δp derived from any node potential sums to zero around every loop."""
    network = load_network(valve_doc)
    pressure = np.random.default_rng(seed).normal(5.0, 2.0, len(network.nodes))
    src, dst = network.edge_endpoints
    state = HydraulicState.zeros(network)
    state.dp[:, 0] = pressure[src] - pressure[dst]
    np.testing.assert_allclose(loop_residual(state, network, 0), 0.0, atol=1e-12)


def test_continuity_detects_imbalance(loop_doc):
    network = load_network(loop_doc)
    state = _steady_loop(network)
    state.m[network.edge_index["s12"], 0] += 1.0
    residual = continuity_residual(state, network, 0)
    assert residual[network.node_index[2]] == pytest.approx(1.0)
    assert residual[network.node_index[1]] == pytest.approx(-1.0)


def test_valve_law(valve_doc):
    network = load_network(valve_doc)
    e = network.edge_index["valve"]
    rho = network.water.rho
    assert pressure_law(network, e, 2.0, 0.01) == pytest.approx(4.0 / (1e-4 * 1000.0 * rho))
    # fully open by default
    assert pressure_law(network, e, 2.0) == pytest.approx(4.0 / (0.02 ** 2 * 1000.0 * rho))


def test_valve_residual_forms_agree_at_a_solution(valve_doc):
    network = load_network(valve_doc)
    e = network.edge_index["valve"]
    state = HydraulicState.zeros(network)
    state.m[e, 0] = 3.0
    state.kv[e, 0] = 0.015
    state.dp[e, 0] = pressure_law(network, e, 3.0, 0.015)
    plain = component_pressure_residual(state, network, 0)
    smooth = component_pressure_residual(state, network, 0, smooth_valves=True)
    assert plain[e] == pytest.approx(0.0, abs=1e-12)
    assert smooth[e] == pytest.approx(0.0, abs=1e-12)

    state.dp[e, 0] += 0.1
    assert component_pressure_residual(state, network, 0)[e] == pytest.approx(0.1)
    expected = 0.015 ** 2 * 1000.0 * network.water.rho * 0.1
    assert component_pressure_residual(state, network, 0, smooth_valves=True)[e] == pytest.approx(expected)


def test_pump_adds_its_head(loop_doc):
    network = load_network(loop_doc)
    e = network.edge_index["pump"]
    state = HydraulicState.zeros(network)
    state.head[e, 0] = 1.5
    assert component_pressure_residual(state, network, 0)[e] == pytest.approx(1.5)
    state.dp[e, 0] = -1.5
    assert component_pressure_residual(state, network, 0)[e] == pytest.approx(0.0)


def test_pump_has_no_flow_law(loop_doc):
    network = load_network(loop_doc)
    with pytest.raises(ValueError):
        pressure_law(network, network.edge_index["pump"], 1.0)


def test_steady_flow_estimate_keeps_pinned_flows(valve_doc):
    network = load_network(valve_doc)
    m = steady_flow_estimate(network, {"sink": 7.5})
    np.testing.assert_allclose(m, 7.5, atol=1e-8)
    state = HydraulicState.zeros(network)
    state.m[:, 0] = m
    np.testing.assert_allclose(continuity_residual(state, network, 0), 0.0, atol=1e-8)
