import numpy as np
import pytest

from core.bid_agents import collect_bids
from core.dhn_hydraulic import component_pressure_residual, control_path_residual, loop_residual
from core.dhn_thermal import ThermalHistory, compute_omega, required_depth
from core.isoems import HorizonConfig
from core.market import EnergyWindow, ParticipantBid, Side
from core.network_model import EdgeKind, NetworkSide, load_network
from core.problem_builder import (BuildOptions, assemble, default_guess, dispatch_values, hydraulic_values, shift_values,
                                  solution_values)
from core.scenario_io import load_scenario
from core.nlp_core import gradient_check
from core.utils.errors import ConfigurationError

from conftest import SCENARIO_DIR

H = 2


def _bid(pid, network, side, price, p_min, p_max):
    return ParticipantBid(participant=pid, network=network, side=side, price=np.full(H, price),
                          p_min=np.full(H, p_min), p_max=np.full(H, p_max))


def _two_bus_problem(doc):
    network = load_network(doc)
    bids = {"gen": _bid("gen", NetworkSide.EPN, Side.OFFER, 30.0, 0.0, 2.0),
            "load": _bid("load", NetworkSide.EPN, Side.BID, 40.0, 0.0, 0.5)}
    horizon = HorizonConfig(steps=H, span=1, mode="epn-only")
    return network, assemble(network, bids, {}, None, None, horizon, BuildOptions(include_dhn=False))


def _loop_problem(doc):
    network = load_network(doc)
    bids = {"heat_source": _bid("heat_source", NetworkSide.DHN, Side.OFFER, 20.0, 0.0, 3.0),
            "heat_sink": _bid("heat_sink", NetworkSide.DHN, Side.BID, 50.0, 0.5, 2.0)}
    history = ThermalHistory.steady(network, [363.15, 323.15], 20.0, depth=required_depth(network, H, 900.0),
                                    dt=900.0)
    omega = compute_omega(np.full((2, H), 20.0), network, history)
    horizon = HorizonConfig(steps=H, span=1, mode="dhn-only")
    options = BuildOptions(include_epn=False, t_ambient=np.full(H, 283.15))
    return network, assemble(network, bids, {"ambient_k": np.full(H, 283.15)}, history, omega, horizon, options)


def test_two_bus_layout(two_bus_doc):
    network, problem = _two_bus_problem(two_bus_doc)
    assert list(problem.layout.families) == ["epn.V", "epn.delta", "epn.P.gen", "epn.Q.gen", "epn.P.load"]
    assert "epn.balance" in problem.row_slices
    # one P and one Q row per bus and step
    assert problem.row_slices["epn.balance"].stop - problem.row_slices["epn.balance"].start == 2 * 2 * H
    assert problem.meta["include_epn"] and not problem.meta["include_dhn"]


def test_reference_angle_is_pinned(two_bus_doc):
    _, problem = _two_bus_problem(two_bus_doc)
    assert "fixed" in problem.row_slices
    pinned = problem.block_residual(problem.x0, "fixed")
    np.testing.assert_allclose(pinned, 0.0)
    assert pinned.size == H


def test_injections_are_priced_per_unit(two_bus_doc):
    two_bus_doc["epn"]["base_mva"] = 10.0
    two_bus_doc["epn"]["feeders"][0]["x_pu"] = 0.01
    network, problem = _two_bus_problem(two_bus_doc)
    layout = problem.layout
    np.testing.assert_allclose(problem.objective[layout.indices("epn.P.gen")], 300.0)
    np.testing.assert_allclose(problem.objective[layout.indices("epn.P.load")], 400.0)
    # consumers inject negative power
    np.testing.assert_allclose(layout.lower[layout.indices("epn.P.load")], -0.05)
    np.testing.assert_allclose(layout.upper[layout.indices("epn.P.load")], 0.0)
    # reactive limits are given in MVAr
    np.testing.assert_allclose(layout.lower[layout.indices("epn.Q.gen")], -0.1)
    np.testing.assert_allclose(layout.upper[layout.indices("epn.Q.gen")], 0.1)


@pytest.mark.parametrize("seed", [0, 1])
def test_epn_derivatives(two_bus_doc, seed):
    _, problem = _two_bus_problem(two_bus_doc)
    assert gradient_check(problem, seed=seed, check_hessian=True) < 1e-5


def test_dhn_layout(loop_doc):
    network, problem = _loop_problem(loop_doc)
    families = set(problem.layout.families)
    assert {"dhn.m", "dhn.dp", "dhn.T", "dhn.T_out", "dhn.phi.heat_source", "dhn.phi.heat_sink"} <= families
    assert not any(name.startswith("epn.") for name in families)
    assert "dhn.mixing" in problem.row_slices
    assert problem.meta["dof"] == {"unknowns": 10, "equalities": 10, "setpoints": 0}
    assert problem.m_eq <= problem.n


def test_unbounded_heat_variables_are_not_pinned(loop_doc):
    # Δp and outlet temperatures carry no bounds on the loop network
    _, problem = _loop_problem(loop_doc)
    layout = problem.layout
    assert np.all(np.isinf(layout.lower[layout.indices("dhn.dp")]))
    assert "fixed" not in problem.row_slices


@pytest.mark.parametrize("seed", [0, 1])
def test_dhn_derivatives(loop_doc, seed):
    _, problem = _loop_problem(loop_doc)
    assert gradient_check(problem, seed=seed, check_hessian=True) < 1e-4


def test_dhn_needs_history(loop_doc):
    network = load_network(loop_doc)
    bids = {"heat_source": _bid("heat_source", NetworkSide.DHN, Side.OFFER, 20.0, 0.0, 3.0),
            "heat_sink": _bid("heat_sink", NetworkSide.DHN, Side.BID, 50.0, 0.5, 2.0)}
    with pytest.raises(ConfigurationError, match="thermal history"):
        assemble(network, bids, {}, None, None, HorizonConfig(steps=H, span=1, mode="dhn-only"),
                 BuildOptions(include_epn=False))


def test_bids_must_match_the_horizon(two_bus_doc):
    network = load_network(two_bus_doc)
    bids = {"gen": _bid("gen", NetworkSide.EPN, Side.OFFER, 30.0, 0.0, 2.0),
            "load": _bid("load", NetworkSide.EPN, Side.BID, 40.0, 0.0, 0.5)}
    with pytest.raises(ConfigurationError, match="horizon has 3"):
        assemble(network, bids, {}, None, None, HorizonConfig(steps=3, span=1, mode="epn-only"),
                 BuildOptions(include_dhn=False))


def test_nothing_to_optimise(two_bus_doc):
    network = load_network(two_bus_doc)
    bids = {"gen": _bid("gen", NetworkSide.EPN, Side.OFFER, 30.0, 0.0, 2.0),
            "load": _bid("load", NetworkSide.EPN, Side.BID, 40.0, 0.0, 0.5)}
    with pytest.raises(ConfigurationError, match="nothing to optimise"):
        assemble(network, bids, {}, None, None, HorizonConfig(steps=H, span=1, mode="epn-only"),
                 BuildOptions(include_epn=False, include_dhn=False))


def test_solution_values_follow_the_layout(two_bus_doc):
    _, problem = _two_bus_problem(two_bus_doc)
    values = solution_values(problem, np.arange(problem.n, dtype=float))
    assert values["epn.V"].shape == (2, H)
    np.testing.assert_array_equal(values["epn.P.load"], problem.layout.indices("epn.P.load"))


def test_shift_values_repeats_the_last_step():
    shifted = shift_values({"a": np.array([1.0, 2.0, 3.0]), "b": np.array([[1.0, 2.0], [3.0, 4.0]])})
    np.testing.assert_array_equal(shifted["a"], [2.0, 3.0, 3.0])
    np.testing.assert_array_equal(shifted["b"], [[2.0, 2.0], [4.0, 4.0]])


def test_dispatch_values_in_mw(two_bus_doc):
    two_bus_doc["epn"]["base_mva"] = 10.0
    two_bus_doc["participants"].append({"id": "bess", "network": "epn", "role": "storage", "bus": 1})
    network = load_network(two_bus_doc)
    values = {"epn.P.gen": np.array([0.05, 0.04]), "epn.P.load": np.array([-0.05, -0.04]),
              "epn.charge.bess": np.array([0.0, 0.01]), "epn.discharge.bess": np.array([0.002, 0.0])}
    out = dispatch_values(network, values, 1)
    assert out["power"] == {"gen": pytest.approx(0.4), "load": pytest.approx(-0.4), "bess": pytest.approx(-0.1)}
    assert out["charge"]["bess"] == pytest.approx(0.1)
    assert out["heat"] == {}


def test_default_guess_satisfies_the_hydraulic_laws():
    bundle = load_scenario(f"{SCENARIO_DIR}/scenario1.yaml")
    network = bundle.network
    bids = collect_bids(bundle.agents(), 0, 4, 0.25)
    guess = default_guess(network, bids, 4, 373.15, 323.15)
    state = hydraulic_values(network, guess)
    np.testing.assert_allclose(loop_residual(state, network, 0), 0.0, atol=1e-8)
    np.testing.assert_allclose(control_path_residual(state, network, 0), 0.0, atol=1e-8)
    np.testing.assert_allclose(component_pressure_residual(state, network, 0), 0.0, atol=1e-8)
    for e, edge in enumerate(network.edges):
        if edge.kind == EdgeKind.VALVE:
            assert 0.0 < state.kv[e, 0] < edge.kvs
    # producer heat and converter power agree with the flows and the ζ ratio
    cp = network.water.cp
    src = network.edge_endpoints[0]
    for part in network.dhn_participants():
        e = network.edge_index[part.edge]
        spread = abs(guess["dhn.T_out"][e, 0] - guess["dhn.T"][src[e], 0])
        assert guess[f"dhn.phi.{part.id}"][0] == pytest.approx(cp * guess["dhn.m"][e, 0] * spread / 1e6)
        if part.network == NetworkSide.CONVERTER:
            power = abs(guess[f"epn.P.{part.id}"][0]) * network.base_mva
            assert power == pytest.approx(guess[f"dhn.phi.{part.id}"][0] / part.zeta)


def test_energy_window_becomes_an_inequality(two_bus_doc):
    network = load_network(two_bus_doc)
    load = ParticipantBid(participant="load", network=NetworkSide.EPN, side=Side.BID, price=np.full(H, 40.0),
                          p_min=np.zeros(H), p_max=np.full(H, 0.5), budget=(EnergyWindow(0, H, 0.1),))
    bids = {"gen": _bid("gen", NetworkSide.EPN, Side.OFFER, 30.0, 0.0, 2.0), "load": load}
    problem = assemble(network, bids, {}, None, None, HorizonConfig(steps=H, span=1, mode="epn-only"),
                       BuildOptions(include_dhn=False))
    rows = problem.ineq_names["budget"]
    G = problem.ineq_matrix[rows].toarray()
    assert G.shape[0] == 1
    # consumers inject negative power, so the row reads 0.1 + Δk·Σ P ≥ 0
    np.testing.assert_allclose(G[0, problem.layout.indices("epn.P.load")], 0.25)
    assert np.count_nonzero(G) == H
    assert problem.ineq_const[rows][0] == pytest.approx(0.1)
