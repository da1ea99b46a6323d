import numpy as np
import pytest

from core.bid_agents import (BatteryAgent, EnvelopeAgent, FlexibilityEnvelope, battery_agent, build_agent,
                             budget_windows, build_agents, collect_bids, make_bids)
from core.market import DispatchStep, Side
from core.network_model import NetworkSide, load_network
from core.utils.errors import ConfigurationError, SeriesError

STEPS = 4


def _resolve(value):
    return np.broadcast_to(np.asarray(value, dtype=float), (STEPS,)).copy()


def _participant(network, pid):
    return network.participants[network.participant_index[pid]]


def _with_battery(doc):
    doc["participants"].append({"id": "bess", "network": "epn", "role": "storage", "bus": 1})
    return doc


def test_battery_rate_limits_a_half_full_battery():
    env = battery_agent(0.3, 0.2, 0.12, 0.97, 25.0, steps=STEPS)
    np.testing.assert_allclose(env.storage.charge_max, 0.12)
    np.testing.assert_allclose(env.storage.discharge_max, 0.12)
    np.testing.assert_allclose(env.price, 25.0)
    assert env.side == Side.STORAGE
    assert env.storage.discharge_budget == pytest.approx(0.97 * 0.2)
    assert env.storage.charge_budget == pytest.approx(0.1 / 0.97)


def test_nearly_full_battery_limits_charging():
    env = battery_agent(0.3, 0.29, 0.12, 0.97, 25.0, steps=STEPS)
    np.testing.assert_allclose(env.storage.charge_max, 0.01 / (0.97 * 0.25))
    np.testing.assert_allclose(env.storage.discharge_max, 0.12)


def test_nearly_empty_battery_limits_discharging():
    env = battery_agent(0.3, 0.01, 0.12, 0.97, 25.0, steps=STEPS)
    np.testing.assert_allclose(env.storage.discharge_max, 0.01 * 0.97 / 0.25)


def test_battery_rejects_energy_outside_capacity():
    with pytest.raises(ConfigurationError):
        BatteryAgent("bess", 0.3, 0.4, 0.12, 0.97, np.full(STEPS, 25.0))


def test_battery_books_committed_energy():
    agent = BatteryAgent("bess", 0.3, 0.2, 0.12, 0.97, np.full(STEPS, 25.0))
    agent.apply(DispatchStep(0, power={"bess": -0.12}, charge={"bess": 0.12}, discharge={"bess": 0.0}), 0.25)
    bid = agent.bids(1, 2, 0.25)
    assert bid.storage.discharge_budget == pytest.approx(0.97 * (0.2 + 0.97 * 0.12 * 0.25))

    agent.apply(DispatchStep(1, power={"bess": 0.12}, charge={"bess": 0.0}, discharge={"bess": 0.12}), 0.25)
    expected = 0.2 + 0.97 * 0.12 * 0.25 - 0.12 / 0.97 * 0.25
    assert agent.bids(2, 2, 0.25).storage.discharge_budget == pytest.approx(0.97 * expected)


def test_battery_energy_is_clipped_to_its_range():
    agent = BatteryAgent("bess", 0.3, 0.01, 0.12, 0.97, np.full(STEPS, 25.0))
    agent.apply(DispatchStep(0, discharge={"bess": 0.12}), 0.25)
    assert agent.bids(0, 1, 0.25).storage.discharge_budget == 0.0


def test_make_bids_cuts_the_window():
    env = FlexibilityEnvelope("gen", NetworkSide.EPN, Side.OFFER, p_min=np.zeros(STEPS),
                              p_max=np.arange(1.0, 5.0), price=np.arange(10.0, 14.0))
    bid = make_bids(env, 2, 1)
    np.testing.assert_array_equal(bid.p_max, [2.0, 3.0])
    np.testing.assert_array_equal(bid.price, [11.0, 12.0])
    assert bid.steps == 2


def test_make_bids_needs_enough_steps():
    env = FlexibilityEnvelope("gen", NetworkSide.EPN, Side.OFFER, p_min=np.zeros(STEPS), p_max=np.ones(STEPS),
                              price=np.ones(STEPS))
    with pytest.raises(SeriesError, match="span \\+ horizon"):
        make_bids(env, 3, 2)


def test_envelope_rejects_min_above_max():
    with pytest.raises(ConfigurationError):
        FlexibilityEnvelope("gen", NetworkSide.EPN, Side.OFFER, p_min=np.full(2, 2.0), p_max=np.ones(2),
                            price=np.ones(2))


def test_energy_budget_must_cover_minimum_power():
    # two 15-minute steps at 1 MW need 0.5 MWh
    with pytest.raises(ConfigurationError, match="below its minimum power"):
        FlexibilityEnvelope("gen", NetworkSide.EPN, Side.OFFER, p_min=np.ones(2), p_max=np.full(2, 2.0),
                            price=np.ones(2), energy_budget=0.4, budget_window=2, dt_h=0.25)
    env = FlexibilityEnvelope("gen", NetworkSide.EPN, Side.OFFER, p_min=np.ones(2), p_max=np.full(2, 2.0),
                              price=np.ones(2), energy_budget=0.5, budget_window=2, dt_h=0.25)
    assert env.energy_budget == 0.5


def test_energy_budget_needs_its_window():
    with pytest.raises(ConfigurationError, match="both"):
        FlexibilityEnvelope("gen", NetworkSide.EPN, Side.OFFER, p_min=np.zeros(2), p_max=np.ones(2),
                            price=np.ones(2), energy_budget=0.5)


def _budget_envelope():
    return FlexibilityEnvelope("load", NetworkSide.EPN, Side.BID, p_min=np.full(8, 0.2), p_max=np.ones(8),
                               price=np.full(8, 40.0), energy_budget=1.0, budget_window=4, dt_h=0.25)


def test_budget_windows_follow_the_blocks():
    windows = budget_windows(_budget_envelope(), 4, 2, used=0.3)
    assert [(w.start, w.stop) for w in windows] == [(0, 2), (2, 4)]
    # what is left of block 0, then block 1 less the floor of its steps 6 and 7
    assert windows[0].energy == pytest.approx(0.7)
    assert windows[1].energy == pytest.approx(1.0 - 2 * 0.2 * 0.25)


def test_budget_reaches_the_bid():
    bid = make_bids(_budget_envelope(), 4, 0)
    assert len(bid.budget) == 1
    assert (bid.budget[0].start, bid.budget[0].stop) == (0, 4)
    assert bid.budget[0].energy == pytest.approx(1.0)
    assert make_bids(FlexibilityEnvelope("gen", NetworkSide.EPN, Side.OFFER, p_min=np.zeros(2), p_max=np.ones(2),
                                         price=np.ones(2)), 2, 0).budget == ()


def test_envelope_agent_books_energy_per_block():
    agent = EnvelopeAgent(_budget_envelope())
    agent.apply(DispatchStep(step=0, power={"load": -0.8}), 0.25)
    agent.apply(DispatchStep(step=1, power={"load": -0.4}), 0.25)
    assert agent.used(2) == pytest.approx(0.3)
    assert agent.bids(2, 2, 0.25).budget[0].energy == pytest.approx(0.7)
    assert agent.used(4) == 0.0
    agent.apply(DispatchStep(step=4, power={"load": -1.0}), 0.25)
    assert agent.used(5) == pytest.approx(0.25)


def test_budget_fields_reach_the_agent(two_bus_doc):
    network = load_network(two_bus_doc)
    spec = {"agent": "flexible", "price": 40.0, "base_mw": 1.0, "energy_budget_mwh": 0.8,
            "budget_window_steps": 4}
    agent = build_agent(_participant(network, "load"), spec, _resolve, STEPS, dt_h=0.25)
    assert (agent.envelope.energy_budget, agent.envelope.budget_window) == (0.8, 4)


def test_battery_takes_no_energy_budget(two_bus_doc):
    network = load_network(_with_battery(two_bus_doc))
    spec = {"agent": "battery", "price": 25.0, "capacity_mwh": 0.3, "initial_mwh": 0.2, "rate_mw": 0.12,
            "energy_budget_mwh": 0.1, "budget_window_steps": 4}
    with pytest.raises(ConfigurationError, match="energy budgets"):
        build_agent(_participant(network, "bess"), spec, _resolve, STEPS)


def test_flexible_agent_keeps_a_share_of_its_base(two_bus_doc):
    network = load_network(two_bus_doc)
    agent = build_agent(_participant(network, "load"), {"agent": "flexible", "price": 40.0, "base_mw": 1.0,
                                                        "flexibility": 0.7}, _resolve, STEPS)
    assert isinstance(agent, EnvelopeAgent)
    np.testing.assert_allclose(agent.envelope.p_min, 0.3)
    np.testing.assert_allclose(agent.envelope.p_max, 1.0)
    assert agent.envelope.side == Side.BID


def test_curtailable_agent_may_drop_to_zero(two_bus_doc):
    network = load_network(two_bus_doc)
    agent = build_agent(_participant(network, "gen"), {"agent": "curtailable", "price": 5.0, "forecast": 0.8},
                        _resolve, STEPS)
    np.testing.assert_allclose(agent.envelope.p_min, 0.0)
    np.testing.assert_allclose(agent.envelope.p_max, 0.8)
    assert agent.envelope.side == Side.OFFER


def test_inflexible_agent_takes_any_price(two_bus_doc):
    network = load_network(two_bus_doc)
    agent = build_agent(_participant(network, "load"), {"agent": "inflexible", "price": 40.0, "forecast": 0.5},
                        _resolve, STEPS)
    np.testing.assert_allclose(agent.envelope.price, 0.0)
    np.testing.assert_allclose(agent.envelope.p_min, agent.envelope.p_max)
    assert not agent.envelope.flexible


def test_battery_bid_needs_a_storage_participant(two_bus_doc):
    network = load_network(two_bus_doc)
    spec = {"agent": "battery", "price": 25.0, "capacity_mwh": 0.3, "initial_mwh": 0.2, "rate_mw": 0.12}
    with pytest.raises(ConfigurationError, match="non-storage"):
        build_agent(_participant(network, "gen"), spec, _resolve, STEPS)


def test_build_agents_for_every_participant(two_bus_doc):
    network = load_network(_with_battery(two_bus_doc))
    bids = dict(two_bus_doc["bids"])
    bids["bess"] = {"agent": "battery", "price": 25.0, "capacity_mwh": 0.3, "initial_mwh": 0.2, "rate_mw": 0.12}
    agents = build_agents(network, bids, _resolve, STEPS)
    assert isinstance(agents["bess"], BatteryAgent)
    collected = collect_bids(agents, 1, 2, 0.25)
    assert set(collected) == {"gen", "load", "bess"}
    assert all(b.steps == 2 for b in collected.values())


def test_build_agents_reports_missing_bids(two_bus_doc):
    network = load_network(two_bus_doc)
    with pytest.raises(ConfigurationError, match="without a bid: load"):
        build_agents(network, {"gen": two_bus_doc["bids"]["gen"]}, _resolve, STEPS)


def test_build_agents_rejects_unknown_participants(two_bus_doc):
    network = load_network(two_bus_doc)
    bids = dict(two_bus_doc["bids"], ghost={"agent": "envelope", "p_min_mw": 0.0, "p_max_mw": 1.0})
    with pytest.raises(ConfigurationError, match="unknown participant ghost"):
        build_agents(network, bids, _resolve, STEPS)
