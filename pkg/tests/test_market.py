import numpy as np
import pandas as pd
import pytest

from core.market import (DispatchStep, LmpReport, ParticipantBid, Side, compute_ump, ledger, lmp_from_multipliers,
                         merit_order, price_report, settle, welfare, welfare_terms)
from core.network_model import NetworkSide, Role, load_network
from core.utils.errors import ConfigurationError


def _bid(pid, price, side=Side.OFFER, network=NetworkSide.EPN, flexible=True, p_max=10.0, price_heat=None):
    return ParticipantBid(participant=pid, network=network, side=side, price=np.array([price]),
                          p_min=np.array([0.0]), p_max=np.array([p_max]), flexible=flexible,
                          price_heat=None if price_heat is None else np.array([price_heat]))


def test_bid_rejects_crossed_envelope():
    with pytest.raises(ConfigurationError, match="p_min > p_max"):
        ParticipantBid("x", NetworkSide.EPN, Side.OFFER, np.array([1.0]), np.array([2.0]), np.array([1.0]))


def test_electric_welfare():
    bids = {"load": _bid("load", 9.0, Side.BID), "gen": _bid("gen", 30.0)}
    dispatch = DispatchStep(step=0, power={"load": -1.0, "gen": 1.0})
    assert welfare(dispatch, bids, 0) == pytest.approx(-21.0)


def test_zero_prices_give_zero_welfare():
    bids = {"load": _bid("load", 0.0, Side.BID), "gen": _bid("gen", 0.0)}
    assert welfare(DispatchStep(0, power={"load": -3.0, "gen": 3.0}), bids, 0) == 0.0


def test_heat_welfare_uses_roles_and_heat_price():
    bids = {"sink": _bid("sink", 20.0, Side.BID, NetworkSide.DHN),
            "boiler": _bid("boiler", 15.0, network=NetworkSide.DHN),
            "hp": _bid("hp", 40.0, Side.BID, NetworkSide.CONVERTER, price_heat=5.0)}
    dispatch = DispatchStep(0, power={"hp": -0.5}, heat={"sink": 2.0, "boiler": 2.0, "hp": 1.0})
    terms = welfare_terms(dispatch, bids, 0, roles={"sink": Role.CONSUMER, "boiler": Role.PRODUCER})
    assert terms["dhn"] == pytest.approx(40.0 - 30.0 - 5.0)
    assert terms["epn"] == pytest.approx(20.0)


def test_ump_where_demand_steps_through_an_offer():
    bids = {"cheap": _bid("cheap", 10.0), "dear": _bid("dear", 30.0),
            "keen": _bid("keen", 50.0, Side.BID), "shy": _bid("shy", 20.0, Side.BID)}
    dispatch = DispatchStep(0, power={"cheap": 1.0, "dear": 1.0, "keen": -1.5, "shy": -0.5})
    assert compute_ump(dispatch, bids, 0, NetworkSide.EPN) == pytest.approx(30.0)


def test_ump_where_supply_steps_through_a_bid():
    bids = {"cheap": _bid("cheap", 10.0), "dear": _bid("dear", 30.0), "load": _bid("load", 25.0, Side.BID)}
    dispatch = DispatchStep(0, power={"cheap": 1.0, "dear": 1.0, "load": -2.0})
    assert compute_ump(dispatch, bids, 0, NetworkSide.EPN) == pytest.approx(25.0)


def test_ump_without_crossing_is_the_last_offer():
    bids = {"a": _bid("a", 10.0), "b": _bid("b", 12.0), "load": _bid("load", 0.0, Side.BID, flexible=False)}
    dispatch = DispatchStep(0, power={"a": 1.0, "b": 1.0, "load": -2.0})
    assert compute_ump(dispatch, bids, 0, NetworkSide.EPN) == pytest.approx(12.0)


def test_ump_without_offers_is_nan():
    bids = {"load": _bid("load", 40.0, Side.BID)}
    assert np.isnan(compute_ump(DispatchStep(0, power={"load": -1.0}), bids, 0, NetworkSide.EPN))


def test_merit_order_drops_tiny_quantities_and_sorts():
    bids = {"a": _bid("a", 30.0), "b": _bid("b", 10.0), "c": _bid("c", 5.0),
            "load": _bid("load", 40.0, Side.BID), "must": _bid("must", 0.0, Side.BID, flexible=False)}
    dispatch = DispatchStep(0, power={"a": 1.0, "b": 2.0, "c": 1e-6, "load": -1.0, "must": -2.0})
    offers, demand = merit_order(dispatch, bids, 0, NetworkSide.EPN)
    assert offers == [(10.0, 2.0), (30.0, 1.0)]
    assert demand == [(np.inf, 2.0), (40.0, 1.0)]


def test_lmp_from_multipliers(two_bus_doc, loop_doc):
    two_bus_doc["epn"]["base_mva"] = 100.0
    report = lmp_from_multipliers(load_network(two_bus_doc), np.array([3000.0, 3100.0]), None)
    assert report.epn == {1: pytest.approx(30.0), 2: pytest.approx(31.0)}
    assert report.dhn == {} and report.pairs == {}

    network = load_network(loop_doc)
    lam = -np.arange(1.0, 6.0) * network.water.cp / 1e6
    report = lmp_from_multipliers(network, None, lam)
    ids = [n.id for n in network.nodes]
    for i, node_id in enumerate(ids):
        assert report.dhn[node_id] == pytest.approx(i + 1.0)
    assert report.pairs["heat_source"] == (report.dhn[1], report.dhn[21])
    assert report.pairs["heat_sink"] == (report.dhn[2], report.dhn[22])


def test_settlement_cashflows(two_bus_doc):
    network = load_network(two_bus_doc)
    dispatch = DispatchStep(3, power={"gen": 1.0, "load": -1.0})
    lmp = LmpReport(epn={1: 4.0, 2: 5.0}, dhn={}, pairs={}, multipliers={})
    frame = settle(dispatch, {"epn_ump": 4.0, "lmp": lmp}, 0, network, 0.25).set_index("participant")
    assert frame.loc["load", "energy_mwh"] == pytest.approx(-0.25)
    assert frame.loc["load", "ump_cashflow"] == pytest.approx(-1.0)
    assert frame.loc["gen", "ump_cashflow"] == pytest.approx(1.0)
    assert frame.loc["load", "lmp_cashflow"] == pytest.approx(-1.25)
    assert (frame["step"] == 3).all()


def test_settlement_of_an_idle_step(two_bus_doc):
    network = load_network(two_bus_doc)
    frame = settle(DispatchStep(0, power={"gen": 0.0, "load": 0.0}), {"epn_ump": float("nan")}, 0, network, 0.25)
    assert frame["ump_cashflow"].sum() == 0.0
    assert frame["lmp_cashflow"].sum() == 0.0


def test_price_report_rows(two_bus_doc):
    network = load_network(two_bus_doc)
    bids = {"gen": _bid("gen", 30.0), "load": _bid("load", 40.0, Side.BID)}
    dispatch = DispatchStep(0, power={"gen": 0.5, "load": -0.5})
    lmp = LmpReport(epn={1: 30.0, 2: 30.0}, dhn={}, pairs={}, multipliers={})
    report = price_report(dispatch, bids, lmp, network)
    assert report.epn_ump == pytest.approx(30.0)
    assert np.isnan(report.dhn_ump)
    kinds = [(r["network"], r["kind"], r["location"]) for r in report.rows()]
    assert kinds == [("epn", "ump", ""), ("dhn", "ump", ""), ("epn", "lmp", "1"), ("epn", "lmp", "2")]


def test_dispatch_rows_round_trip():
    dispatch = DispatchStep(2, power={"bat": 0.1, "gen": 1.0}, heat={"sink": 2.0},
                            charge={"bat": 0.0}, discharge={"bat": 0.1})
    again = DispatchStep.from_frame(pd.DataFrame(dispatch.rows()), 2)
    assert again.power == dispatch.power
    assert again.heat == dispatch.heat
    assert again.discharge == {"bat": 0.1}


def test_ledger():
    assert ledger([4.0, 6.0, -2.0], 0.25) == pytest.approx(2.0)
