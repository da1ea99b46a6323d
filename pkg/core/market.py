"""
Welfare, bid bookkeeping and price signals of the combined auction.

Sign conventions:
  EPN power   signed injection in MW, production positive, consumption negative
  DHN heat    magnitude in MW; the side (offer/bid) comes from the participant role
  welfare     Σ bid prices × consumed quantity − Σ offer prices × produced quantity [¤/h]
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from core.network_model import CoupledNetwork, NetworkSide, Role
from core.nlp_core import KktSolution, NlpProblem
from core.utils.errors import ConfigurationError

QUANTITY_TOL = 1e-4      # MW; dispatched quantities below this count as not accepted


class Side(str, Enum):
    BID = "bid"
    OFFER = "offer"
    STORAGE = "storage"


@dataclass(frozen=True)
class StorageTerms:
    """Horizon energy budgets of a storage bid; the stored energy itself never leaves the agent."""
    charge_max: np.ndarray          # MW per step
    discharge_max: np.ndarray       # MW per step
    discharge_budget: float         # MWh deliverable before empty, η·E0
    charge_budget: float            # MWh absorbable before full, (cap − E0)/η
    efficiency: float


@dataclass(frozen=True)
class EnergyWindow:
    """Cap on the energy a participant moves over horizon steps [start, stop)."""
    start: int
    stop: int
    energy: float                   # MWh


@dataclass(frozen=True)
class ParticipantBid:
    """Per-step price and power envelope; min/max are magnitudes on the participant's side."""
    participant: str
    network: NetworkSide
    side: Side
    price: np.ndarray               # ¤/MW, electric side for converters
    p_min: np.ndarray
    p_max: np.ndarray
    flexible: bool = True
    price_heat: Optional[np.ndarray] = None
    storage: Optional[StorageTerms] = None
    budget: Tuple[EnergyWindow, ...] = ()

    def __post_init__(self):
        if np.any(np.asarray(self.p_min) > np.asarray(self.p_max) + 1e-12):
            k = int(np.argmax(np.asarray(self.p_min) > np.asarray(self.p_max)))
            raise ConfigurationError(f"bid of {self.participant}: p_min > p_max at step {k}")
        for w in self.budget:
            if not 0 <= w.start < w.stop <= self.steps or w.energy < 0:
                raise ConfigurationError(f"bid of {self.participant}: energy window {w.start}..{w.stop} "
                                         f"outside the horizon or negative")

    @property
    def steps(self) -> int:
        return int(np.asarray(self.price).size)

    def heat_price(self, k: int) -> float:
        if self.price_heat is None:
            return 0.0
        return float(self.price_heat[k])


@dataclass
class DispatchStep:
    step: int
    power: Dict[str, float] = field(default_factory=dict)
    heat: Dict[str, float] = field(default_factory=dict)
    charge: Dict[str, float] = field(default_factory=dict)
    discharge: Dict[str, float] = field(default_factory=dict)

    def rows(self) -> List[dict]:
        out = [{"step": self.step, "participant": pid, "network": "epn", "power_mw": v,
                "charge_mw": self.charge.get(pid, 0.0), "discharge_mw": self.discharge.get(pid, 0.0)}
               for pid, v in self.power.items()]
        out += [{"step": self.step, "participant": pid, "network": "dhn", "power_mw": v,
                 "charge_mw": 0.0, "discharge_mw": 0.0} for pid, v in self.heat.items()]
        return out

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, step: int) -> "DispatchStep":
        part = frame[frame["step"] == step]
        out = cls(step=step)
        for row in part.itertuples(index=False):
            if row.network == "epn":
                out.power[row.participant] = float(row.power_mw)
                if row.charge_mw or row.discharge_mw:
                    out.charge[row.participant] = float(row.charge_mw)
                    out.discharge[row.participant] = float(row.discharge_mw)
            else:
                out.heat[row.participant] = float(row.power_mw)
        return out


# ------------------------------
# welfare
# ------------------------------

def welfare_terms(dispatch: DispatchStep, bids: Dict[str, ParticipantBid], k: int,
                  roles: Optional[Dict[str, Role]] = None) -> Dict[str, float]:
    """Welfare rate split into its EPN and DHN sums [¤/h].

    `roles` maps DHN-only participants to producer/consumer; without it the bid side decides.
    """
    epn, dhn = 0.0, 0.0
    for pid, bid in bids.items():
        if pid in dispatch.power:
            epn -= float(bid.price[k]) * dispatch.power[pid]
        if pid in dispatch.heat:
            if bid.network == NetworkSide.CONVERTER:
                dhn -= bid.heat_price(k) * dispatch.heat[pid]
            else:
                role = (roles or {}).get(pid, Role.CONSUMER if bid.side == Side.BID else Role.PRODUCER)
                dhn += (1.0 if role == Role.CONSUMER else -1.0) * float(bid.price[k]) * dispatch.heat[pid]
    return {"epn": epn, "dhn": dhn}


def welfare(dispatch: DispatchStep, bids: Dict[str, ParticipantBid], k: int) -> float:
    terms = welfare_terms(dispatch, bids, k)
    return terms["epn"] + terms["dhn"]


# ------------------------------
# LMP
# ------------------------------

@dataclass
class LmpReport:
    epn: Dict[int, float]                       # bus id -> ¤/MW
    dhn: Dict[int, float]                       # node id -> ¤/MW
    pairs: Dict[str, Tuple[float, float]]       # DHN participant -> (supply node, return node)
    multipliers: Dict[Tuple[str, int], float]   # raw (network, location) -> multiplier


def lmp_from_multipliers(network: CoupledNetwork, lam_p: Optional[np.ndarray],
                         lam_mix: Optional[np.ndarray]) -> LmpReport:
    """Bus balance and node mixing multipliers converted to ¤/MW."""
    epn, dhn, raw = {}, {}, {}
    if lam_p is not None:
        for i, bus in enumerate(network.buses):
            epn[bus.id] = float(lam_p[i]) / network.base_mva
            raw[("epn", bus.id)] = float(lam_p[i])
    if lam_mix is not None:
        scale = 1.0e6 / network.water.cp
        for i, node in enumerate(network.nodes):
            dhn[node.id] = -float(lam_mix[i]) * scale
            raw[("dhn", node.id)] = float(lam_mix[i])
    pairs = {}
    if dhn:
        for part in network.dhn_participants():
            edge = network.participant_edge(part)
            supply, ret = (edge.to_node, edge.from_node) if part.dhn_role == Role.PRODUCER \
                else (edge.from_node, edge.to_node)
            pairs[part.id] = (dhn[supply], dhn[ret])
    return LmpReport(epn=epn, dhn=dhn, pairs=pairs, multipliers=raw)


def extract_lmp(solution: KktSolution, problem: NlpProblem, network: CoupledNetwork, k: int = 0) -> LmpReport:
    """LMPs of horizon step `k` from the bus balance and mixing rows."""
    lam_p = lam_mix = None
    if "epn.balance" in problem.row_slices:
        nb = len(network.buses)
        lam_p = solution.multipliers(problem, "epn.balance")[k * nb:(k + 1) * nb]
    if "dhn.mixing" in problem.row_slices:
        nn = len(network.nodes)
        lam_mix = solution.multipliers(problem, "dhn.mixing")[k * nn:(k + 1) * nn]
    return lmp_from_multipliers(network, lam_p, lam_mix)


# ------------------------------
# UMP
# ------------------------------

def merit_order(dispatch: DispatchStep, bids: Dict[str, ParticipantBid], k: int,
                side: NetworkSide, roles: Optional[Dict[str, Role]] = None):
    """Dispatched (price, MW) offers ascending and bids descending on one network.

    Inflexible consumers take any price, so their bids sort first.
    """
    offers, demand = [], []
    for pid, bid in bids.items():
        if side == NetworkSide.EPN and pid in dispatch.power:
            price = float(bid.price[k])
            if bid.side == Side.STORAGE:
                offers.append((price, dispatch.discharge.get(pid, max(dispatch.power[pid], 0.0))))
                demand.append((price, dispatch.charge.get(pid, max(-dispatch.power[pid], 0.0))))
                continue
            p = dispatch.power[pid]
            if p > 0:
                offers.append((price, p))
            elif p < 0:
                demand.append((price if bid.flexible else np.inf, -p))
        elif side == NetworkSide.DHN and pid in dispatch.heat:
            if bid.network == NetworkSide.CONVERTER:
                offers.append((bid.heat_price(k), dispatch.heat[pid]))
                continue
            role = (roles or {}).get(pid, Role.CONSUMER if bid.side == Side.BID else Role.PRODUCER)
            price = float(bid.price[k])
            if role == Role.CONSUMER:
                demand.append((price if bid.flexible else np.inf, dispatch.heat[pid]))
            else:
                offers.append((price, dispatch.heat[pid]))
    offers = sorted((o for o in offers if o[1] > QUANTITY_TOL), key=lambda o: o[0])
    demand = sorted((d for d in demand if d[1] > QUANTITY_TOL), key=lambda d: -d[0])
    return offers, demand


def _walk(offers: List[Tuple[float, float]], demand: List[Tuple[float, float]]) -> Optional[float]:
    """Crossing price of the two step curves, None when they never cross."""
    if not demand or offers[0][0] > demand[0][0]:
        return None
    i = j = 0
    q_off, q_dem = offers[0][1], demand[0][1]
    while True:
        take = min(q_off, q_dem)
        q_off -= take
        q_dem -= take
        off_done, dem_done = q_off <= QUANTITY_TOL, q_dem <= QUANTITY_TOL
        i += off_done
        j += dem_done
        if i >= len(offers) or j >= len(demand):
            return None
        if off_done:
            q_off = offers[i][1]
        if dem_done:
            q_dem = demand[j][1]
        if offers[i][0] > demand[j][0]:
            if off_done and not dem_done:
                return float(demand[j][0])      # supply steps up through the bid
            if dem_done and not off_done:
                return float(offers[i][0])      # demand steps down through the offer
            return float(offers[i - 1][0])      # corner: last accepted offer


def compute_ump(dispatch: DispatchStep, bids: Dict[str, ParticipantBid], k: int, network_side: NetworkSide,
                roles: Optional[Dict[str, Role]] = None) -> float:
    """Uniform price at the intersection of the dispatched offer and bid curves.

    Without an intersection the last accepted offer sets the price; NaN if nothing was offered.
    """
    offers, demand = merit_order(dispatch, bids, k, network_side, roles)
    if not offers:
        return float("nan")
    crossing = _walk(offers, demand)
    if crossing is not None and np.isfinite(crossing):
        return crossing
    return float(offers[-1][0])


# ------------------------------
# settlement
# ------------------------------

def settle(dispatch: DispatchStep, prices: Dict[str, object], k: int, network: CoupledNetwork,
           dt_h: float) -> pd.DataFrame:
    """Energy cashflows per participant, priced at the UMP and at the local LMP.

    `prices` holds `epn_ump`, `dhn_ump` and an `LmpReport` under `lmp`. Cashflow is price ×
    injected energy, so buyers pay (negative) and sellers earn.
    """
    lmp: Optional[LmpReport] = prices.get("lmp")
    rows = []
    for pid, p in dispatch.power.items():
        part = network.participants[network.participant_index[pid]]
        local = lmp.epn.get(part.bus, np.nan) if lmp is not None else np.nan
        rows.append(_cash(dispatch.step, pid, "epn", p, dt_h, prices.get("epn_ump", np.nan), local))
    for pid, phi in dispatch.heat.items():
        part = network.participants[network.participant_index[pid]]
        injection = phi if part.dhn_role == Role.PRODUCER else -phi
        local = lmp.pairs.get(pid, (np.nan, np.nan))[0] if lmp is not None else np.nan
        rows.append(_cash(dispatch.step, pid, "dhn", injection, dt_h, prices.get("dhn_ump", np.nan), local))
    return pd.DataFrame(rows, columns=["step", "participant", "network", "quantity_mw", "energy_mwh",
                                       "ump", "ump_cashflow", "lmp", "lmp_cashflow"])


def _cash(step, pid, net, injection, dt_h, ump, lmp) -> dict:
    energy = injection * dt_h
    return {"step": step, "participant": pid, "network": net, "quantity_mw": injection, "energy_mwh": energy,
            "ump": ump, "ump_cashflow": ump * energy if np.isfinite(ump) else 0.0,
            "lmp": lmp, "lmp_cashflow": lmp * energy if np.isfinite(lmp) else 0.0}


@dataclass
class PriceReport:
    step: int
    epn_ump: float
    dhn_ump: float
    lmp: LmpReport
    dispatch: DispatchStep

    def rows(self) -> List[dict]:
        out = [{"step": self.step, "network": "epn", "kind": "ump", "location": "", "price": self.epn_ump},
               {"step": self.step, "network": "dhn", "kind": "ump", "location": "", "price": self.dhn_ump}]
        out += [{"step": self.step, "network": "epn", "kind": "lmp", "location": str(bus), "price": v}
                for bus, v in self.lmp.epn.items()]
        out += [{"step": self.step, "network": "dhn", "kind": "lmp", "location": str(node), "price": v}
                for node, v in self.lmp.dhn.items()]
        return out


def price_report(dispatch: DispatchStep, bids: Dict[str, ParticipantBid], lmp: LmpReport, network: CoupledNetwork,
                 k: int = 0) -> PriceReport:
    roles = {p.id: p.dhn_role for p in network.dhn_participants()}
    return PriceReport(step=dispatch.step,
                       epn_ump=compute_ump(dispatch, bids, k, NetworkSide.EPN, roles),
                       dhn_ump=compute_ump(dispatch, bids, k, NetworkSide.DHN, roles),
                       lmp=lmp, dispatch=dispatch)


def ledger(welfare_rates: Iterable[float], dt_h: float) -> float:
    """Accumulated welfare [¤] from per-step rates."""
    return float(sum(welfare_rates) * dt_h)
