"""
Facility agents: turn flexibility envelopes into bids.

Only `ParticipantBid` objects leave an agent. The battery keeps its stored energy to
itself and publishes energy budgets instead.
"""
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from rich import print as rprint

from core.market import DispatchStep, EnergyWindow, ParticipantBid, Side, StorageTerms
from core.network_model import CoupledNetwork, NetworkSide, Participant, Role
from core.utils.errors import ConfigurationError, SeriesError

Resolver = Callable[[object], np.ndarray]


@dataclass(frozen=True)
class FlexibilityEnvelope:
    participant: str
    network: NetworkSide
    side: Side
    p_min: np.ndarray               # MW magnitude per step
    p_max: np.ndarray
    price: np.ndarray               # ¤/MW per step
    flexible: bool = True
    price_heat: Optional[np.ndarray] = None
    energy_budget: Optional[float] = None   # MWh usable per block of `budget_window` steps
    budget_window: Optional[int] = None
    dt_h: float = 0.25
    storage: Optional[StorageTerms] = None

    def __post_init__(self):
        if np.any(self.p_min > self.p_max + 1e-12):
            raise ConfigurationError(f"envelope of {self.participant} has min above max")
        if (self.energy_budget is None) != (self.budget_window is None):
            raise ConfigurationError(f"envelope of {self.participant} needs both an energy budget and its window")
        if self.energy_budget is not None:
            if self.budget_window < 1 or self.energy_budget < 0:
                raise ConfigurationError(f"energy budget of {self.participant} needs a positive window")
            floor = float(np.max(self.p_min)) * self.budget_window * self.dt_h
            if self.energy_budget < floor - 1e-12:
                raise ConfigurationError(f"energy budget of {self.participant} is below its minimum power "
                                         f"({self.energy_budget:g} < {floor:g} MWh)")

    @property
    def steps(self) -> int:
        return int(self.p_max.size)


def budget_windows(envelope: FlexibilityEnvelope, horizon: int, k: int, used: float = 0.0,
                   dt_h: Optional[float] = None) -> Tuple[EnergyWindow, ...]:
    """Energy windows of a bid for steps k .. k+horizon−1.

    Budgets are booked per block of `budget_window` steps counted from step 0; `used` is the
    energy already committed in the block of step k. Where a block runs past the horizon, the
    minimum-power energy of its remaining steps stays reserved."""
    if envelope.energy_budget is None:
        return ()
    dt_h = envelope.dt_h if dt_h is None else dt_h
    w = envelope.budget_window
    windows, j = [], 0
    while j < horizon:
        block = (k + j) // w
        stop = min(horizon, (block + 1) * w - k)
        tail = envelope.p_min[k + stop:min((block + 1) * w, envelope.steps)]
        left = envelope.energy_budget - (used if block == k // w else 0.0) - float(np.sum(tail)) * dt_h
        windows.append(EnergyWindow(start=j, stop=stop, energy=max(left, 0.0)))
        j = stop
    return tuple(windows)


def make_bids(envelope: FlexibilityEnvelope, horizon: int, k: int, used: float = 0.0,
              dt_h: Optional[float] = None) -> ParticipantBid:
    """Bid for steps k .. k+horizon−1 cut from the envelope."""
    if k + horizon > envelope.steps:
        raise SeriesError(f"series shorter than span + horizon: envelope of {envelope.participant} "
                          f"has {envelope.steps} steps, needs {k + horizon}")
    cut = slice(k, k + horizon)
    heat = envelope.price_heat[cut].copy() if envelope.price_heat is not None else None
    storage = None
    if envelope.storage is not None:
        s = envelope.storage
        storage = StorageTerms(charge_max=s.charge_max[cut].copy(), discharge_max=s.discharge_max[cut].copy(),
                               discharge_budget=s.discharge_budget, charge_budget=s.charge_budget,
                               efficiency=s.efficiency)
    return ParticipantBid(participant=envelope.participant, network=envelope.network, side=envelope.side,
                          price=envelope.price[cut].copy(), p_min=envelope.p_min[cut].copy(),
                          p_max=envelope.p_max[cut].copy(), flexible=envelope.flexible,
                          price_heat=heat, storage=storage,
                          budget=budget_windows(envelope, horizon, k, used, dt_h))


# ------------------------------
# agents
# ------------------------------

class EnvelopeAgent:
    """Agent with a fixed envelope; books committed energy when the envelope carries a budget."""

    def __init__(self, envelope: FlexibilityEnvelope):
        self.envelope = envelope
        self._block = 0
        self._used = 0.0            # MWh committed in block `_block`

    @property
    def participant(self) -> str:
        return self.envelope.participant

    def used(self, k: int) -> float:
        w = self.envelope.budget_window
        return self._used if w and k // w == self._block else 0.0

    def bids(self, k: int, horizon: int, dt_h: float) -> ParticipantBid:
        return make_bids(self.envelope, horizon, k, self.used(k), dt_h)

    def apply(self, dispatch: DispatchStep, dt_h: float):
        w = self.envelope.budget_window
        if not w:
            return
        if self.envelope.network == NetworkSide.DHN:
            amount = dispatch.heat.get(self.participant, 0.0)
        else:
            amount = dispatch.power.get(self.participant, 0.0)
        block = dispatch.step // w
        if block != self._block:
            self._block, self._used = block, 0.0
        self._used += abs(amount) * dt_h


class BatteryAgent:
    """Battery with one-way efficiency on charge and on discharge."""

    def __init__(self, participant: str, capacity: float, initial_energy: float, max_rate: float,
                 efficiency: float, price: np.ndarray):
        if not 0.0 <= initial_energy <= capacity:
            raise ConfigurationError(f"battery {participant}: initial energy outside [0, capacity]")
        self.participant = participant
        self.capacity = capacity
        self.max_rate = max_rate
        self.efficiency = efficiency
        self.price = np.asarray(price, dtype=float)
        self._energy = float(initial_energy)

    def envelope(self, k: int, horizon: int, dt_h: float) -> FlexibilityEnvelope:
        eta = self.efficiency
        charge = min(self.max_rate, (self.capacity - self._energy) / (eta * dt_h))
        discharge = min(self.max_rate, self._energy * eta / dt_h)
        steps = k + horizon
        terms = StorageTerms(charge_max=np.full(steps, max(charge, 0.0)),
                             discharge_max=np.full(steps, max(discharge, 0.0)),
                             discharge_budget=eta * self._energy,
                             charge_budget=(self.capacity - self._energy) / eta, efficiency=eta)
        if self.price.size < steps:
            raise SeriesError(f"series shorter than span + horizon: price of {self.participant}")
        return FlexibilityEnvelope(participant=self.participant, network=NetworkSide.EPN, side=Side.STORAGE,
                                   p_min=np.zeros(steps), p_max=terms.discharge_max.copy(),
                                   price=self.price[:steps], storage=terms)

    def bids(self, k: int, horizon: int, dt_h: float) -> ParticipantBid:
        return make_bids(self.envelope(k, horizon, dt_h), horizon, k)

    def apply(self, dispatch: DispatchStep, dt_h: float):
        """Book the committed charge/discharge of one step."""
        charge = dispatch.charge.get(self.participant, 0.0)
        discharge = dispatch.discharge.get(self.participant, 0.0)
        energy = self._energy + (self.efficiency * charge - discharge / self.efficiency) * dt_h
        if energy < -1e-6 or energy > self.capacity + 1e-6:
            rprint(f"[yellow]⚠️ Battery {self.participant} energy {energy:.6f} MWh left its range, clipped[/yellow]")
        self._energy = min(max(energy, 0.0), self.capacity)


def battery_agent(capacity: float, initial_energy: float, max_rate: float, efficiency: float,
                  price, steps: int = 1, dt_h: float = 0.25, participant: str = "battery") -> FlexibilityEnvelope:
    """Envelope of a battery at its current charge for `steps` steps."""
    price = np.broadcast_to(np.asarray(price, dtype=float), (steps,))
    return BatteryAgent(participant, capacity, initial_energy, max_rate, efficiency, price).envelope(0, steps, dt_h)


# ------------------------------
# construction from a scenario
# ------------------------------

def bid_side(participant: Participant) -> Side:
    if participant.role == Role.STORAGE:
        return Side.STORAGE
    role = participant.epn_role if participant.on_epn else participant.dhn_role
    return Side.OFFER if role == Role.PRODUCER else Side.BID


def build_agent(participant: Participant, spec: dict, resolve: Resolver, steps: int, dt_h: float = 0.25):
    """Agent for one `bids` entry; `resolve` turns a series value into an array of `steps`."""
    agent = spec["agent"]
    price = resolve(spec.get("price", 0.0))
    budget = spec.get("energy_budget_mwh")
    if budget is not None and (agent == "battery" or participant.network == NetworkSide.CONVERTER):
        raise ConfigurationError(f"energy budgets are for plain producers and consumers, not {participant.id}")
    if agent == "battery":
        if participant.role != Role.STORAGE:
            raise ConfigurationError(f"battery bid for non-storage participant {participant.id}")
        return BatteryAgent(participant.id, spec["capacity_mwh"], spec["initial_mwh"], spec["rate_mw"],
                            spec.get("efficiency", 0.97), price)
    flexible = True
    if agent == "envelope":
        lo, hi = resolve(spec["p_min_mw"]), resolve(spec["p_max_mw"])
    elif agent == "flexible":
        hi = resolve(spec["base_mw"])
        lo = (1.0 - spec.get("flexibility", 0.3)) * hi
    elif agent == "curtailable":
        hi = resolve(spec["forecast"])
        lo = np.zeros_like(hi)
    else:
        hi = resolve(spec["forecast"])
        lo = hi.copy()
        price = np.zeros_like(hi)
        flexible = False
    heat = resolve(spec["price_heat"]) if spec.get("price_heat") is not None else None
    if participant.network == NetworkSide.CONVERTER and heat is None:
        heat = np.zeros(steps)
    if not flexible and heat is not None:
        heat = np.zeros_like(heat)
    return EnvelopeAgent(FlexibilityEnvelope(participant=participant.id, network=participant.network,
                                             side=bid_side(participant), p_min=lo, p_max=hi, price=price,
                                             flexible=flexible, price_heat=heat, energy_budget=budget,
                                             budget_window=spec.get("budget_window_steps"), dt_h=dt_h))


def build_agents(network: CoupledNetwork, bids: Dict[str, dict], resolve: Resolver, steps: int,
                 dt_h: float = 0.25) -> Dict[str, object]:
    agents = {}
    for pid, spec in bids.items():
        if pid not in network.participant_index:
            raise ConfigurationError(f"bid for unknown participant {pid}")
        agents[pid] = build_agent(network.participants[network.participant_index[pid]], spec, resolve, steps, dt_h)
    missing = [p.id for p in network.participants if p.id not in agents]
    if missing:
        raise ConfigurationError(f"participants without a bid: {', '.join(missing)}")
    return agents


def collect_bids(agents: Dict[str, object], k: int, horizon: int, dt_h: float) -> Dict[str, ParticipantBid]:
    return {pid: agent.bids(k, horizon, dt_h) for pid, agent in agents.items()}
