"""
Dynamic DHN temperatures.

Nodes mix perfectly, pipelines follow the node method (slug accounting over the inlet
history), heat is lost towards the ambient with an exponential law, pumps/valves/DPRs
pass temperatures through. Temperatures are in K, thermal powers in MW, flows in kg/s.

Two forms of the pipeline model live here:
  exact   window (γ, ε, R, S) from realised flows, used by the plant
  ω form  the same window frozen on predicted flows, linear in temperatures for the NLP
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from rich import print as rprint
from scipy.sparse.linalg import spsolve

from core.dhn_hydraulic import HydraulicState, hydraulic_inequality_set
from core.network_model import KELVIN, ConsumerCurve, CoupledNetwork, EdgeKind, Participant, Role
from core.nlp_core import BilinearBlock, LinearBlock, RowBuilder, Triplets
from core.utils.errors import ConfigurationError, HistoryError

MW = 1.0e6
MIN_FLOW_FRACTION = 0.01        # floor for predicted pipeline flows, share of m_max
_REACHED = 1.0 - 1e-12          # mass thresholds count as met within rounding

PhiTerm = Tuple[Optional[np.ndarray], np.ndarray]      # (variable indices or None, constant) per step
PASSTHROUGH_KINDS = (EdgeKind.PUMP, EdgeKind.VALVE, EdgeKind.DPR)


def flow_floor(edge) -> float:
    return max(edge.m_min, MIN_FLOW_FRACTION * edge.m_max, 1e-6)


# ------------------------------
# history
# ------------------------------

@dataclass
class ThermalHistory:
    """Inlet temperature and mass flow per pipeline; column 0 is `last_step`, older to the right."""
    pipelines: Tuple[str, ...]
    masses: np.ndarray          # ρ A L per pipeline [kg]
    temps: np.ndarray           # (n_pipe, depth) K
    flows: np.ndarray           # (n_pipe, depth) kg/s
    last_step: int
    dt: float

    @property
    def depth(self) -> int:
        return self.temps.shape[1]

    @property
    def index(self) -> Dict[str, int]:
        return {p: i for i, p in enumerate(self.pipelines)}

    @classmethod
    def steady(cls, network: CoupledNetwork, temps, flows, depth: int, dt: float, last_step: int = -1):
        """History filled with a steady state; `temps` and `flows` are per pipeline."""
        pipes = network.edges_of_kind(EdgeKind.PIPELINE)
        temps = np.broadcast_to(np.asarray(temps, dtype=float), (len(pipes),))
        flows = np.broadcast_to(np.asarray(flows, dtype=float), (len(pipes),))
        return cls(pipelines=tuple(network.edges[e].id for e in pipes),
                   masses=np.array([network.pipeline_mass(e) for e in pipes]),
                   temps=np.repeat(temps[:, None], depth, axis=1),
                   flows=np.repeat(flows[:, None], depth, axis=1),
                   last_step=last_step, dt=dt)

    def copy(self) -> "ThermalHistory":
        return ThermalHistory(self.pipelines, self.masses.copy(), self.temps.copy(), self.flows.copy(),
                              self.last_step, self.dt)

    def push(self, temps, flows):
        """Append one step of realised inlet temperatures and flows."""
        self.temps = np.roll(self.temps, 1, axis=1)
        self.flows = np.roll(self.flows, 1, axis=1)
        self.temps[:, 0] = temps
        self.flows[:, 0] = flows
        self.last_step += 1

    def _offset(self, k: int) -> int:
        offset = self.last_step - k
        if offset < 0:
            raise HistoryError(f"thermal history ends at step {self.last_step}, step {k} requested")
        if offset >= self.depth:
            raise HistoryError(f"step {k} is older than the {self.depth}-step thermal history")
        return offset

    def flows_back(self, pipe: int, k: int) -> np.ndarray:
        """ṁ_k, ṁ_{k−1}, ... as far as the buffer reaches."""
        return self.flows[pipe, self._offset(k):]

    def temps_back(self, pipe: int, k: int, count: int) -> np.ndarray:
        offset = self._offset(k)
        if offset + count > self.depth:
            raise HistoryError(f"pipeline {self.pipelines[pipe]} needs {count} steps of history before "
                               f"step {k}, buffer depth is {self.depth}")
        return self.temps[pipe, offset:offset + count]

    def flow_at(self, pipe: int, k: int) -> float:
        return float(self.flows[pipe, self._offset(k)])

    def temp_at(self, pipe: int, k: int) -> float:
        return float(self.temps[pipe, self._offset(k)])

    def to_frame(self) -> pd.DataFrame:
        steps = self.last_step - np.arange(self.depth)
        rows = []
        for i, pipe in enumerate(self.pipelines):
            rows.append(pd.DataFrame({"step": steps, "pipeline": pipe,
                                      "inlet_temperature_k": self.temps[i], "mass_flow_kg_s": self.flows[i]}))
        return pd.concat(rows, ignore_index=True)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, network: CoupledNetwork, dt: float) -> "ThermalHistory":
        pipes = network.edges_of_kind(EdgeKind.PIPELINE)
        ids = tuple(network.edges[e].id for e in pipes)
        missing = set(ids) - set(frame["pipeline"])
        if missing:
            raise HistoryError(f"thermal history has no rows for {', '.join(sorted(missing))}")
        frame = frame.sort_values(["pipeline", "step"], ascending=[True, False])
        temps, flows = [], []
        for pipe in ids:
            part = frame[frame["pipeline"] == pipe]
            temps.append(part["inlet_temperature_k"].to_numpy())
            flows.append(part["mass_flow_kg_s"].to_numpy())
        return cls(pipelines=ids, masses=np.array([network.pipeline_mass(e) for e in pipes]),
                   temps=np.array(temps), flows=np.array(flows),
                   last_step=int(frame["step"].max()), dt=dt)


def required_depth(network: CoupledNetwork, horizon_steps: int, dt: float) -> int:
    """Buffer depth covering the longest window at floor flow plus a horizon."""
    depth = 2
    for e in network.edges_of_kind(EdgeKind.PIPELINE):
        edge = network.edges[e]
        depth = max(depth, math.ceil(network.pipeline_mass(e) / (flow_floor(edge) * dt)) + 2)
    return depth + horizon_steps


# ------------------------------
# node method
# ------------------------------

@dataclass(frozen=True)
class Window:
    gamma: int
    eps: int
    R: float
    S: float
    mass: float


def window_from_flows(flows_back, mass: float, dt: float) -> Window:
    """Slug window of the node method; `flows_back` starts at the current step."""
    mdt = np.asarray(flows_back, dtype=float) * dt
    C = np.cumsum(mdt)
    hit = np.flatnonzero(C >= mass * _REACHED)
    if hit.size == 0:
        raise HistoryError(f"flow history of {mdt.size} steps does not displace the pipe mass {mass:.1f} kg")
    gamma = int(hit[0])
    after = np.flatnonzero(C[1:] - C[0] >= mass * _REACHED)
    if after.size == 0:
        raise HistoryError(f"flow history of {mdt.size} steps does not reach the tail slug of {mass:.1f} kg")
    eps = int(after[0]) + 1
    R = float(C[gamma])
    S = float(C[eps - 1]) if eps >= gamma + 1 else R
    return Window(gamma=gamma, eps=eps, R=R, S=S, mass=mass)


def outlet_weights(window: Window, flows_back, dt: float) -> np.ndarray:
    """Share of the current outflow coming from the inlet slug of each step back (0..ε)."""
    flows_back = np.asarray(flows_back, dtype=float)
    mdt0 = flows_back[0] * dt
    w = np.zeros(window.eps + 1)
    if window.eps == window.gamma:
        w[window.gamma] = 1.0
        return w
    w[window.gamma] = max(window.R - window.mass, 0.0) / mdt0
    w[window.gamma + 1:window.eps] = flows_back[window.gamma + 1:window.eps] * dt / mdt0
    w[window.eps] = (mdt0 + window.mass - window.S) / mdt0
    return w


def exact_window(history: ThermalHistory, pipeline: str, k: int) -> Window:
    pipe = history.index[pipeline]
    return window_from_flows(history.flows_back(pipe, k), history.masses[pipe], history.dt)


def _current_flows(history: ThermalHistory, pipe: int, k: int, m_k: float) -> np.ndarray:
    flows = history.flows_back(pipe, k).copy()
    flows[0] = m_k
    return flows


def lossless_outlet(history: ThermalHistory, window: Window, m_k: float, k: int, pipeline: str) -> float:
    pipe = history.index[pipeline]
    w = outlet_weights(window, _current_flows(history, pipe, k, m_k), history.dt)
    return float(w @ history.temps_back(pipe, k, w.size))


def residence_time(history: ThermalHistory, window: Window, m_k: float, k: int, pipeline: str) -> float:
    pipe = history.index[pipeline]
    w = outlet_weights(window, _current_flows(history, pipe, k, m_k), history.dt)
    return float(w @ np.arange(w.size)) * history.dt


def decay_factor(residence: float, time_constant: float):
    if not np.isfinite(time_constant):
        return np.ones_like(residence) if np.ndim(residence) else 1.0
    return np.exp(-np.asarray(residence) / time_constant)


def lossy_outlet(t_out1: float, residence: float, t_ambient: float, time_constant: float) -> float:
    return t_ambient + (t_out1 - t_ambient) * decay_factor(residence, time_constant)


# ------------------------------
# ω weights
# ------------------------------

@dataclass
class OmegaWeights:
    """Node-method windows frozen on predicted flows for every pipeline and horizon step."""
    pipelines: Tuple[str, ...]
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    gamma: np.ndarray
    eps: np.ndarray
    m_pre: np.ndarray
    residence: np.ndarray                       # s
    coefficients: List[List[np.ndarray]] = field(repr=False)   # [pipe][step] -> weight per step back

    @property
    def steps(self) -> int:
        return self.w1.shape[1]


def shift_predicted_flows(flows: np.ndarray) -> np.ndarray:
    """Previous horizon's flows moved one step forward; the last step repeats."""
    flows = np.asarray(flows, dtype=float)
    return np.concatenate([flows[:, 1:], flows[:, -1:]], axis=1)


def compute_omega(predicted_flows, network: CoupledNetwork, history: ThermalHistory) -> OmegaWeights:
    """ω for the horizon starting right after `history.last_step`.

    `predicted_flows` is (n_pipe, H) in history pipeline order.
    """
    predicted = np.array(predicted_flows, dtype=float)
    n_pipe, H = predicted.shape
    if n_pipe != len(history.pipelines):
        raise ConfigurationError(f"predicted flows cover {n_pipe} pipelines, history has {len(history.pipelines)}")
    clamped = []
    for i, pipe in enumerate(history.pipelines):
        edge = network.edges[network.edge_index[pipe]]
        floor = flow_floor(edge)
        low = predicted[i] < floor
        if np.any(predicted[i] <= 0):
            clamped.append(pipe)
        predicted[i, low] = floor
    if clamped:
        rprint(f"[yellow]⚠️ Nonpositive predicted flow clamped on {', '.join(clamped[:5])}[/yellow]")

    shape = (n_pipe, H)
    w1, w2, w3, res = (np.zeros(shape) for _ in range(4))
    gamma, eps = np.zeros(shape, dtype=int), np.zeros(shape, dtype=int)
    coefficients = []
    for i in range(n_pipe):
        past = history.flows[i]
        per_step = []
        for j in range(H):
            flows_back = np.concatenate([predicted[i, j::-1], past])
            win = window_from_flows(flows_back, history.masses[i], history.dt)
            w = outlet_weights(win, flows_back, history.dt)
            gamma[i, j], eps[i, j] = win.gamma, win.eps
            if win.eps == win.gamma:
                w1[i, j] = 1.0
            else:
                w1[i, j], w2[i, j], w3[i, j] = w[win.gamma], w[win.gamma + 1:win.eps].sum(), w[win.eps]
            res[i, j] = float(w @ np.arange(w.size)) * history.dt
            per_step.append(w)
        coefficients.append(per_step)
    return OmegaWeights(pipelines=history.pipelines, w1=w1, w2=w2, w3=w3, gamma=gamma, eps=eps,
                        m_pre=predicted, residence=res, coefficients=coefficients)


# ------------------------------
# per-step residuals
# ------------------------------

@dataclass
class ThermalState:
    """Columns are timesteps."""
    T: np.ndarray           # (n_node, K)
    T_out: np.ndarray       # (n_edge, K), lossy outlet for pipelines
    phi: np.ndarray         # (n_dhn_participant, K) MW, magnitudes


def node_mixing_residual(state: ThermalState, hydraulic: HydraulicState, network: CoupledNetwork, k: int) -> np.ndarray:
    src, dst = network.edge_endpoints
    n = len(network.nodes)
    m = hydraulic.m[:, k]
    outflow = np.bincount(src, weights=m, minlength=n)
    enthalpy_in = np.bincount(dst, weights=m * state.T_out[:, k], minlength=n)
    return outflow * state.T[:, k] - enthalpy_in


def _participant_slot(network: CoupledNetwork, participant: Participant) -> Tuple[int, int, int]:
    e = network.edge_index[participant.edge]
    n = next(i for i, p in enumerate(network.dhn_participants()) if p.id == participant.id)
    return e, int(network.edge_endpoints[0][e]), n


def producer_outlet_residual(state: ThermalState, hydraulic: HydraulicState, network: CoupledNetwork,
                             participant: Participant, k: int) -> float:
    e, i, n = _participant_slot(network, participant)
    rise = state.phi[n, k] * MW / (network.water.cp * hydraulic.m[e, k])
    return float(state.T_out[e, k] - state.T[i, k] - rise)


def consumer_model_residuals(state: ThermalState, hydraulic: HydraulicState, network: CoupledNetwork,
                             participant: Participant, k: int, t_ambient: float) -> Tuple[float, float]:
    """(outlet residual [K], heat balance residual [MW])."""
    e, i, n = _participant_slot(network, participant)
    curve = participant.curve or ConsumerCurve()
    t_s, t_out, phi = state.T[i, k], state.T_out[e, k], state.phi[n, k]
    outlet = t_out - curve.evaluate(t_s, t_ambient, phi)
    flow = hydraulic.m[e, k] * network.water.cp * (t_s - t_out) / MW - phi
    return float(outlet), float(flow)


def passthrough_residual(state: ThermalState, network: CoupledNetwork, e: int, k: int) -> float:
    if network.edges[e].kind not in PASSTHROUGH_KINDS:
        raise ValueError(f"edge {network.edges[e].id} is not a passthrough component")
    return float(state.T_out[e, k] - state.T[network.edge_endpoints[0][e], k])


def thermal_inequality_set(state: ThermalState, hydraulic: HydraulicState, network: CoupledNetwork, k: int,
                           phi_bounds: Dict[str, Tuple[float, float]],
                           previous_outlet: Dict[str, float]) -> np.ndarray:
    """Φ band, producer ramp and minimum outlet, hydraulic bands, node temperature band."""
    out = []
    for n, part in enumerate(network.dhn_participants()):
        e = network.edge_index[part.edge]
        lo, hi = phi_bounds.get(part.id, (0.0, np.inf))
        out += [state.phi[n, k] - lo, hi - state.phi[n, k]]
        if part.dhn_role == Role.PRODUCER:
            prev = previous_outlet.get(part.id)
            if prev is not None:
                delta = state.T_out[e, k] - prev
                out += [part.ramp - delta, part.ramp + delta]
            if part.t_out_min is not None:
                out.append(state.T_out[e, k] - part.t_out_min)
    out += list(hydraulic_inequality_set(hydraulic, network, k))
    for i, node in enumerate(network.nodes):
        if node.t_min is not None:
            out.append(state.T[i, k] - node.t_min)
        if node.t_max is not None:
            out.append(node.t_max - state.T[i, k])
    return np.asarray(out, dtype=float)


# ------------------------------
# plant
# ------------------------------

@dataclass
class PlantTemperatures:
    T: np.ndarray                # (n_node,)
    T_out: np.ndarray            # (n_edge,)
    T_out1: np.ndarray           # (n_pipe,) lossless pipeline outlet
    residence: np.ndarray        # (n_pipe,) s
    delivered: Dict[str, float]  # heat taken by each consumer [MW]


def simulate_plant_temperatures(network: CoupledNetwork, history: ThermalHistory, flows: np.ndarray,
                                phi: Dict[str, float], t_ambient: float,
                                previous: Optional[np.ndarray] = None) -> PlantTemperatures:
    """Exact temperatures of step `history.last_step + 1` from realised flows and committed heat.

    One sparse linear system in (T_node, T_out): mixing per node, exact node method per
    pipeline, producer heat rise, consumer characteristic, passthrough elsewhere. Nodes
    without through-flow keep their `previous` temperature.
    """
    k = history.last_step + 1
    n_node, n_edge = len(network.nodes), len(network.edges)
    src, dst = network.edge_endpoints
    flows = np.asarray(flows, dtype=float)
    cp = network.water.cp
    previous = np.full(n_node, np.nan) if previous is None else np.asarray(previous, dtype=float)
    participants = {p.edge: p for p in network.dhn_participants()}
    trip = Triplets()
    rhs = np.zeros(n_node + n_edge)

    outflow = np.bincount(src, weights=np.maximum(flows, 0.0), minlength=n_node)
    for i in range(n_node):
        if outflow[i] > 1e-9:
            trip.add([i], [i], [outflow[i]])
            into = np.flatnonzero(dst == i)
            trip.add(np.full(into.size, i), n_node + into, -np.maximum(flows[into], 0.0))
        else:
            trip.add([i], [i], [1.0])
            rhs[i] = previous[i] if np.isfinite(previous[i]) else 0.0

    pipe_pos = history.index
    T_out1 = np.zeros(len(history.pipelines))
    residence = np.zeros(len(history.pipelines))
    head = np.zeros(len(history.pipelines))
    for e, edge in enumerate(network.edges):
        row = n_node + e
        trip.add([row], [row], [1.0])
        i = src[e]
        if edge.kind == EdgeKind.PIPELINE:
            pos = pipe_pos[edge.id]
            flows_back = np.concatenate([[max(flows[e], flow_floor(edge))], history.flows[pos]])
            win = window_from_flows(flows_back, history.masses[pos], history.dt)
            w = outlet_weights(win, flows_back, history.dt)
            decay = decay_factor(float(w @ np.arange(w.size)) * history.dt, network.pipeline_time_constant(e))
            past = float(w[1:] @ history.temps[pos, :w.size - 1])
            trip.add([row], [i], [-decay * w[0]])
            rhs[row] = decay * past + t_ambient * (1.0 - decay)
            residence[pos] = float(w @ np.arange(w.size)) * history.dt
            T_out1[pos] = past
            head[pos] = w[0]
        elif edge.kind == EdgeKind.PRODUCER:
            trip.add([row], [i], [-1.0])
            part = participants.get(edge.id)
            if part is not None and flows[e] > 1e-9:
                rhs[row] = phi.get(part.id, 0.0) * MW / (cp * flows[e])
        elif edge.kind == EdgeKind.CONSUMER:
            part = participants.get(edge.id)
            curve = (part.curve if part is not None else None) or ConsumerCurve()
            trip.add([row], [i], [-curve.slope_supply])
            demand = phi.get(part.id, 0.0) if part is not None else 0.0
            rhs[row] = (curve.t_return - curve.slope_supply * curve.t_supply_ref
                        + curve.slope_ambient * (t_ambient - curve.t_ambient_ref) + curve.slope_power * demand)
        else:
            trip.add([row], [i], [-1.0])

    matrix = trip.matrix((n_node + n_edge, n_node + n_edge)).tocsc()
    solution = spsolve(matrix, rhs)
    if not np.all(np.isfinite(solution)):
        raise HistoryError(f"plant temperature system is singular at step {k}")
    T, T_out = solution[:n_node], solution[n_node:]

    for e in network.edges_of_kind(EdgeKind.PIPELINE):
        pos = pipe_pos[network.edges[e].id]
        T_out1[pos] += head[pos] * T[src[e]]

    delivered = {}
    for edge_id, part in participants.items():
        if part.dhn_role == Role.CONSUMER:
            e = network.edge_index[edge_id]
            delivered[part.id] = float(flows[e] * cp * (T[src[e]] - T_out[e]) / MW)
    return PlantTemperatures(T=T, T_out=T_out, T_out1=T_out1, residence=residence, delivered=delivered)


def advance_history(history: ThermalHistory, network: CoupledNetwork, plant: PlantTemperatures, flows):
    """Record the plant step in the history; flows below the floor are kept at the floor."""
    src = network.edge_endpoints[0]
    temps, recorded = [], []
    for pipe in history.pipelines:
        e = network.edge_index[pipe]
        temps.append(plant.T[src[e]])
        recorded.append(max(flows[e], flow_floor(network.edges[e])))
    history.push(np.array(temps), np.array(recorded))


# ------------------------------
# NLP blocks
# ------------------------------

def mixing_block(network: CoupledNetwork, n: int, m_idx, t_idx, tout_idx) -> BilinearBlock:
    """(Σ_out ṁ) T_i − Σ_in ṁ T_out per node and step; row j·N + i."""
    N = len(network.nodes)
    E, H = m_idx.shape
    rows = RowBuilder("dhn.mixing", n)
    for _ in range(N * H):
        rows.row()
    src, dst = network.edge_endpoints
    for j in range(H):
        for e in range(E):
            rows.bilinear(j * N + src[e], m_idx[e, j], t_idx[src[e], j], 1.0)
            rows.bilinear(j * N + dst[e], m_idx[e, j], tout_idx[e, j], -1.0)
    return rows.build()


def pipeline_outlet_block(network: CoupledNetwork, n: int, omega: OmegaWeights, history: ThermalHistory,
                          t_idx, tout_idx, t_ambient: Sequence[float]) -> LinearBlock:
    """Lossy pipeline outlets from the frozen windows; linear in node temperatures."""
    src = network.edge_endpoints[0]
    H = omega.steps
    k0 = history.last_step + 1
    trip = Triplets()
    const = []
    row = 0
    for pos, pipe in enumerate(omega.pipelines):
        e = network.edge_index[pipe]
        tau = network.pipeline_time_constant(e)
        for j in range(H):
            w = omega.coefficients[pos][j]
            decay = float(decay_factor(omega.residence[pos, j], tau))
            trip.add([row], [tout_idx[e, j]], [1.0])
            c = -t_ambient[j] * (1.0 - decay)
            for o in np.flatnonzero(w):
                if j - o >= 0:
                    trip.add([row], [t_idx[src[e], j - o]], [-decay * w[o]])
                else:
                    c -= decay * w[o] * history.temp_at(pos, k0 + j - o)
            const.append(c)
            row += 1
    return LinearBlock("dhn.pipelines", trip.matrix((row, n)), np.asarray(const))


def _phi(rows: RowBuilder, row: int, term: PhiTerm, j: int, sign: float):
    idx, const = term
    if idx is not None:
        rows.linear(row, idx[j], sign)
    else:
        rows.add_const(row, sign * const[j])


def producer_block(network: CoupledNetwork, n: int, m_idx, t_idx, tout_idx, phi: Dict[str, PhiTerm]):
    """c_p ṁ (T_out − T_in) − Φ per producer and step [MW]."""
    src = network.edge_endpoints[0]
    H = m_idx.shape[1]
    c = network.water.cp / MW
    rows = RowBuilder("dhn.producers", n)
    for part in network.dhn_participants():
        if part.dhn_role != Role.PRODUCER:
            continue
        e = network.edge_index[part.edge]
        for j in range(H):
            r = rows.row()
            rows.bilinear(r, m_idx[e, j], tout_idx[e, j], c)
            rows.bilinear(r, m_idx[e, j], t_idx[src[e], j], -c)
            _phi(rows, r, phi[part.id], j, -1.0)
    return rows.build()


def consumer_blocks(network: CoupledNetwork, n: int, m_idx, t_idx, tout_idx, phi: Dict[str, PhiTerm],
                    t_ambient: Sequence[float]):
    """Characteristic-curve outlet rows and heat balance rows per consumer and step."""
    src = network.edge_endpoints[0]
    H = m_idx.shape[1]
    c = network.water.cp / MW
    outlet = RowBuilder("dhn.consumer_outlets", n)
    balance = RowBuilder("dhn.consumer_flows", n)
    for part in network.dhn_participants():
        if part.dhn_role != Role.CONSUMER:
            continue
        e = network.edge_index[part.edge]
        curve = part.curve or ConsumerCurve()
        for j in range(H):
            r = outlet.row(-(curve.t_return - curve.slope_supply * curve.t_supply_ref
                             + curve.slope_ambient * (t_ambient[j] - curve.t_ambient_ref)))
            outlet.linear(r, tout_idx[e, j], 1.0)
            outlet.linear(r, t_idx[src[e], j], -curve.slope_supply)
            _phi(outlet, r, phi[part.id], j, -curve.slope_power)
            r = balance.row()
            balance.bilinear(r, m_idx[e, j], t_idx[src[e], j], c)
            balance.bilinear(r, m_idx[e, j], tout_idx[e, j], -c)
            _phi(balance, r, phi[part.id], j, -1.0)
    return outlet.build(), balance.build()


def passthrough_block(network: CoupledNetwork, n: int, t_idx, tout_idx) -> LinearBlock:
    src = network.edge_endpoints[0]
    H = t_idx.shape[1]
    edges = [e for e, ed in enumerate(network.edges) if ed.kind in PASSTHROUGH_KINDS]
    # consumer edges without a participant behave like a passthrough as well
    owned = {p.edge for p in network.dhn_participants()}
    edges += [e for e, ed in enumerate(network.edges)
              if ed.kind in (EdgeKind.CONSUMER, EdgeKind.PRODUCER) and ed.id not in owned]
    trip = Triplets()
    row = 0
    for e in edges:
        for j in range(H):
            trip.add([row, row], [tout_idx[e, j], t_idx[src[e], j]], [1.0, -1.0])
            row += 1
    return LinearBlock("dhn.passthrough", trip.matrix((row, n)), np.zeros(row))


def ramp_rows(network: CoupledNetwork, n: int, tout_idx, previous_outlet: Dict[str, float]):
    """ΔT^prod ± (T_out,j − T_out,j−1) ≥ 0 per producer; step 0 ramps from the realised outlet."""
    trip = Triplets()
    const, names = [], []
    row = 0
    H = tout_idx.shape[1]
    for part in network.dhn_participants():
        if part.dhn_role != Role.PRODUCER:
            continue
        e = network.edge_index[part.edge]
        prev = previous_outlet.get(part.id)
        for j in range(H):
            for sign in (-1.0, 1.0):
                trip.add([row], [tout_idx[e, j]], [sign])
                c = part.ramp
                if j > 0:
                    trip.add([row], [tout_idx[e, j - 1]], [-sign])
                elif prev is not None:
                    c -= sign * prev
                else:
                    c = np.inf
                const.append(c)
                names.append(f"ramp.{part.id}[{j}]")
                row += 1
    G = trip.matrix((row, n)).tocsr()
    const = np.asarray(const, dtype=float)
    keep = np.isfinite(const)
    return G[keep], const[keep], [nm for nm, kp in zip(names, keep) if kp]


# ------------------------------
# approximation accuracy experiment
# ------------------------------

@dataclass
class OracleConfig:
    length: float = 1000.0
    diameter: float = 0.2
    r_thermal: float = 3.0
    rho: float = 975.0
    cp: float = 4190.0
    dt: float = 900.0
    steps: int = 60
    flow: float = 20.0
    flow_step: float = 25.0
    flow_step_at: int = 21
    inlet_c: float = 90.0
    inlet_step_c: float = 100.0
    inlet_step_at: int = 20
    ambient_c: float = 10.0
    perfect_prediction: bool = False

    @classmethod
    def from_spec(cls, spec: dict, network: Optional[CoupledNetwork] = None) -> "OracleConfig":
        """Build from a scenario `oracle` section; geometry comes from the named pipeline."""
        changes = dict(steps=spec.get("steps", 60), flow=spec.get("flow_kg_s", 20.0),
                       flow_step=spec.get("flow_step_kg_s", 25.0), flow_step_at=spec.get("flow_step_at", 21),
                       inlet_c=spec.get("inlet_c", 90.0), inlet_step_c=spec.get("inlet_step_c", 100.0),
                       inlet_step_at=spec.get("inlet_step_at", 20), ambient_c=spec.get("ambient_c", 10.0),
                       perfect_prediction=bool(spec.get("perfect_prediction", False)))
        if network is not None and spec.get("pipeline") in network.edge_index:
            edge = network.edges[network.edge_index[spec["pipeline"]]]
            changes.update(length=edge.length, diameter=edge.diameter,
                           r_thermal=edge.r_thermal if edge.r_thermal is not None else math.inf,
                           rho=network.water.rho, cp=network.water.cp)
        return cls(**changes)


def oracle_experiment(config: OracleConfig = OracleConfig()) -> pd.DataFrame:
    """Exact node method against the ω model fed with one-step-shifted flow predictions.

    The pipeline starts in steady state; the prediction of the current flow is the
    previous realised flow, or the realised flow itself with `perfect_prediction`.
    Returns per step both lossy outlets and their deviation.
    """
    area = math.pi * config.diameter ** 2 / 4.0
    mass = config.rho * area * config.length
    tau = config.rho * config.cp * area * config.r_thermal
    ambient = config.ambient_c + KELVIN
    depth = math.ceil(mass / (min(config.flow, config.flow_step) * config.dt)) + 4
    history = ThermalHistory(pipelines=("oracle",), masses=np.array([mass]),
                             temps=np.full((1, depth), config.inlet_c + KELVIN),
                             flows=np.full((1, depth), config.flow), last_step=-1, dt=config.dt)
    rows = []
    for k in range(config.steps):
        flow = config.flow_step if k >= config.flow_step_at else config.flow
        inlet = (config.inlet_step_c if k >= config.inlet_step_at else config.inlet_c) + KELVIN
        predicted = flow if config.perfect_prediction else history.flow_at(0, k - 1)
        history.push([inlet], [flow])

        window = exact_window(history, "oracle", k)
        exact = lossy_outlet(lossless_outlet(history, window, flow, k, "oracle"),
                             residence_time(history, window, flow, k, "oracle"), ambient, tau)
        flows_back = _current_flows(history, 0, k, predicted)
        approx_window = window_from_flows(flows_back, mass, config.dt)
        approx = lossy_outlet(lossless_outlet(history, approx_window, predicted, k, "oracle"),
                              residence_time(history, approx_window, predicted, k, "oracle"), ambient, tau)
        rows.append({"step": k, "mass_flow_kg_s": flow, "predicted_flow_kg_s": predicted,
                     "inlet_k": inlet, "exact_outlet_k": exact, "approx_outlet_k": approx,
                     "deviation_k": exact - approx})
    return pd.DataFrame(rows)
