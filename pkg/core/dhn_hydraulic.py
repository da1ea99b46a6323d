"""
Stationary DHN hydraulics per timestep.

Edge Δp is the pressure drop from → to. Component laws:
  pipeline / producer / consumer   Δp − μ ṁ²           (ṁ|ṁ| where reversal is allowed)
  control valve                    K_v² ρ0 ρ Δp − Δp0 ṁ²
  controlled pump                  Δp + Δp_pump          (the head is a gain)
  dpr                              Δp − Δp_dpr
"""
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from rich import print as rprint
from scipy import sparse
from scipy.sparse.linalg import lsqr

from core.network_model import QUADRATIC_KINDS, CoupledNetwork, EdgeKind
from core.nlp_core import EqualityBlock, LinearBlock, Triplets


@dataclass
class HydraulicState:
    """Per-edge arrays, columns are timesteps; kv/head/dpr are only read on their edge kinds."""
    m: np.ndarray        # kg/s
    dp: np.ndarray       # bar
    kv: np.ndarray       # m³/s
    head: np.ndarray     # bar
    dpr: np.ndarray      # bar

    @classmethod
    def zeros(cls, network: CoupledNetwork, steps: int = 1) -> "HydraulicState":
        shape = (len(network.edges), steps)
        return cls(*(np.zeros(shape) for _ in range(5)))

    def column(self, k: int) -> "HydraulicState":
        return HydraulicState(*(a[:, k:k + 1] for a in (self.m, self.dp, self.kv, self.head, self.dpr)))


# ------------------------------
# residuals
# ------------------------------

def continuity_residual(state: HydraulicState, network: CoupledNetwork, k: int) -> np.ndarray:
    """Inflow minus outflow per node [kg/s]."""
    return network.A @ state.m[:, k]


def loop_residual(state: HydraulicState, network: CoupledNetwork, k: int) -> np.ndarray:
    return network.B @ state.dp[:, k]


def control_path_residual(state: HydraulicState, network: CoupledNetwork, k: int) -> np.ndarray:
    setpoints = np.array([p.setpoint(k) for p in network.control_paths])
    return network.R @ state.dp[:, k] - setpoints


def pressure_law(network: CoupledNetwork, e: int, m, kv=None):
    """Δp implied by the quadratic and valve laws for edge `e`."""
    edge = network.edges[e]
    if edge.kind in QUADRATIC_KINDS:
        return edge.mu * (m * np.abs(m) if edge.reversible else m * m)
    if edge.kind == EdgeKind.VALVE:
        kv = edge.kvs if kv is None else kv
        return edge.dp0 * m * m / (kv * kv * edge.rho0 * network.water.rho)
    raise ValueError(f"edge {edge.id} ({edge.kind.value}) has no flow-dependent law")


def component_pressure_residual(state: HydraulicState, network: CoupledNetwork, k: int,
                                smooth_valves: bool = False) -> np.ndarray:
    """Δp − φ(ṁ) per edge [bar]; `smooth_valves` returns the multiplied-through valve form."""
    out = np.zeros(len(network.edges))
    rho = network.water.rho
    for e, edge in enumerate(network.edges):
        m, dp = state.m[e, k], state.dp[e, k]
        if edge.kind in QUADRATIC_KINDS:
            out[e] = dp - pressure_law(network, e, m)
        elif edge.kind == EdgeKind.VALVE:
            kv = state.kv[e, k]
            if smooth_valves:
                out[e] = kv * kv * edge.rho0 * rho * dp - edge.dp0 * m * m
            else:
                out[e] = dp - pressure_law(network, e, m, kv)
        elif edge.kind == EdgeKind.PUMP:
            out[e] = dp + state.head[e, k]
        elif edge.kind == EdgeKind.DPR:
            out[e] = dp - state.dpr[e, k]
    return out


def hydraulic_inequality_set(state: HydraulicState, network: CoupledNetwork, k: int) -> np.ndarray:
    """ṁ bounds, Δp bounds, 0 ≤ K_v ≤ K_vs."""
    out = []
    for e, edge in enumerate(network.edges):
        m, dp = state.m[e, k], state.dp[e, k]
        out += [m - edge.m_min, edge.m_max - m]
        if edge.dp_min is not None:
            out.append(dp - edge.dp_min)
        if edge.dp_max is not None:
            out.append(edge.dp_max - dp)
        if edge.kind == EdgeKind.VALVE:
            out += [state.kv[e, k], edge.kvs - state.kv[e, k]]
    return np.asarray(out, dtype=float)


def steady_flow_estimate(network: CoupledNetwork, consumer_flows: Dict[str, float],
                         nominal: Optional[np.ndarray] = None) -> np.ndarray:
    """Mass flows closest to `nominal` that satisfy continuity with the given consumer-edge
    flows pinned (minimum-norm correction)."""
    n_edges = len(network.edges)
    if nominal is None:
        nominal = np.array([e.reference_flow if e.reference_flow is not None else 0.5 * (e.m_min + e.m_max)
                            for e in network.edges])
    m = np.asarray(nominal, dtype=float).copy()
    pinned = np.zeros(n_edges, dtype=bool)
    for edge_id, flow in consumer_flows.items():
        e = network.edge_index[edge_id]
        m[e] = flow
        pinned[e] = True
    keep = np.setdiff1d(np.arange(len(network.nodes)), network.continuity_reference_nodes)
    A = network.A.tocsr()[keep]
    A_free, A_pin = A[:, ~pinned], A[:, pinned]
    rhs = -(A_free @ m[~pinned] + A_pin @ m[pinned])
    correction = lsqr(A_free, rhs, atol=1e-14, btol=1e-14, iter_lim=10 * n_edges)[0]
    m[~pinned] += correction
    lo = np.array([e.m_min for e in network.edges])
    hi = np.array([e.m_max for e in network.edges])
    outside = (m < lo - 1e-9) | (m > hi + 1e-9)
    if np.any(outside):
        names = ", ".join(network.edges[i].id for i in np.flatnonzero(outside)[:5])
        rprint(f"[yellow]⚠️ Steady flow estimate leaves the flow band on {names}[/yellow]")
    return m


# ------------------------------
# NLP blocks
# ------------------------------

def _stack(matrix: sparse.spmatrix, idx: np.ndarray, n: int) -> sparse.csr_matrix:
    """Apply a per-step matrix to every column of an (E, H) index array."""
    matrix = sparse.coo_matrix(matrix)
    H = idx.shape[1]
    rows = (np.arange(H)[:, None] * matrix.shape[0] + matrix.row[None, :]).ravel()
    cols = idx[matrix.col[None, :], np.arange(H)[:, None]].ravel()
    vals = np.tile(matrix.data, H)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(H * matrix.shape[0], n))


def continuity_block(network: CoupledNetwork, m_idx: np.ndarray, n: int) -> LinearBlock:
    keep = np.setdiff1d(np.arange(len(network.nodes)), network.continuity_reference_nodes)
    A = network.A.tocsr()[keep]
    return LinearBlock("dhn.continuity", _stack(A, m_idx, n), np.zeros(A.shape[0] * m_idx.shape[1]))


def loop_block(network: CoupledNetwork, dp_idx: np.ndarray, n: int) -> LinearBlock:
    return LinearBlock("dhn.loops", _stack(network.B, dp_idx, n), np.zeros(network.B.shape[0] * dp_idx.shape[1]))


def control_path_block(network: CoupledNetwork, dp_idx: np.ndarray, n: int, k0: int) -> LinearBlock:
    H = dp_idx.shape[1]
    const = -np.array([[p.setpoint(k0 + k) for p in network.control_paths] for k in range(H)]).ravel()
    return LinearBlock("dhn.control_paths", _stack(network.R, dp_idx, n), const)


class ComponentLawBlock(EqualityBlock):
    """One pressure-flow law per edge and step; row k·E + e."""
    name = "dhn.components"

    def __init__(self, network: CoupledNetwork, n: int, m_idx, dp_idx, kv_idx: Dict[int, np.ndarray],
                 head_idx: Dict[int, np.ndarray], head_const: Dict[int, float], dpr_idx: Dict[int, np.ndarray]):
        self.n = n
        self.E, self.H = m_idx.shape
        self.size = self.E * self.H
        self.m_idx, self.dp_idx = m_idx, dp_idx
        self.rho = network.water.rho
        edges = network.edges
        self.quad = np.array([e for e, ed in enumerate(edges) if ed.kind in QUADRATIC_KINDS], dtype=int)
        self.mu = np.array([edges[e].mu for e in self.quad])
        self.rev = np.array([edges[e].reversible for e in self.quad], dtype=bool)
        self.valves = np.array(sorted(kv_idx), dtype=int)
        self.kv_idx = np.array([kv_idx[e] for e in self.valves]).reshape(-1, self.H)
        self.valve_c = np.array([edges[e].rho0 * self.rho for e in self.valves])
        self.valve_dp0 = np.array([edges[e].dp0 for e in self.valves])
        self.pumps_var = np.array(sorted(head_idx), dtype=int)
        self.head_idx = np.array([head_idx[e] for e in self.pumps_var]).reshape(-1, self.H)
        self.pumps_fix = np.array(sorted(head_const), dtype=int)
        self.head_const = np.array([head_const[e] for e in self.pumps_fix])
        self.dprs = np.array(sorted(dpr_idx), dtype=int)
        self.dpr_idx = np.array([dpr_idx[e] for e in self.dprs]).reshape(-1, self.H)
        self.rows = np.arange(self.H)[None, :] * self.E + np.arange(self.E)[:, None]

    def residual(self, x):
        m, dp = x[self.m_idx], x[self.dp_idx]
        r = np.zeros((self.E, self.H))
        if self.quad.size:
            mq = m[self.quad]
            sq = np.where(self.rev[:, None], mq * np.abs(mq), mq * mq)
            r[self.quad] = dp[self.quad] - self.mu[:, None] * sq
        if self.valves.size:
            kv = x[self.kv_idx]
            r[self.valves] = (kv * kv * self.valve_c[:, None] * dp[self.valves]
                              - self.valve_dp0[:, None] * m[self.valves] ** 2)
        if self.pumps_var.size:
            r[self.pumps_var] = dp[self.pumps_var] + x[self.head_idx]
        if self.pumps_fix.size:
            r[self.pumps_fix] = dp[self.pumps_fix] + self.head_const[:, None]
        if self.dprs.size:
            r[self.dprs] = dp[self.dprs] - x[self.dpr_idx]
        return r.T.ravel()

    def jacobian(self, x):
        m, dp = x[self.m_idx], x[self.dp_idx]
        trip = Triplets()
        if self.quad.size:
            mq = m[self.quad]
            d = np.where(self.rev[:, None], 2.0 * np.abs(mq), 2.0 * mq)
            trip.add(self.rows[self.quad], self.dp_idx[self.quad], 1.0)
            trip.add(self.rows[self.quad], self.m_idx[self.quad], -self.mu[:, None] * d)
        if self.valves.size:
            kv = x[self.kv_idx]
            rows = self.rows[self.valves]
            c = self.valve_c[:, None]
            trip.add(rows, self.dp_idx[self.valves], kv * kv * c)
            trip.add(rows, self.kv_idx, 2.0 * kv * c * dp[self.valves])
            trip.add(rows, self.m_idx[self.valves], -2.0 * self.valve_dp0[:, None] * m[self.valves])
        for edges, idx, sign in ((self.pumps_var, self.head_idx, 1.0), (self.dprs, self.dpr_idx, -1.0)):
            if edges.size:
                trip.add(self.rows[edges], self.dp_idx[edges], 1.0)
                trip.add(self.rows[edges], idx, sign)
        if self.pumps_fix.size:
            trip.add(self.rows[self.pumps_fix], self.dp_idx[self.pumps_fix], 1.0)
        return trip.matrix((self.size, self.n))

    def hessian(self, x, lam):
        lam = lam.reshape(self.H, self.E).T
        m, dp = x[self.m_idx], x[self.dp_idx]
        trip = Triplets()
        if self.quad.size:
            d2 = np.where(self.rev[:, None], 2.0 * np.sign(m[self.quad]), 2.0)
            trip.add(self.m_idx[self.quad], self.m_idx[self.quad], -lam[self.quad] * self.mu[:, None] * d2)
        if self.valves.size:
            kv = x[self.kv_idx]
            lv = lam[self.valves]
            c = self.valve_c[:, None]
            trip.add(self.kv_idx, self.kv_idx, lv * 2.0 * c * dp[self.valves])
            trip.add(self.kv_idx, self.dp_idx[self.valves], lv * 2.0 * c * kv)
            trip.add(self.m_idx[self.valves], self.m_idx[self.valves], -lv * 2.0 * self.valve_dp0[:, None])
        return trip.symmetric(self.n)

