"""
AC power flow of the electric network in polar form.

    P_i = Σ_j V_i V_j (G_ij cos δ_ij + B_ij sin δ_ij)
    Q_i = Σ_j V_i V_j (G_ij sin δ_ij − B_ij cos δ_ij)

Injections follow one sign convention: production positive, consumption negative.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

from core.network_model import CoupledNetwork, Participant
from core.nlp_core import EqualityBlock, Triplets
from core.utils.errors import ConfigurationError


@dataclass
class EpnState:
    """Bus voltages and participant injections, columns are timesteps."""
    V: np.ndarray          # (n_bus, K) p.u.
    delta: np.ndarray      # (n_bus, K) rad
    P: np.ndarray          # (n_participant, K) p.u.
    Q: np.ndarray          # (n_participant, K) p.u.

    @classmethod
    def flat(cls, network: CoupledNetwork, steps: int = 1) -> "EpnState":
        nb, npart = len(network.buses), len(network.epn_participants())
        return cls(V=np.ones((nb, steps)), delta=np.zeros((nb, steps)),
                   P=np.zeros((npart, steps)), Q=np.zeros((npart, steps)))


# ------------------------------
# helpers
# ------------------------------

@dataclass(frozen=True)
class _Branches:
    I: np.ndarray
    J: np.ndarray
    G: np.ndarray
    B: np.ndarray
    Gii: np.ndarray
    Bii: np.ndarray
    agg: sparse.csr_matrix     # n_bus x n_terms, sums terms into their first bus


def _branches(network: CoupledNetwork) -> _Branches:
    G, B = network.admittance
    off = (G != 0) | (B != 0)
    np.fill_diagonal(off, False)
    I, J = np.nonzero(off)
    nb = G.shape[0]
    agg = sparse.csr_matrix((np.ones(I.size), (I, np.arange(I.size))), shape=(nb, I.size))
    return _Branches(I=I, J=J, G=G[I, J], B=B[I, J], Gii=np.diag(G).copy(), Bii=np.diag(B).copy(), agg=agg)


def bus_injection_matrix(network: CoupledNetwork, participants: Optional[List[Participant]] = None) -> sparse.csr_matrix:
    """n_bus x n_participant map summing participant injections per bus."""
    participants = network.epn_participants() if participants is None else participants
    rows = [network.bus_index[p.bus] for p in participants]
    return sparse.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))),
                             shape=(len(network.buses), len(participants)))


def calculated_power(V, delta, br: _Branches) -> Tuple[np.ndarray, np.ndarray]:
    """Bus power leaving through the network; V, delta are (n_bus,) or (n_bus, K)."""
    Vi, Vj = V[br.I], V[br.J]
    th = delta[br.I] - delta[br.J]
    c, s = np.cos(th), np.sin(th)
    shape = (-1,) + (1,) * (V.ndim - 1)
    Gt, Bt = br.G.reshape(shape), br.B.reshape(shape)
    tP = Vi * Vj * (Gt * c + Bt * s)
    tQ = Vi * Vj * (Gt * s - Bt * c)
    P = br.agg @ tP + br.Gii.reshape(shape) * V ** 2
    Q = br.agg @ tQ - br.Bii.reshape(shape) * V ** 2
    return P, Q


# ------------------------------
# per-step operations
# ------------------------------

def power_flow_residual(state: EpnState, network: CoupledNetwork, k: int) -> Tuple[np.ndarray, np.ndarray]:
    br = _branches(network)
    M = bus_injection_matrix(network)
    P_calc, Q_calc = calculated_power(state.V[:, k], state.delta[:, k], br)
    return M @ state.P[:, k] - P_calc, M @ state.Q[:, k] - Q_calc


def epn_inequality_set(state: EpnState, network: CoupledNetwork, k: int,
                       envelopes: Dict[str, dict]) -> np.ndarray:
    """V − v_min, v_max − V per bus, then P/Q band residuals per flexible participant.

    `envelopes[id]` holds per-step injection bounds in p.u. (`p_min`, `p_max`, optional
    `q_min`, `q_max`).
    """
    out = []
    for i, bus in enumerate(network.buses):
        out += [state.V[i, k] - bus.v_min, bus.v_max - state.V[i, k]]
    for n, part in enumerate(network.epn_participants()):
        if not part.flexible:
            continue
        env = envelopes.get(part.id)
        if env is None:
            raise ConfigurationError(f"flexible participant {part.id} has no power envelope")
        p_min, p_max = np.atleast_1d(env["p_min"]), np.atleast_1d(env["p_max"])
        out += [state.P[n, k] - p_min[k % p_min.size], p_max[k % p_max.size] - state.P[n, k]]
        if env.get("q_min") is not None:
            q_min, q_max = np.atleast_1d(env["q_min"]), np.atleast_1d(env["q_max"])
            out += [state.Q[n, k] - q_min[k % q_min.size], q_max[k % q_max.size] - state.Q[n, k]]
    return np.asarray(out, dtype=float)


def epn_jacobian(state: EpnState, network: CoupledNetwork, k: int) -> sparse.csr_matrix:
    """Rows (ΔP, ΔQ) per bus; columns (V, δ, P_n, Q_n)."""
    br = _branches(network)
    nb = len(network.buses)
    npart = state.P.shape[0]
    V, d = state.V[:, k], state.delta[:, k]
    trip = Triplets()
    _power_flow_jacobian(trip, V, d, br, term_rows=(br.I, br.I + nb), bus_rows=(np.arange(nb), np.arange(nb) + nb),
                         col_v=np.arange(nb), col_d=np.arange(nb) + nb)
    M = bus_injection_matrix(network).tocoo()
    trip.add(M.row, 2 * nb + M.col, M.data)
    trip.add(M.row + nb, 2 * nb + npart + M.col, M.data)
    return trip.matrix((2 * nb, 2 * nb + 2 * npart)).tocsr()


def _power_flow_jacobian(trip: Triplets, V, d, br: _Branches, term_rows, bus_rows, col_v, col_d):
    """Residual derivatives (−∂P_calc, −∂Q_calc).

    `term_rows` = (P rows, Q rows) per branch term, `bus_rows` the same per bus; `col_v`, `col_d`
    are the V and δ columns per bus. Works for one step (1-d) or a horizon (n_bus, H).
    """
    Vi, Vj = V[br.I], V[br.J]
    th = d[br.I] - d[br.J]
    c, s = np.cos(th), np.sin(th)
    shape = (-1,) + (1,) * (V.ndim - 1)
    Gt, Bt = br.G.reshape(shape), br.B.reshape(shape)
    for a, b, rows in ((Gt, Bt, term_rows[0]), (-Bt, Gt, term_rows[1])):
        g = a * c + b * s
        dg = -a * s + b * c
        trip.add(rows, col_v[br.I], -Vj * g)
        trip.add(rows, col_v[br.J], -Vi * g)
        trip.add(rows, col_d[br.I], -Vi * Vj * dg)
        trip.add(rows, col_d[br.J], Vi * Vj * dg)
    trip.add(bus_rows[0], col_v, -2.0 * br.Gii.reshape(shape) * V)
    trip.add(bus_rows[1], col_v, 2.0 * br.Bii.reshape(shape) * V)


# ------------------------------
# NLP block
# ------------------------------

class PowerFlowBlock(EqualityBlock):
    """Nodal real/reactive balances for all buses and horizon steps.

    Rows are ordered (P rows k-major, then Q rows k-major): row k·n_bus + i.
    Injections enter linearly through `inj_matrix @ x + inj_const`.
    """
    name = "epn.balance"

    def __init__(self, network: CoupledNetwork, v_idx: np.ndarray, d_idx: np.ndarray,
                 inj_matrix: sparse.csr_matrix, inj_const: np.ndarray):
        self.br = _branches(network)
        self.v_idx, self.d_idx = v_idx, d_idx
        self.nb, self.H = v_idx.shape
        self.size = 2 * self.nb * self.H
        self.inj_matrix = sparse.csr_matrix(inj_matrix)
        self.inj_const = np.asarray(inj_const, dtype=float)
        k = np.arange(self.H)[None, :]
        self.term_row_p = k * self.nb + self.br.I[:, None]
        self.term_row_q = self.term_row_p + self.nb * self.H
        self.bus_row_p = k * self.nb + np.arange(self.nb)[:, None]
        self.bus_row_q = self.bus_row_p + self.nb * self.H

    def _vd(self, x):
        return x[self.v_idx], x[self.d_idx]

    def residual(self, x):
        V, d = self._vd(x)
        P, Q = calculated_power(V, d, self.br)
        return self.inj_matrix @ x + self.inj_const - np.concatenate([P.T.ravel(), Q.T.ravel()])

    def jacobian(self, x):
        V, d = self._vd(x)
        trip = Triplets()
        _power_flow_jacobian(trip, V, d, self.br, term_rows=(self.term_row_p, self.term_row_q),
                             bus_rows=(self.bus_row_p, self.bus_row_q), col_v=self.v_idx, col_d=self.d_idx)
        inj = self.inj_matrix.tocoo()
        trip.add(inj.row, inj.col, inj.data)
        return trip.matrix((self.size, self.inj_matrix.shape[1]))

    def hessian(self, x, lam):
        V, d = self._vd(x)
        br = self.br
        n = self.inj_matrix.shape[1]
        lam_p = lam[:self.nb * self.H].reshape(self.H, self.nb).T
        lam_q = lam[self.nb * self.H:].reshape(self.H, self.nb).T
        lp, lq = lam_p[br.I], lam_q[br.I]
        # λ_P·t_P + λ_Q·t_Q = V_i V_j (a cos θ + b sin θ)
        a = lp * br.G[:, None] - lq * br.B[:, None]
        b = lp * br.B[:, None] + lq * br.G[:, None]
        Vi, Vj = V[br.I], V[br.J]
        th = d[br.I] - d[br.J]
        c, s = np.cos(th), np.sin(th)
        g = a * c + b * s
        dg = -a * s + b * c
        vi, vj = self.v_idx[br.I], self.v_idx[br.J]
        di, dj = self.d_idx[br.I], self.d_idx[br.J]
        trip = Triplets()
        # residual = injection − Σ t, so every entry carries a minus sign
        trip.add(vi, vj, -g)
        trip.add(vi, di, -Vj * dg)
        trip.add(vi, dj, Vj * dg)
        trip.add(vj, di, -Vi * dg)
        trip.add(vj, dj, Vi * dg)
        trip.add(di, di, Vi * Vj * g)
        trip.add(di, dj, -Vi * Vj * g)
        trip.add(dj, dj, Vi * Vj * g)
        diag = lam_p * br.Gii[:, None] - lam_q * br.Bii[:, None]
        trip.add(self.v_idx, self.v_idx, -2.0 * diag)
        return trip.symmetric(n)


def angle_limit_rows(network: CoupledNetwork, d_idx: np.ndarray, n: int) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """|δ_i − δ_j| ≤ angle_max as two linear rows per limited feeder and step."""
    trip = Triplets()
    const = []
    row = 0
    H = d_idx.shape[1]
    for f in network.feeders:
        if f.angle_max is None:
            continue
        i, j = network.bus_index[f.from_bus], network.bus_index[f.to_bus]
        for k in range(H):
            trip.add([row, row, row + 1, row + 1], [d_idx[i, k], d_idx[j, k], d_idx[i, k], d_idx[j, k]],
                     [-1.0, 1.0, 1.0, -1.0])
            const += [f.angle_max, f.angle_max]
            row += 2
    return trip.matrix((row, n)).tocsr(), np.asarray(const, dtype=float)
