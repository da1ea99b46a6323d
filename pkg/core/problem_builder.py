"""
Horizon NLP of the combined auction.

Variable families (columns are horizon steps):
  epn.V, epn.delta                 per bus
  epn.P.<id>, epn.Q.<id>           signed injections of EPN participants [p.u.]
  epn.charge.<id>, epn.discharge.<id>   storage powers ≥ 0 [p.u.]
  dhn.m, dhn.dp, dhn.T_out         per edge
  dhn.T                            per node
  dhn.kv.<edge>, dhn.head.<edge>, dhn.dpr.<edge>   actuator setpoints
  dhn.phi.<id>                     thermal power magnitude of DHN participants [MW]

Objective is the negated welfare rate summed over the horizon [¤/h].
"""
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from rich import print as rprint
from scipy import sparse
from scipy.optimize import lsq_linear

from core.dhn_hydraulic import (ComponentLawBlock, HydraulicState, continuity_block, control_path_block, loop_block,
                                pressure_law, steady_flow_estimate)
from core.dhn_thermal import (ThermalHistory, OmegaWeights, consumer_blocks, mixing_block, passthrough_block,
                              pipeline_outlet_block, producer_block, ramp_rows)
from core.epn_model import PowerFlowBlock, angle_limit_rows
from core.market import ParticipantBid, Side
from core.network_model import QUADRATIC_KINDS, CoupledNetwork, EdgeKind, NetworkSide, NodeSide, Role, dof_audit
from core.nlp_core import LinearBlock, NlpProblem, Triplets, VariableLayout, bound_rows
from core.utils.errors import ConfigurationError

TEMPERATURE_SCALE = 100.0


@dataclass
class BuildOptions:
    include_epn: bool = True
    include_dhn: bool = True
    k0: int = 0
    dt_s: float = 900.0
    t_ambient: Optional[np.ndarray] = None              # K per horizon step
    previous_outlet: Optional[Dict[str, float]] = None  # realised producer outlet temperatures
    converter_power: Optional[Dict[str, np.ndarray]] = None   # MW signed, pins EPN side
    converter_heat: Optional[Dict[str, np.ndarray]] = None    # MW, pins DHN side
    zero_demand_weight: float = 1e-6
    guess: Optional[Dict[str, np.ndarray]] = None

    @property
    def dt_h(self) -> float:
        return self.dt_s / 3600.0


def _steps(bids: Dict[str, ParticipantBid]) -> int:
    sizes = {b.steps for b in bids.values()}
    if len(sizes) != 1:
        raise ConfigurationError(f"bids cover different horizons: {sorted(sizes)}")
    return sizes.pop()


def _guess(options: BuildOptions, name: str, default):
    if options.guess is not None and name in options.guess:
        return options.guess[name]
    return default


# ------------------------------
# EPN
# ------------------------------

def _epn_variables(layout: VariableLayout, network: CoupledNetwork, bids, H: int, options: BuildOptions,
                   objective: Dict[int, float]):
    base = network.base_mva
    nb = len(network.buses)
    v_lo = np.array([b.v_min for b in network.buses])[:, None]
    v_hi = np.array([b.v_max for b in network.buses])[:, None]
    v_idx = layout.add("epn.V", (nb, H), v_lo, v_hi, _guess(options, "epn.V", 1.0))
    d_lo = np.full((nb, H), -np.pi)
    d_hi = np.full((nb, H), np.pi)
    d_lo[network.reference_bus] = d_hi[network.reference_bus] = 0.0
    d_idx = layout.add("epn.delta", (nb, H), d_lo, d_hi, _guess(options, "epn.delta", 0.0))

    inj = Triplets()
    storage = []
    for part in network.epn_participants():
        bid = bids[part.id]
        i = network.bus_index[part.bus]
        p_rows = np.arange(H) * nb + i
        q_rows = p_rows + nb * H
        if bid.side == Side.STORAGE:
            terms = bid.storage
            ch = layout.add(f"epn.charge.{part.id}", H, 0.0, terms.charge_max / base,
                            _guess(options, f"epn.charge.{part.id}", 0.0), scale=max(terms.charge_max.max(), 1e-3) / base)
            dis = layout.add(f"epn.discharge.{part.id}", H, 0.0, terms.discharge_max / base,
                             _guess(options, f"epn.discharge.{part.id}", 0.0),
                             scale=max(terms.discharge_max.max(), 1e-3) / base)
            inj.add(p_rows, dis, 1.0)
            inj.add(p_rows, ch, -1.0)
            for j in range(H):
                c = float(bid.price[j]) * base
                objective[dis[j]] = objective.get(dis[j], 0.0) + c
                objective[ch[j]] = objective.get(ch[j], 0.0) - c
            storage.append((part.id, ch, dis, terms))
        else:
            fixed = (options.converter_power or {}).get(part.id) if part.network == NetworkSide.CONVERTER else None
            if fixed is not None:
                lo = hi = np.asarray(fixed, dtype=float)[:H] / base
            elif bid.side == Side.OFFER:
                lo, hi = bid.p_min / base, bid.p_max / base
            else:
                lo, hi = -bid.p_max / base, -bid.p_min / base
            p = layout.add(f"epn.P.{part.id}", H, lo, hi, _guess(options, f"epn.P.{part.id}", 0.5 * (lo + hi)),
                           scale=max(float(np.max(np.abs([lo, hi]))), 1e-3))
            inj.add(p_rows, p, 1.0)
            for j in range(H):
                objective[p[j]] = objective.get(p[j], 0.0) + float(bid.price[j]) * base
        if part.q_min is not None and part.q_max is not None:
            q_lo, q_hi = part.q_min / base, part.q_max / base
            q = layout.add(f"epn.Q.{part.id}", H, q_lo, q_hi, _guess(options, f"epn.Q.{part.id}", 0.0),
                           scale=max(abs(q_lo), abs(q_hi), 1e-3))
            inj.add(q_rows, q, 1.0)
    return v_idx, d_idx, inj, storage


def _storage_rows(storage, n: int, H: int, dt_h: float, base: float):
    """Prefix energy rows that keep the stored energy of every battery inside [0, capacity]."""
    trip = Triplets()
    const = []
    row = 0
    for _, ch, dis, terms in storage:
        eta2 = terms.efficiency ** 2
        for k in range(H):
            js = np.arange(k + 1)
            trip.add(np.full(js.size, row), dis[js], -dt_h * base)
            trip.add(np.full(js.size, row), ch[js], eta2 * dt_h * base)
            const.append(terms.discharge_budget)
            trip.add(np.full(js.size, row + 1), ch[js], -dt_h * base)
            trip.add(np.full(js.size, row + 1), dis[js], dt_h * base / eta2)
            const.append(terms.charge_budget)
            row += 2
    return trip.matrix((row, n)).tocsr(), np.asarray(const)


def _budget_rows(network: CoupledNetwork, bids, layout: VariableLayout, n: int, dt_h: float):
    """Energy windows of the bids: budget − Σ |power|·Δk ≥ 0 per window."""
    trip = Triplets()
    const = []
    row = 0
    for part in network.participants:
        bid = bids.get(part.id)
        if bid is None or not bid.budget:
            continue
        if f"epn.P.{part.id}" in layout.families:
            name = f"epn.P.{part.id}"
            factor = network.base_mva * (1.0 if bid.side == Side.OFFER else -1.0)
        elif f"dhn.phi.{part.id}" in layout.families:
            name, factor = f"dhn.phi.{part.id}", 1.0
        else:
            continue
        idx = layout.indices(name)
        for w in bid.budget:
            js = np.arange(w.start, w.stop)
            trip.add(np.full(js.size, row), idx[js], -factor * dt_h)
            const.append(w.energy)
            row += 1
    return trip.matrix((row, n)).tocsr(), np.asarray(const, dtype=float)


# ------------------------------
# DHN
# ------------------------------

def _actuator_drops(network: CoupledNetwork, flows: np.ndarray, dp: np.ndarray, k0: int) -> np.ndarray:
    """Valve, DPR and free pump drops that close every loop and meet the control-path setpoints.

    Bounded least squares over the actuator edges; valves may only throttle beyond their
    fully open drop, so the implied K_v stays inside (0, K_vs]."""
    free, lo, hi = [], [], []
    for e, edge in enumerate(network.edges):
        if edge.kind == EdgeKind.VALVE:
            bounds = (1.05 * pressure_law(network, e, flows[e]), np.inf)
        elif edge.kind == EdgeKind.DPR:
            bounds = (edge.dpr_min, edge.dpr_max if edge.dpr_max is not None else np.inf)
        elif edge.kind == EdgeKind.PUMP and network.pump_mode == "decision":
            bounds = (-(edge.head_max if edge.head_max is not None else np.inf), -edge.head_min)
        else:
            continue
        a = max(bounds[0], edge.dp_min if edge.dp_min is not None else -np.inf)
        b = min(bounds[1], edge.dp_max if edge.dp_max is not None else np.inf)
        if b - a <= 1e-12:
            dp[e] = a
            continue
        free.append(e)
        lo.append(a)
        hi.append(b)
    rows = []
    if network.B is not None and network.B.shape[0]:
        rows.append((network.B, np.zeros(network.B.shape[0])))
    if network.R is not None and network.R.shape[0]:
        rows.append((network.R, np.array([path.setpoint(k0) for path in network.control_paths], dtype=float)))
    if not free or not rows:
        return dp
    M = sparse.vstack([mat for mat, _ in rows]).toarray()
    target = np.concatenate([rhs for _, rhs in rows])
    known = np.setdiff1d(np.arange(len(network.edges)), free)
    rhs = target - M[:, known] @ dp[known]
    fit = lsq_linear(M[:, free], rhs, bounds=(np.array(lo), np.array(hi)), method="bvls")
    dp[free] = fit.x
    if fit.cost > 1e-12:
        rprint(f"[yellow]⚠️ Start point leaves a pressure residual of {np.sqrt(2 * fit.cost):.3g} bar[/yellow]")
    return dp


def default_guess(network: CoupledNetwork, bids: Dict[str, ParticipantBid], H: int,
                  supply_k: float, return_k: float, flows: Optional[np.ndarray] = None,
                  node_temperatures: Optional[np.ndarray] = None, k0: int = 0) -> Dict[str, np.ndarray]:
    """Cold-start point consistent with every DHN law at step 0.

    Consumer flows follow the first-step bid midpoints, the rest of the network is closed by a
    minimum-norm continuity correction; actuators take up the pressure balance and the
    producer heat (and converter power) matches the flows."""
    guess = {}
    if not network.has_dhn:
        return guess
    cp = network.water.cp
    if node_temperatures is not None:
        side_t = np.asarray(node_temperatures, dtype=float).copy()
    else:
        side_t = np.array([supply_k if n.side == NodeSide.SUPPLY else return_k for n in network.nodes])
    src = network.edge_endpoints[0]
    t_out = side_t[src].copy()
    for part in network.dhn_participants():
        e = network.edge_index[part.edge]
        if part.dhn_role == Role.PRODUCER:
            t_out[e] = max(supply_k, part.t_out_min if part.t_out_min is not None else -np.inf)
        elif part.curve is not None:
            t_out[e] = part.curve.evaluate(side_t[src[e]], part.curve.t_ambient_ref, 0.0)
        else:
            t_out[e] = return_k

    if flows is None:
        pinned = {}
        for part in network.dhn_participants():
            if part.dhn_role == Role.CONSUMER and part.id in bids:
                bid = bids[part.id]
                e = network.edge_index[part.edge]
                phi = 0.5 * (bid.p_min[0] + bid.p_max[0])
                pinned[part.edge] = phi * 1e6 / (cp * max(side_t[src[e]] - t_out[e], 1.0))
        flows = steady_flow_estimate(network, pinned)
    flows = np.clip(flows, [e.m_min for e in network.edges], [e.m_max for e in network.edges])
    guess["dhn.m"] = np.repeat(flows[:, None], H, axis=1)

    dp = np.zeros(len(network.edges))
    for e, edge in enumerate(network.edges):
        if edge.kind in QUADRATIC_KINDS:
            dp[e] = pressure_law(network, e, flows[e])
        elif edge.kind == EdgeKind.PUMP:
            dp[e] = -(edge.head_setpoint if edge.head_setpoint is not None else edge.head_min)
        elif edge.kind == EdgeKind.DPR:
            dp[e] = edge.dpr_min
    dp = _actuator_drops(network, flows, dp, k0)
    rho = network.water.rho
    for e, edge in enumerate(network.edges):
        if edge.kind == EdgeKind.VALVE:
            kv = abs(flows[e]) * np.sqrt(edge.dp0 / (edge.rho0 * rho * dp[e])) if dp[e] > 0 else edge.kvs
            guess[f"dhn.kv.{edge.id}"] = np.full(H, float(np.clip(kv, 1e-3 * edge.kvs, edge.kvs)))
        elif edge.kind == EdgeKind.PUMP and network.pump_mode == "decision":
            guess[f"dhn.head.{edge.id}"] = np.full(H, -dp[e])
        elif edge.kind == EdgeKind.DPR:
            guess[f"dhn.dpr.{edge.id}"] = np.full(H, dp[e])
    guess["dhn.dp"] = np.repeat(dp[:, None], H, axis=1)
    guess["dhn.T"] = np.repeat(side_t[:, None], H, axis=1)
    guess["dhn.T_out"] = np.repeat(t_out[:, None], H, axis=1)

    base = network.base_mva
    for part in network.dhn_participants():
        e = network.edge_index[part.edge]
        heat = cp * flows[e] * abs(t_out[e] - side_t[src[e]]) / 1e6
        guess[f"dhn.phi.{part.id}"] = np.full(H, heat)
        if part.network == NetworkSide.CONVERTER and part.zeta:
            sign = -1.0 if part.epn_role == Role.CONSUMER else 1.0
            guess[f"epn.P.{part.id}"] = np.full(H, sign * heat / part.zeta / base)
    return guess


def _dhn_variables(layout: VariableLayout, network: CoupledNetwork, bids, H: int, options: BuildOptions,
                   objective: Dict[int, float], quad: Dict[int, float]):
    edges = network.edges
    E, N = len(edges), len(network.nodes)
    m_lo = np.array([e.m_min for e in edges])[:, None]
    m_hi = np.array([e.m_max for e in edges])[:, None]
    m_idx = layout.add("dhn.m", (E, H), m_lo, m_hi, _guess(options, "dhn.m", 0.5 * (m_lo + m_hi)),
                       scale=max(float(np.max(np.abs(m_hi))), 1.0))
    dp_lo = np.array([e.dp_min if e.dp_min is not None else -np.inf for e in edges])[:, None]
    dp_hi = np.array([e.dp_max if e.dp_max is not None else np.inf for e in edges])[:, None]
    dp_idx = layout.add("dhn.dp", (E, H), dp_lo, dp_hi, _guess(options, "dhn.dp", 0.0))

    kv_idx, head_idx, head_const, dpr_idx = {}, {}, {}, {}
    for e, edge in enumerate(edges):
        if edge.kind == EdgeKind.VALVE:
            kv_idx[e] = layout.add(f"dhn.kv.{edge.id}", H, 0.0, edge.kvs,
                                   _guess(options, f"dhn.kv.{edge.id}", 0.5 * edge.kvs), scale=edge.kvs)
        elif edge.kind == EdgeKind.PUMP:
            if network.pump_mode == "decision":
                hi = edge.head_max if edge.head_max is not None else np.inf
                init = edge.head_setpoint if edge.head_setpoint is not None else edge.head_min
                head_idx[e] = layout.add(f"dhn.head.{edge.id}", H, edge.head_min, hi,
                                         _guess(options, f"dhn.head.{edge.id}", init))
            else:
                head_const[e] = edge.head_setpoint
        elif edge.kind == EdgeKind.DPR:
            hi = edge.dpr_max if edge.dpr_max is not None else np.inf
            dpr_idx[e] = layout.add(f"dhn.dpr.{edge.id}", H, edge.dpr_min, hi,
                                    _guess(options, f"dhn.dpr.{edge.id}", edge.dpr_min))

    t_lo = np.array([n.t_min if n.t_min is not None else -np.inf for n in network.nodes])[:, None]
    t_hi = np.array([n.t_max if n.t_max is not None else np.inf for n in network.nodes])[:, None]
    t_idx = layout.add("dhn.T", (N, H), t_lo, t_hi, _guess(options, "dhn.T", 350.0), scale=TEMPERATURE_SCALE)
    tout_lo = np.full((E, H), -np.inf)
    for part in network.dhn_participants():
        if part.dhn_role == Role.PRODUCER and part.t_out_min is not None:
            tout_lo[network.edge_index[part.edge]] = part.t_out_min
    tout_idx = layout.add("dhn.T_out", (E, H), tout_lo, np.inf, _guess(options, "dhn.T_out", 350.0),
                          scale=TEMPERATURE_SCALE)

    phi = {}
    for part in network.dhn_participants():
        bid = bids[part.id]
        fixed = (options.converter_heat or {}).get(part.id) if part.network == NetworkSide.CONVERTER else None
        if fixed is not None:
            lo = hi = np.asarray(fixed, dtype=float)[:H]
        elif part.network == NetworkSide.CONVERTER and options.include_epn:
            lo, hi = np.zeros(H), np.full(H, np.inf)
        elif part.network == NetworkSide.CONVERTER:
            lo, hi = part.zeta * bid.p_min, part.zeta * bid.p_max
        else:
            lo, hi = bid.p_min, bid.p_max
        upper = hi if np.all(np.isfinite(hi)) else part.zeta * bid.p_max
        idx = layout.add(f"dhn.phi.{part.id}", H, lo, hi, _guess(options, f"dhn.phi.{part.id}", 0.5 * (lo + upper)),
                         scale=max(float(np.max(upper)), 1e-2))
        phi[part.id] = (idx, np.zeros(H))
        e = network.edge_index[part.edge]
        if part.network == NetworkSide.CONVERTER:
            for j in range(H):
                objective[idx[j]] = objective.get(idx[j], 0.0) + bid.heat_price(j)
        else:
            sign = 1.0 if part.dhn_role == Role.PRODUCER else -1.0
            for j in range(H):
                objective[idx[j]] = objective.get(idx[j], 0.0) + sign * float(bid.price[j])
            if part.dhn_role == Role.CONSUMER:
                for j in range(H):
                    quad[m_idx[e, j]] = options.zero_demand_weight
    return m_idx, dp_idx, kv_idx, head_idx, head_const, dpr_idx, t_idx, tout_idx, phi


def _coupling_block(network: CoupledNetwork, layout: VariableLayout, H: int, n: int) -> LinearBlock:
    """Φ = ζ·|P| per converter and step (heat pumps consume P, CHPs produce it)."""
    trip = Triplets()
    row = 0
    for part in network.participants_on(NetworkSide.CONVERTER):
        p = layout.indices(f"epn.P.{part.id}")
        phi = layout.indices(f"dhn.phi.{part.id}")
        sign = 1.0 if part.epn_role == Role.CONSUMER else -1.0
        for j in range(H):
            trip.add([row, row], [phi[j], p[j]], [1.0, sign * part.zeta * network.base_mva])
            row += 1
    return LinearBlock("coupling", trip.matrix((row, n)), np.zeros(row))


# ------------------------------
# assembly
# ------------------------------

def assemble(network: CoupledNetwork, bids: Dict[str, ParticipantBid], forecasts: Dict[str, np.ndarray],
             thermal_history: Optional[ThermalHistory], omega: Optional[OmegaWeights], horizon,
             options: Optional[BuildOptions] = None) -> NlpProblem:
    """Horizon NLP for the networks selected in `options`.

    `forecasts` carries per-step exogenous series cut to the horizon (only `ambient_k` is read
    here; participant forecasts already live in the bids). `horizon` supplies `steps` and `dt_s`.
    """
    options = options or BuildOptions()
    H = _steps(bids)
    if H != horizon.steps:
        raise ConfigurationError(f"bids cover {H} steps, horizon has {horizon.steps}")
    include_epn = options.include_epn and network.has_epn
    include_dhn = options.include_dhn and network.has_dhn
    if not include_epn and not include_dhn:
        raise ConfigurationError("nothing to optimise: both networks excluded")

    layout = VariableLayout()
    objective: Dict[int, float] = {}
    quad: Dict[int, float] = {}
    blocks = []
    ineq = []     # (name, G rows without n, const)
    meta = {"steps": H, "k0": options.k0, "include_epn": include_epn, "include_dhn": include_dhn}

    if include_epn:
        v_idx, d_idx, inj, storage = _epn_variables(layout, network, bids, H, options, objective)
        meta["storage"] = [s[0] for s in storage]
    if include_dhn:
        if thermal_history is None or omega is None:
            raise ConfigurationError("DHN assembly needs a thermal history and ω weights")
        audit = dof_audit(network)
        meta["dof"] = audit
        (m_idx, dp_idx, kv_idx, head_idx, head_const, dpr_idx,
         t_idx, tout_idx, phi) = _dhn_variables(layout, network, bids, H, options, objective, quad)

    fixed_idx, fixed_val = layout.release_fixed()
    n = layout.n

    if include_epn:
        inj_matrix = inj.matrix((2 * len(network.buses) * H, n)).tocsr()
        blocks.append(PowerFlowBlock(network, v_idx, d_idx, inj_matrix, np.zeros(inj_matrix.shape[0])))
        G, c = angle_limit_rows(network, d_idx, n)
        ineq.append(("angles", G, c))
        G, c = _storage_rows(storage, n, H, options.dt_h, network.base_mva)
        ineq.append(("storage", G, c))
    if include_dhn:
        t_amb = np.asarray(options.t_ambient if options.t_ambient is not None else forecasts["ambient_k"],
                           dtype=float)[:H]
        blocks += [continuity_block(network, m_idx, n), loop_block(network, dp_idx, n),
                   control_path_block(network, dp_idx, n, options.k0),
                   ComponentLawBlock(network, n, m_idx, dp_idx, kv_idx, head_idx, head_const, dpr_idx),
                   mixing_block(network, n, m_idx, t_idx, tout_idx),
                   pipeline_outlet_block(network, n, omega, thermal_history, t_idx, tout_idx, t_amb),
                   producer_block(network, n, m_idx, t_idx, tout_idx, phi),
                   *consumer_blocks(network, n, m_idx, t_idx, tout_idx, phi, t_amb),
                   passthrough_block(network, n, t_idx, tout_idx)]
        G, c, _ = ramp_rows(network, n, tout_idx, options.previous_outlet or {})
        ineq.append(("ramp", G, c))
    if include_epn and include_dhn and network.participants_on(NetworkSide.CONVERTER):
        blocks.append(_coupling_block(network, layout, H, n))
    G, c = _budget_rows(network, bids, layout, n, options.dt_h)
    if G.shape[0]:
        ineq.append(("budget", G, c))
    if fixed_idx.size:
        pin = sparse.csr_matrix((np.ones(fixed_idx.size), (np.arange(fixed_idx.size), fixed_idx)),
                                shape=(fixed_idx.size, n))
        blocks.append(LinearBlock("fixed", pin, -fixed_val))

    G_b, c_b = bound_rows(layout)
    ineq.insert(0, ("bounds", G_b, c_b))
    names, offset = {}, 0
    for name, G, c in ineq:
        names[name] = slice(offset, offset + G.shape[0])
        offset += G.shape[0]
    G_all = sparse.vstack([G for _, G, _ in ineq], format="csr") if ineq else sparse.csr_matrix((0, n))
    c_all = np.concatenate([c for _, _, c in ineq]) if ineq else np.zeros(0)

    obj = np.zeros(n)
    for i, v in objective.items():
        obj[i] = v
    q = np.zeros(n)
    for i, v in quad.items():
        q[i] = v
    problem = NlpProblem(layout=layout, objective=obj, blocks=blocks, ineq_matrix=G_all, ineq_const=c_all,
                         ineq_names=names, quad_weight=q, meta=meta)
    problem.check_dimensions()
    return problem


# ------------------------------
# reading solutions
# ------------------------------

def solution_values(problem: NlpProblem, x: np.ndarray) -> Dict[str, np.ndarray]:
    return {name: problem.layout.view(x, name).copy() for name in problem.layout.families}


def shift_values(values: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Trajectories moved one step forward with the last step repeated (warm start)."""
    return {name: np.concatenate([v[..., 1:], v[..., -1:]], axis=-1) for name, v in values.items()}


def dispatch_values(network: CoupledNetwork, values: Dict[str, np.ndarray], k: int = 0) -> dict:
    """Committed powers of horizon step `k` in MW: {power, heat, charge, discharge}."""
    base = network.base_mva
    out = {"power": {}, "heat": {}, "charge": {}, "discharge": {}}
    for part in network.participants:
        if f"epn.P.{part.id}" in values:
            out["power"][part.id] = float(values[f"epn.P.{part.id}"][k]) * base
        elif f"epn.charge.{part.id}" in values:
            ch = float(values[f"epn.charge.{part.id}"][k]) * base
            dis = float(values[f"epn.discharge.{part.id}"][k]) * base
            out["charge"][part.id], out["discharge"][part.id] = ch, dis
            out["power"][part.id] = dis - ch
        if f"dhn.phi.{part.id}" in values:
            out["heat"][part.id] = float(values[f"dhn.phi.{part.id}"][k])
    return out


def hydraulic_values(network: CoupledNetwork, values: Dict[str, np.ndarray]) -> HydraulicState:
    m, dp = values["dhn.m"], values["dhn.dp"]
    state = HydraulicState(m=m, dp=dp, kv=np.zeros_like(m), head=np.zeros_like(m), dpr=np.zeros_like(m))
    for e, edge in enumerate(network.edges):
        if f"dhn.kv.{edge.id}" in values:
            state.kv[e] = values[f"dhn.kv.{edge.id}"]
        if f"dhn.head.{edge.id}" in values:
            state.head[e] = values[f"dhn.head.{edge.id}"]
        elif edge.kind == EdgeKind.PUMP and edge.head_setpoint is not None:
            state.head[e] = edge.head_setpoint
        if f"dhn.dpr.{edge.id}" in values:
            state.dpr[e] = values[f"dhn.dpr.{edge.id}"]
    return state


def pipeline_flows(network: CoupledNetwork, values: Dict[str, np.ndarray], pipelines: Sequence[str]) -> np.ndarray:
    m = values["dhn.m"]
    return np.array([m[network.edge_index[p]] for p in pipelines])
