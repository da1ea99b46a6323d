"""
Static description of the coupled electric power / district heating network.

Units inside a `CoupledNetwork`:
  EPN  -> per unit on `base_mva` (voltages, admittances, powers)
  DHN  -> kg/s, bar, K, MW; lengths in m, areas in m²
"""
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from rich import print as rprint
from scipy import sparse

from core.utils.errors import ConfigurationError, FrictionError

KELVIN = 273.15


class NodeSide(str, Enum):
    SUPPLY = "supply"
    RETURN = "return"


class EdgeKind(str, Enum):
    PIPELINE = "pipeline"
    PUMP = "controlled-pump"
    PRODUCER = "producer"
    VALVE = "control-valve"
    DPR = "dpr"
    CONSUMER = "consumer"


class NetworkSide(str, Enum):
    EPN = "epn"
    DHN = "dhn"
    CONVERTER = "converter"


class Role(str, Enum):
    PRODUCER = "producer"
    CONSUMER = "consumer"
    STORAGE = "storage"


QUADRATIC_KINDS = (EdgeKind.PIPELINE, EdgeKind.PRODUCER, EdgeKind.CONSUMER)


# ------------------------------
# water
# ------------------------------

@dataclass(frozen=True)
class WaterProperties:
    rho: float = 975.0          # kg/m³
    cp: float = 4190.0          # J/(kg K)
    viscosity: float = 3.0e-4   # Pa s


# ------------------------------
# EPN types
# ------------------------------

@dataclass(frozen=True)
class EpnBus:
    id: int
    v_min: float
    v_max: float
    is_reference: bool = False


@dataclass(frozen=True)
class EpnFeeder:
    from_bus: int
    to_bus: int
    g: float                    # admittance-matrix entry G_ij [p.u.]
    b: float                    # admittance-matrix entry B_ij [p.u.]
    angle_max: Optional[float] = None


# ------------------------------
# DHN types
# ------------------------------

@dataclass(frozen=True)
class DhnNode:
    id: int
    side: NodeSide
    t_min: float                # K
    t_max: float                # K


@dataclass(frozen=True)
class DhnEdge:
    id: str
    from_node: int
    to_node: int
    kind: EdgeKind
    m_min: float = 0.0
    m_max: float = 100.0
    dp_min: Optional[float] = None
    dp_max: Optional[float] = None
    # pipeline
    length: Optional[float] = None
    diameter: Optional[float] = None
    roughness: Optional[float] = None          # m
    r_thermal: Optional[float] = None          # (m K)/W
    reference_flow: Optional[float] = None
    # quadratic laws (pipeline, producer, consumer)
    mu: Optional[float] = None                 # bar s²/kg²
    # valve
    kvs: Optional[float] = None                # m³/s at 1 bar
    dp0: float = 1.0
    rho0: float = 1000.0
    # pump
    head_setpoint: Optional[float] = None
    head_min: float = 0.0
    head_max: Optional[float] = None
    # dpr
    dpr_min: float = 0.0
    dpr_max: Optional[float] = None

    @property
    def area(self) -> Optional[float]:
        if self.diameter is None:
            return None
        return math.pi * self.diameter ** 2 / 4.0

    @property
    def reversible(self) -> bool:
        return self.m_min < 0.0


@dataclass(frozen=True)
class ControlPath:
    id: str
    edges: Tuple[Tuple[str, int], ...]
    regulated_by: str
    dp_def: Tuple[float, ...]                  # schedule, cycled over k

    def setpoint(self, k: int) -> float:
        return self.dp_def[k % len(self.dp_def)]


# ------------------------------
# participants
# ------------------------------

@dataclass(frozen=True)
class ConsumerCurve:
    """Affine return-temperature characteristic of a heat consumer."""
    t_return: float = 323.15
    slope_supply: float = 0.0
    slope_ambient: float = 0.0
    slope_power: float = 0.0                   # K/MW of demand
    t_supply_ref: float = 363.15
    t_ambient_ref: float = 283.15

    def evaluate(self, t_supply, t_ambient, demand_mw):
        return (self.t_return
                + self.slope_supply * (t_supply - self.t_supply_ref)
                + self.slope_ambient * (t_ambient - self.t_ambient_ref)
                + self.slope_power * demand_mw)


@dataclass(frozen=True)
class Participant:
    id: str
    network: NetworkSide
    role: Role
    flexible: bool = True
    bus: Optional[int] = None
    edge: Optional[str] = None
    zeta: Optional[float] = None
    electric_role: Optional[Role] = None
    q_min: Optional[float] = None             # MVAr
    q_max: Optional[float] = None
    ramp: float = 2.0
    t_out_min: Optional[float] = None
    curve: Optional[ConsumerCurve] = None

    @property
    def on_epn(self) -> bool:
        return self.network in (NetworkSide.EPN, NetworkSide.CONVERTER)

    @property
    def on_dhn(self) -> bool:
        return self.network in (NetworkSide.DHN, NetworkSide.CONVERTER)

    @property
    def epn_role(self) -> Role:
        return self.electric_role if self.network == NetworkSide.CONVERTER else self.role

    @property
    def dhn_role(self) -> Role:
        return Role.PRODUCER if self.network == NetworkSide.CONVERTER else self.role


# ------------------------------
# coupled network
# ------------------------------

@dataclass(frozen=True)
class CoupledNetwork:
    base_mva: float
    buses: Tuple[EpnBus, ...]
    feeders: Tuple[EpnFeeder, ...]
    nodes: Tuple[DhnNode, ...]
    edges: Tuple[DhnEdge, ...]
    control_paths: Tuple[ControlPath, ...]
    participants: Tuple[Participant, ...]
    water: WaterProperties = field(default_factory=WaterProperties)
    pump_mode: str = "fixed"
    A: sparse.csr_matrix = field(default=None, compare=False, repr=False)
    B: sparse.csr_matrix = field(default=None, compare=False, repr=False)
    R: sparse.csr_matrix = field(default=None, compare=False, repr=False)

    # ---- index maps ----
    @cached_property
    def bus_index(self) -> Dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def node_index(self) -> Dict[int, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def edge_index(self) -> Dict[str, int]:
        return {e.id: i for i, e in enumerate(self.edges)}

    @cached_property
    def participant_index(self) -> Dict[str, int]:
        return {p.id: i for i, p in enumerate(self.participants)}

    @property
    def has_epn(self) -> bool:
        return len(self.buses) > 0

    @property
    def has_dhn(self) -> bool:
        return len(self.edges) > 0

    @cached_property
    def reference_bus(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.is_reference)

    @cached_property
    def admittance(self) -> Tuple[np.ndarray, np.ndarray]:
        """Dense (G, B) bus admittance matrices assembled from feeders."""
        n = len(self.buses)
        G = np.zeros((n, n))
        Bm = np.zeros((n, n))
        for f in self.feeders:
            i, j = self.bus_index[f.from_bus], self.bus_index[f.to_bus]
            G[i, j] += f.g
            G[j, i] += f.g
            Bm[i, j] += f.b
            Bm[j, i] += f.b
        G[np.diag_indices(n)] = -G.sum(axis=1)
        Bm[np.diag_indices(n)] = -Bm.sum(axis=1)
        G.setflags(write=False)
        Bm.setflags(write=False)
        return G, Bm

    def edges_of_kind(self, *kinds: EdgeKind) -> List[int]:
        return [i for i, e in enumerate(self.edges) if e.kind in kinds]

    @cached_property
    def edge_endpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        src = np.array([self.node_index[e.from_node] for e in self.edges], dtype=int)
        dst = np.array([self.node_index[e.to_node] for e in self.edges], dtype=int)
        return src, dst

    @cached_property
    def continuity_reference_nodes(self) -> List[int]:
        """One node per connected component whose continuity row is redundant."""
        graph = dhn_graph(self)
        refs = []
        for comp in nx.connected_components(graph.to_undirected(as_view=True)):
            refs.append(min(self.node_index[n] for n in comp))
        return sorted(refs)

    def participants_on(self, side: NetworkSide) -> List[Participant]:
        return [p for p in self.participants if p.network == side]

    def epn_participants(self) -> List[Participant]:
        return [p for p in self.participants if p.on_epn]

    def dhn_participants(self) -> List[Participant]:
        return [p for p in self.participants if p.on_dhn]

    def participant_edge(self, participant: Participant) -> DhnEdge:
        return self.edges[self.edge_index[participant.edge]]

    def pipeline_mass(self, e: int) -> float:
        edge = self.edges[e]
        return self.water.rho * edge.area * edge.length

    def pipeline_time_constant(self, e: int) -> float:
        """rho c_p A R' in seconds; infinite for perfectly insulated pipes."""
        edge = self.edges[e]
        if edge.r_thermal is None or not math.isfinite(edge.r_thermal):
            return math.inf
        return self.water.rho * self.water.cp * edge.area * edge.r_thermal


def dhn_graph(network: CoupledNetwork) -> nx.MultiDiGraph:
    graph = nx.MultiDiGraph()
    graph.add_nodes_from(n.id for n in network.nodes)
    for e in network.edges:
        graph.add_edge(e.from_node, e.to_node, key=e.id, kind=e.kind.value)
    return graph


# ------------------------------
# friction
# ------------------------------

def _colebrook_inverse_sqrt(reynolds, rel_roughness, tol=1e-10, max_iter=200):
    """Fixed-point iteration on x = 1/sqrt(f)."""
    x = 7.0
    for _ in range(max_iter):
        x_new = -2.0 * math.log10(rel_roughness / 3.7 + 2.51 * x / reynolds)
        if abs(x_new - x) <= tol * abs(x_new):
            return x_new
        x = x_new
    raise FrictionError(f"Colebrook iteration did not converge (Re={reynolds:.3g}, eps/D={rel_roughness:.3g})")


def darcy_friction_factor(reynolds, rel_roughness, tol=1e-10):
    if reynolds < 2300.0:
        return 64.0 / reynolds
    x = _colebrook_inverse_sqrt(reynolds, rel_roughness, tol=tol)
    return 1.0 / (x * x)


def precompute_friction(edge: DhnEdge, reference_mass_flow: float, water: WaterProperties = WaterProperties()) -> float:
    """Quadratic-law coefficient mu [bar s²/kg²] so that dp = mu * mdot² reproduces the
    Darcy-Weisbach loss at the reference flow."""
    if edge.kind != EdgeKind.PIPELINE:
        raise ConfigurationError(f"edge {edge.id}: friction precomputation needs a pipeline")
    if not (edge.diameter and edge.length and edge.roughness is not None and reference_mass_flow > 0):
        raise ConfigurationError(f"edge {edge.id}: diameter, length, roughness and reference flow must be positive")
    area = edge.area
    reynolds = reference_mass_flow * edge.diameter / (area * water.viscosity)
    if reynolds < 2300.0:
        rprint(f"[yellow]⚠️ Pipeline {edge.id}: laminar reference flow (Re={reynolds:.0f}), using 64/Re[/yellow]")
    f = darcy_friction_factor(reynolds, edge.roughness / edge.diameter)
    return f * edge.length / (2.0 * water.rho * area ** 2 * edge.diameter) * 1e-5


# ------------------------------
# matrices
# ------------------------------

def incidence_matrix(nodes: Sequence[DhnNode], edges: Sequence[DhnEdge]) -> sparse.csr_matrix:
    """Node x edge matrix, +1 at the head (to_node), -1 at the tail (from_node)."""
    index = {n.id: i for i, n in enumerate(nodes)}
    rows, cols, vals = [], [], []
    for j, e in enumerate(edges):
        rows += [index[e.to_node], index[e.from_node]]
        cols += [j, j]
        vals += [1.0, -1.0]
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(nodes), len(edges)))


def loop_matrix(nodes: Sequence[DhnNode], edges: Sequence[DhnEdge]) -> sparse.csr_matrix:
    """Fundamental loops of the cotree edges of a BFS spanning tree.

    The tree is rooted at the lowest-id supply node; each loop is oriented along its
    cotree edge.
    """
    if not edges:
        return sparse.csr_matrix((0, 0))
    graph = nx.MultiGraph()
    graph.add_nodes_from(n.id for n in nodes)
    edge_by_id = {e.id: e for e in edges}
    for e in edges:
        graph.add_edge(e.from_node, e.to_node, key=e.id)

    supply = sorted(n.id for n in nodes if n.side == NodeSide.SUPPLY)
    roots = supply + sorted(n.id for n in nodes if n.side != NodeSide.SUPPLY)
    tree = nx.Graph()
    tree.add_nodes_from(graph.nodes)
    seen = set()
    for root in roots:
        if root in seen:
            continue
        seen.add(root)
        for u, v, key in nx.edge_bfs(graph, root):
            if v not in seen:
                seen.add(v)
                tree.add_edge(u, v, key=key)
            elif u not in seen:
                seen.add(u)
                tree.add_edge(u, v, key=key)

    tree_keys = {d["key"] for _, _, d in tree.edges(data=True)}
    column = {e.id: j for j, e in enumerate(edges)}
    rows, cols, vals = [], [], []
    loop = 0
    for e in edges:
        if e.id in tree_keys:
            continue
        rows.append(loop)
        cols.append(column[e.id])
        vals.append(1.0)
        path = nx.shortest_path(tree, e.to_node, e.from_node)
        for a, b in zip(path[:-1], path[1:]):
            key = tree.edges[a, b]["key"]
            tree_edge = edge_by_id[key]
            rows.append(loop)
            cols.append(column[key])
            vals.append(1.0 if tree_edge.from_node == a else -1.0)
        loop += 1
    return sparse.csr_matrix((vals, (rows, cols)), shape=(loop, len(edges)))


def control_path_matrix(edges: Sequence[DhnEdge], paths: Sequence[ControlPath]) -> sparse.csr_matrix:
    column = {e.id: j for j, e in enumerate(edges)}
    rows, cols, vals = [], [], []
    for p, path in enumerate(paths):
        for edge_id, orientation in path.edges:
            rows.append(p)
            cols.append(column[edge_id])
            vals.append(float(orientation))
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(paths), len(edges)))


# ------------------------------
# validation
# ------------------------------

def _check_control_path(path: ControlPath, edge_by_id: Dict[str, DhnEdge]):
    previous_end = None
    for edge_id, orientation in path.edges:
        if edge_id not in edge_by_id:
            raise ConfigurationError(f"control path {path.id}: unknown edge '{edge_id}'")
        if orientation not in (1, -1):
            raise ConfigurationError(f"control path {path.id}: orientation of {edge_id} must be +1 or -1")
        e = edge_by_id[edge_id]
        start, end = (e.from_node, e.to_node) if orientation == 1 else (e.to_node, e.from_node)
        if previous_end is not None and start != previous_end:
            raise ConfigurationError(f"control path {path.id}: not a connected edge sequence at {edge_id}")
        previous_end = end
    if path.regulated_by not in edge_by_id:
        raise ConfigurationError(f"control path {path.id}: regulator '{path.regulated_by}' is not an edge")
    if edge_by_id[path.regulated_by].kind not in (EdgeKind.PUMP, EdgeKind.DPR):
        raise ConfigurationError(f"control path {path.id}: regulator must be a pump or a DPR")


def dof_audit(network: CoupledNetwork, pump_mode: Optional[str] = None) -> Dict[str, int]:
    """Count hydraulic equalities, actuator setpoints and unknowns of one timestep."""
    mode = pump_mode or network.pump_mode
    n_nodes, n_edges = len(network.nodes), len(network.edges)
    if n_edges == 0:
        return {"unknowns": 0, "equalities": 0, "setpoints": 0}
    n_components = len(network.continuity_reference_nodes)
    pumps = network.edges_of_kind(EdgeKind.PUMP)
    dprs = network.edges_of_kind(EdgeKind.DPR)
    valves = network.edges_of_kind(EdgeKind.VALVE)
    regulators = [p.regulated_by for p in network.control_paths]
    dpr_ids = {network.edges[i].id for i in dprs}
    pump_ids = {network.edges[i].id for i in pumps}

    for dpr in dpr_ids:
        if regulators.count(dpr) != 1:
            raise ConfigurationError(f"DPR {dpr} must regulate exactly one control path")
    for reg in regulators:
        if reg in pump_ids and mode != "decision":
            raise ConfigurationError(f"pump {reg} regulates a control path but pump heads are fixed setpoints")
        if regulators.count(reg) > 1:
            raise ConfigurationError(f"regulator {reg} drives more than one control path")

    pump_unknowns = len(pumps) if mode == "decision" else 0
    unknowns = 2 * n_edges + len(valves) + len(dprs) + pump_unknowns
    equalities = (n_nodes - n_components) + (n_edges - n_nodes + n_components) + len(network.control_paths) + n_edges
    free_pumps = len([p for p in pump_ids if p not in regulators]) if mode == "decision" else 0
    setpoints = len(valves) + free_pumps
    if equalities + setpoints != unknowns:
        raise ConfigurationError(
            f"hydraulic degrees of freedom do not balance: {equalities} equalities + {setpoints} setpoints "
            f"!= {unknowns} unknowns")
    return {"unknowns": unknowns, "equalities": equalities, "setpoints": setpoints}


def build_network(base_mva, buses, feeders, nodes, edges, control_paths, participants,
                  water=WaterProperties(), pump_mode="fixed") -> CoupledNetwork:
    """Validate cross references, compute friction, assemble matrices."""
    buses, feeders = tuple(buses), tuple(feeders)
    nodes, control_paths, participants = tuple(nodes), tuple(control_paths), tuple(participants)

    if buses:
        if sum(1 for b in buses if b.is_reference) != 1:
            raise ConfigurationError("EPN needs exactly one reference bus")
        bus_ids = {b.id for b in buses}
        if len(bus_ids) != len(buses):
            raise ConfigurationError("duplicate bus ids")
        for b in buses:
            if not 0.0 < b.v_min < b.v_max:
                raise ConfigurationError(f"bus {b.id}: voltage bounds must satisfy 0 < v_min < v_max")
        for f in feeders:
            for end in (f.from_bus, f.to_bus):
                if end not in bus_ids:
                    raise ConfigurationError(f"feeder {f.from_bus}-{f.to_bus} references unknown bus {end}")
            if f.from_bus == f.to_bus:
                raise ConfigurationError(f"feeder {f.from_bus}-{f.to_bus} connects a bus to itself")

    node_ids = {n.id for n in nodes}
    resolved_edges = []
    for e in edges:
        for end in (e.from_node, e.to_node):
            if end not in node_ids:
                raise ConfigurationError(f"edge {e.id} references unknown node {end}")
        if e.dp_min is not None and e.dp_max is not None and e.dp_min > e.dp_max:
            raise ConfigurationError(f"edge {e.id}: dp_min > dp_max")
        if e.m_min > e.m_max:
            raise ConfigurationError(f"edge {e.id}: m_min > m_max")
        if e.kind == EdgeKind.PIPELINE:
            if not (e.length and e.length > 0 and e.diameter and e.diameter > 0):
                raise ConfigurationError(f"pipeline {e.id}: length and diameter must be positive")
            if e.mu is None:
                ref = e.reference_flow or max(e.m_max * 0.5, 1e-3)
                e = _replace(e, mu=precompute_friction(e, ref, water))
        elif e.kind in (EdgeKind.PRODUCER, EdgeKind.CONSUMER) and e.mu is None:
            raise ConfigurationError(f"edge {e.id}: {e.kind.value} needs a pressure-loss coefficient")
        elif e.kind == EdgeKind.VALVE and not e.kvs:
            raise ConfigurationError(f"valve {e.id}: kvs must be positive")
        elif e.kind == EdgeKind.PUMP and e.head_setpoint is None and pump_mode != "decision":
            raise ConfigurationError(f"pump {e.id}: head setpoint required for fixed pump mode")
        resolved_edges.append(e)
    edges = tuple(resolved_edges)
    if len({e.id for e in edges}) != len(edges):
        raise ConfigurationError("duplicate edge ids")

    if edges:
        graph = nx.MultiGraph()
        graph.add_nodes_from(node_ids)
        graph.add_edges_from((e.from_node, e.to_node) for e in edges)
        if not nx.is_connected(graph):
            raise ConfigurationError("DHN graph is disconnected")

    edge_by_id = {e.id: e for e in edges}
    for path in control_paths:
        _check_control_path(path, edge_by_id)

    side_of = {n.id: n.side for n in nodes}
    bus_ids = {b.id for b in buses}
    for p in participants:
        if p.on_epn and buses and p.bus not in bus_ids:
            raise ConfigurationError(f"participant {p.id} references unknown bus {p.bus}")
        if p.on_dhn and edges:
            if p.edge not in edge_by_id:
                raise ConfigurationError(f"participant {p.id} references unknown edge {p.edge}")
            e = edge_by_id[p.edge]
            expected = EdgeKind.PRODUCER if p.dhn_role == Role.PRODUCER else EdgeKind.CONSUMER
            if e.kind != expected:
                raise ConfigurationError(f"participant {p.id}: edge {e.id} is a {e.kind.value}, expected {expected.value}")
            ends = {side_of[e.from_node], side_of[e.to_node]}
            if ends != {NodeSide.SUPPLY, NodeSide.RETURN}:
                raise ConfigurationError(f"participant {p.id} must join one supply and one return node")
        if p.network == NetworkSide.CONVERTER:
            if not p.zeta or p.zeta <= 0:
                raise ConfigurationError(f"converter {p.id}: coupling factor must be positive")
            if p.electric_role not in (Role.PRODUCER, Role.CONSUMER):
                raise ConfigurationError(f"converter {p.id}: electric_role must be producer or consumer")

    A = incidence_matrix(nodes, edges)
    B = loop_matrix(nodes, edges)
    R = control_path_matrix(edges, control_paths)
    network = CoupledNetwork(base_mva=base_mva, buses=buses, feeders=feeders, nodes=nodes, edges=edges,
                             control_paths=control_paths, participants=participants, water=water,
                             pump_mode=pump_mode, A=A, B=B, R=R)
    if edges:
        dof_audit(network)
    return network


def _replace(obj, **changes):
    values = {f.name: getattr(obj, f.name) for f in fields(obj)}
    values.update(changes)
    return type(obj)(**values)


# ------------------------------
# document <-> network
# ------------------------------

def _temperature(spec: dict, key: str, default=None):
    if f"{key}_k" in spec and spec[f"{key}_k"] is not None:
        return float(spec[f"{key}_k"])
    if f"{key}_c" in spec and spec[f"{key}_c"] is not None:
        return float(spec[f"{key}_c"]) + KELVIN
    return default


def load_network(document: dict) -> CoupledNetwork:
    """Validated `CoupledNetwork` from a scenario document (already schema-checked or raw)."""
    from core.scenario_schema import validate_document

    doc = validate_document(document)
    epn = doc.get("epn") or {}
    dhn = doc.get("dhn") or {}
    base_mva = float(epn.get("base_mva", 1.0))

    buses = [EpnBus(id=int(b["id"]), v_min=float(b.get("v_min_pu", 0.95)), v_max=float(b.get("v_max_pu", 1.05)),
                    is_reference=bool(b.get("reference", False))) for b in epn.get("buses", [])]
    feeders = []
    for f in epn.get("feeders", []):
        if f.get("g_pu") is not None or f.get("b_pu") is not None:
            g, b = float(f.get("g_pu", 0.0)), float(f.get("b_pu", 0.0))
        else:
            y = 1.0 / complex(float(f["r_pu"]), float(f["x_pu"]))
            g, b = -y.real, -y.imag
        feeders.append(EpnFeeder(from_bus=int(f["from_bus"]), to_bus=int(f["to_bus"]), g=g, b=b,
                                 angle_max=f.get("angle_max_rad")))

    water_doc = dhn.get("water") or {}
    water = WaterProperties(rho=float(water_doc.get("rho_kg_m3", 975.0)),
                            cp=float(water_doc.get("cp_j_kgk", 4190.0)),
                            viscosity=float(water_doc.get("viscosity_pa_s", 3.0e-4)))
    nodes = []
    for n in dhn.get("nodes", []):
        side = NodeSide(n.get("side", "supply"))
        default_min, default_max = (80.0 + KELVIN, 130.0 + KELVIN) if side == NodeSide.SUPPLY else (30.0 + KELVIN, 130.0 + KELVIN)
        t_min, t_max = _temperature(n, "t_min", default_min), _temperature(n, "t_max", default_max)
        if not t_min < t_max:
            raise ConfigurationError(f"node {n['id']}: t_min must be below t_max")
        nodes.append(DhnNode(id=int(n["id"]), side=side, t_min=t_min, t_max=t_max))

    edges = []
    for e in dhn.get("edges", []):
        roughness = e.get("roughness_m")
        if roughness is None and e.get("roughness_mm") is not None:
            roughness = float(e["roughness_mm"]) * 1e-3
        edges.append(DhnEdge(
            id=str(e["id"]), from_node=int(e["from_node"]), to_node=int(e["to_node"]), kind=EdgeKind(e["kind"]),
            m_min=float(e.get("m_min_kg_s", 0.0)), m_max=float(e.get("m_max_kg_s", 100.0)),
            dp_min=e.get("dp_min_bar"), dp_max=e.get("dp_max_bar"),
            length=e.get("length_m"), diameter=e.get("diameter_m"), roughness=roughness,
            r_thermal=e.get("r_thermal_mk_w"), reference_flow=e.get("reference_flow_kg_s"),
            mu=e.get("mu_bar_s2_kg2"), kvs=e.get("kvs_m3_s"), dp0=float(e.get("dp0_bar", 1.0)),
            rho0=float(e.get("rho0_kg_m3", 1000.0)), head_setpoint=e.get("head_bar"),
            head_min=float(e.get("head_min_bar", 0.0)), head_max=e.get("head_max_bar"),
            dpr_min=float(e.get("dpr_min_bar", 0.0)), dpr_max=e.get("dpr_max_bar"),
        ))

    paths = []
    for p in dhn.get("control_paths", []):
        dp_def = p["dp_def_bar"]
        schedule = tuple(float(v) for v in dp_def) if isinstance(dp_def, list) else (float(dp_def),)
        paths.append(ControlPath(id=str(p["id"]), edges=tuple((str(eid), int(o)) for eid, o in p["edges"]),
                                 regulated_by=str(p["regulated_by"]), dp_def=schedule))

    participants = [participant_from_doc(p) for p in doc.get("participants", []) + doc.get("converters", [])]
    if doc.get("pure_epn"):
        nodes, edges, paths = [], [], []
        participants = [p for p in participants if p.network != NetworkSide.DHN]
    return build_network(base_mva, buses, feeders, nodes, edges, paths, participants,
                         water=water, pump_mode=dhn.get("pump_mode", "fixed"))


def participant_from_doc(p: dict) -> Participant:
    curve = None
    if p.get("curve") is not None:
        c = p["curve"]
        curve = ConsumerCurve(t_return=_temperature(c, "t_return", 323.15),
                              slope_supply=float(c.get("a", 0.0)), slope_ambient=float(c.get("b", 0.0)),
                              slope_power=float(c.get("c_k_per_mw", 0.0)),
                              t_supply_ref=_temperature(c, "t_supply_ref", 363.15),
                              t_ambient_ref=_temperature(c, "t_ambient_ref", 283.15))
    elif p.get("network") == "dhn" and p.get("role") == "consumer":
        curve = ConsumerCurve()
    q_min, q_max = p.get("q_min_mvar"), p.get("q_max_mvar")
    return Participant(
        id=str(p["id"]), network=NetworkSide(p["network"]), role=Role(p["role"]),
        flexible=bool(p.get("flexible", True)), bus=p.get("bus"), edge=p.get("edge"),
        zeta=p.get("zeta"), electric_role=Role(p["electric_role"]) if p.get("electric_role") else None,
        q_min=None if q_min is None else float(q_min),
        q_max=None if q_max is None else float(q_max),
        ramp=float(p.get("ramp_k", 2.0)), t_out_min=_temperature(p, "t_out_min"), curve=curve,
    )


def serialize_network(network: CoupledNetwork) -> dict:
    """Scenario-document tree that `load_network` reads back to the same numbers."""
    doc = {
        "schema_version": 1,
        "epn": {
            "base_mva": network.base_mva,
            "buses": [{"id": b.id, "v_min_pu": b.v_min, "v_max_pu": b.v_max, "reference": b.is_reference}
                      for b in network.buses],
            "feeders": [{"from_bus": f.from_bus, "to_bus": f.to_bus, "g_pu": f.g, "b_pu": f.b,
                         "angle_max_rad": f.angle_max} for f in network.feeders],
        },
        "dhn": {
            "pump_mode": network.pump_mode,
            "water": {"rho_kg_m3": network.water.rho, "cp_j_kgk": network.water.cp,
                      "viscosity_pa_s": network.water.viscosity},
            "nodes": [{"id": n.id, "side": n.side.value, "t_min_k": n.t_min, "t_max_k": n.t_max}
                      for n in network.nodes],
            "edges": [_edge_doc(e) for e in network.edges],
            "control_paths": [{"id": p.id, "edges": [[eid, o] for eid, o in p.edges], "regulated_by": p.regulated_by,
                               "dp_def_bar": list(p.dp_def)} for p in network.control_paths],
        },
        "participants": [_participant_doc(p) for p in network.participants],
    }
    return doc


def _edge_doc(e: DhnEdge) -> dict:
    doc = {"id": e.id, "from_node": e.from_node, "to_node": e.to_node, "kind": e.kind.value,
           "m_min_kg_s": e.m_min, "m_max_kg_s": e.m_max, "dp_min_bar": e.dp_min, "dp_max_bar": e.dp_max,
           "length_m": e.length, "diameter_m": e.diameter, "roughness_m": e.roughness,
           "r_thermal_mk_w": e.r_thermal, "reference_flow_kg_s": e.reference_flow, "mu_bar_s2_kg2": e.mu,
           "kvs_m3_s": e.kvs, "dp0_bar": e.dp0, "rho0_kg_m3": e.rho0, "head_bar": e.head_setpoint,
           "head_min_bar": e.head_min, "head_max_bar": e.head_max, "dpr_min_bar": e.dpr_min,
           "dpr_max_bar": e.dpr_max}
    return {k: v for k, v in doc.items() if v is not None}


def _participant_doc(p: Participant) -> dict:
    doc = {"id": p.id, "network": p.network.value, "role": p.role.value, "flexible": p.flexible,
           "bus": p.bus, "edge": p.edge, "zeta": p.zeta,
           "electric_role": p.electric_role.value if p.electric_role else None,
           "q_min_mvar": p.q_min, "q_max_mvar": p.q_max,
           "ramp_k": p.ramp, "t_out_min_k": p.t_out_min}
    if p.curve is not None:
        c = p.curve
        doc["curve"] = {"t_return_k": c.t_return, "a": c.slope_supply, "b": c.slope_ambient,
                        "c_k_per_mw": c.slope_power, "t_supply_ref_k": c.t_supply_ref,
                        "t_ambient_ref_k": c.t_ambient_ref}
    return {k: v for k, v in doc.items() if v is not None}
