"""
Pydantic models of the scenario document (schema_version 1).

Every physical quantity carries its unit as a key suffix (`_mw`, `_bar`, `_kg_s`, `_c`, ...).
"""
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.utils.errors import ScenarioError

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ------------------------------
# series
# ------------------------------

class SeriesSpec(_Strict):
    constant: Optional[float] = None
    values: Optional[List[float]] = None
    breakpoints: Optional[List[Tuple[float, float]]] = None
    csv: Optional[str] = None
    column: Optional[str] = None
    scale: float = 1.0
    approximate: bool = False

    @model_validator(mode="after")
    def _one_source(self):
        sources = [s for s in (self.constant, self.values, self.breakpoints, self.csv) if s is not None]
        if len(sources) != 1:
            raise ValueError("series needs exactly one of constant, values, breakpoints, csv")
        return self


SeriesLike = Union[float, List[float], SeriesSpec]


# ------------------------------
# EPN
# ------------------------------

class BusSpec(_Strict):
    id: int
    v_min_pu: float = 0.95
    v_max_pu: float = 1.05
    reference: bool = False


class FeederSpec(_Strict):
    from_bus: int
    to_bus: int
    g_pu: Optional[float] = None
    b_pu: Optional[float] = None
    r_pu: Optional[float] = None
    x_pu: Optional[float] = None
    angle_max_rad: Optional[float] = None

    @model_validator(mode="after")
    def _admittance_given(self):
        has_y = self.g_pu is not None or self.b_pu is not None
        has_z = self.r_pu is not None and self.x_pu is not None
        if has_y == has_z:
            raise ValueError("give either g_pu/b_pu or r_pu/x_pu")
        return self


class EpnSpec(_Strict):
    base_mva: float = Field(1.0, gt=0)
    buses: List[BusSpec] = []
    feeders: List[FeederSpec] = []


# ------------------------------
# DHN
# ------------------------------

class WaterSpec(_Strict):
    rho_kg_m3: float = Field(975.0, gt=0)
    cp_j_kgk: float = Field(4190.0, gt=0)
    viscosity_pa_s: float = Field(3.0e-4, gt=0)


class NodeSpec(_Strict):
    id: int
    side: Literal["supply", "return"] = "supply"
    t_min_c: Optional[float] = None
    t_max_c: Optional[float] = None
    t_min_k: Optional[float] = None
    t_max_k: Optional[float] = None


EdgeKindName = Literal["pipeline", "controlled-pump", "producer", "control-valve", "dpr", "consumer"]


class EdgeSpec(_Strict):
    id: str
    from_node: int
    to_node: int
    kind: EdgeKindName
    m_min_kg_s: float = 0.0
    m_max_kg_s: float = 100.0
    dp_min_bar: Optional[float] = None
    dp_max_bar: Optional[float] = None
    length_m: Optional[float] = None
    diameter_m: Optional[float] = None
    roughness_mm: Optional[float] = None
    roughness_m: Optional[float] = None
    r_thermal_mk_w: Optional[float] = None
    reference_flow_kg_s: Optional[float] = None
    mu_bar_s2_kg2: Optional[float] = None
    kvs_m3_s: Optional[float] = None
    dp0_bar: float = 1.0
    rho0_kg_m3: float = 1000.0
    head_bar: Optional[float] = None
    head_min_bar: float = 0.0
    head_max_bar: Optional[float] = None
    dpr_min_bar: float = 0.0
    dpr_max_bar: Optional[float] = None


class ControlPathSpec(_Strict):
    id: str
    edges: List[Tuple[str, int]]
    regulated_by: str
    dp_def_bar: Union[float, List[float]]


class DhnSpec(_Strict):
    pump_mode: Literal["fixed", "decision"] = "fixed"
    water: WaterSpec = WaterSpec()
    nodes: List[NodeSpec] = []
    edges: List[EdgeSpec] = []
    control_paths: List[ControlPathSpec] = []


# ------------------------------
# participants
# ------------------------------

class CurveSpec(_Strict):
    t_return_c: Optional[float] = None
    t_return_k: Optional[float] = None
    a: float = 0.0
    b: float = 0.0
    c_k_per_mw: float = 0.0
    t_supply_ref_c: Optional[float] = None
    t_supply_ref_k: Optional[float] = None
    t_ambient_ref_c: Optional[float] = None
    t_ambient_ref_k: Optional[float] = None


class ParticipantSpec(_Strict):
    id: str
    network: Literal["epn", "dhn", "converter"]
    role: Literal["producer", "consumer", "storage"]
    flexible: bool = True
    bus: Optional[int] = None
    edge: Optional[str] = None
    zeta: Optional[float] = None
    electric_role: Optional[Literal["producer", "consumer"]] = None
    q_min_mvar: Optional[float] = None
    q_max_mvar: Optional[float] = None
    ramp_k: float = Field(2.0, gt=0)
    t_out_min_c: Optional[float] = None
    t_out_min_k: Optional[float] = None
    curve: Optional[CurveSpec] = None

    @model_validator(mode="after")
    def _locations(self):
        if self.network in ("epn", "converter") and self.bus is None:
            raise ValueError(f"participant {self.id} needs a bus")
        if self.network in ("dhn", "converter") and self.edge is None:
            raise ValueError(f"participant {self.id} needs an edge")
        if self.role == "storage" and self.network != "epn":
            raise ValueError("storage participants live on the EPN")
        return self


# ------------------------------
# bids, horizon, solver
# ------------------------------

class BidSpec(_Strict):
    agent: Literal["envelope", "flexible", "curtailable", "inflexible", "battery"]
    price: Union[float, SeriesSpec, List[float]] = 0.0
    price_heat: Optional[Union[float, SeriesSpec, List[float]]] = None
    p_min_mw: Optional[SeriesLike] = None
    p_max_mw: Optional[SeriesLike] = None
    base_mw: Optional[SeriesLike] = None
    flexibility: float = Field(0.3, ge=0, le=1)
    forecast: Optional[Union[str, SeriesLike]] = None
    capacity_mwh: Optional[float] = None
    initial_mwh: Optional[float] = None
    rate_mw: Optional[float] = None
    efficiency: float = Field(0.97, gt=0, le=1)
    energy_budget_mwh: Optional[float] = Field(None, ge=0)
    budget_window_steps: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _agent_fields(self):
        needs = {
            "envelope": ("p_min_mw", "p_max_mw"),
            "flexible": ("base_mw",),
            "curtailable": ("forecast",),
            "inflexible": ("forecast",),
            "battery": ("capacity_mwh", "initial_mwh", "rate_mw"),
        }[self.agent]
        missing = [n for n in needs if getattr(self, n) is None]
        if missing:
            raise ValueError(f"{self.agent} bid needs {', '.join(missing)}")
        if (self.energy_budget_mwh is None) != (self.budget_window_steps is None):
            raise ValueError("energy_budget_mwh and budget_window_steps go together")
        return self


class HorizonSpec(_Strict):
    steps: int = Field(16, ge=1)
    dt_s: float = Field(900.0, gt=0)
    span_steps: int = Field(96, ge=1)
    mode: Literal["joint", "epn-only", "dhn-only", "seq-epn", "seq-dhn"] = "joint"


class SolverSpec(_Strict):
    tol_eq: Optional[float] = None
    tol_ineq: Optional[float] = None
    tol_stat: Optional[float] = None
    tol_comp: Optional[float] = None
    max_iter: Optional[int] = None
    mu0: Optional[float] = None
    scaling: Optional[bool] = None
    zero_demand_weight: Optional[float] = None


class InitialSpec(_Strict):
    supply_temperature_c: float = 100.0
    return_temperature_c: float = 55.0
    flows_kg_s: Dict[str, float] = {}


class OracleSpec(_Strict):
    pipeline: str
    steps: int = 60
    flow_kg_s: float = 20.0
    flow_step_kg_s: float = 25.0
    flow_step_at: int = 21
    inlet_c: float = 90.0
    inlet_step_c: float = 100.0
    inlet_step_at: int = 20
    ambient_c: float = 10.0
    perfect_prediction: bool = False


class ScenarioDocument(_Strict):
    schema_version: int = SCHEMA_VERSION
    name: Optional[str] = None
    description: Optional[str] = None
    network_file: Optional[str] = None
    pure_epn: bool = False
    epn: Optional[EpnSpec] = None
    dhn: Optional[DhnSpec] = None
    converters: List[ParticipantSpec] = []
    participants: List[ParticipantSpec] = []
    forecasts: Dict[str, SeriesLike] = {}
    bids: Dict[str, BidSpec] = {}
    horizon: HorizonSpec = HorizonSpec()
    solver: SolverSpec = SolverSpec()
    initial: InitialSpec = InitialSpec()
    oracle: Optional[OracleSpec] = None

    @model_validator(mode="after")
    def _version(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        for c in self.converters:
            if c.network != "converter":
                raise ValueError(f"entry {c.id} under converters must have network: converter")
        return self


def _error_path(loc) -> str:
    # union branches show up as type names in the location; keep field names and indices only
    parts = [str(p) for p in loc if isinstance(p, int) or (isinstance(p, str) and not p[:1].isupper()
                                                            and p not in ("float", "list[float]", "str", "int"))]
    return ".".join(parts) or "<root>"


def validate_document(document: dict) -> dict:
    """Schema-check a scenario tree; returns it with defaults filled in and `None`s dropped."""
    if not isinstance(document, dict):
        raise ScenarioError("scenario document must be a mapping")
    try:
        model = ScenarioDocument.model_validate(document)
    except ValidationError as e:
        err = e.errors()[0]
        raise ScenarioError(f"{_error_path(err['loc'])}: {err['msg']}") from None
    return model.model_dump(exclude_none=True)
