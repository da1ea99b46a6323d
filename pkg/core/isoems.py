"""
Rolling-horizon ISOEMS.

Per market interval: collect bids, freeze ω on the predicted pipeline flows, assemble and
solve the horizon NLP, commit step 0, advance the plant with the exact node method, shift.
The controller only ever sees the ω model; realised temperatures come from the plant.
"""
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from rich import print as rprint

from core.bid_agents import collect_bids
from core.dhn_hydraulic import HydraulicState, steady_flow_estimate
from core.dhn_thermal import (OmegaWeights, ThermalHistory, advance_history, compute_omega, flow_floor,
                              required_depth, shift_predicted_flows, simulate_plant_temperatures)
from core.interior_point import SolverSettings
from core.market import (DispatchStep, LmpReport, ParticipantBid, PriceReport, ledger, lmp_from_multipliers,
                         price_report, settle, welfare_terms)
from core.network_model import KELVIN, CoupledNetwork, EdgeKind, NetworkSide, NodeSide, Role, dof_audit
from core.nlp_core import KktSolution, NlpProblem, solve
from core.problem_builder import (BuildOptions, assemble, default_guess, dispatch_values, hydraulic_values,
                                  pipeline_flows, shift_values, solution_values)
from core.utils.decorator import except_handler
from core.utils.errors import ConfigurationError, SeriesError

MODES = ("joint", "epn-only", "dhn-only", "seq-epn", "seq-dhn")
_NETWORKS = {"joint": (True, True), "epn-only": (True, False), "dhn-only": (False, True),
             "seq-epn": (True, True), "seq-dhn": (True, True)}


# ------------------------------
# configuration
# ------------------------------

@dataclass(frozen=True)
class HorizonConfig:
    steps: int = 16
    dt: float = 900.0               # s
    span: int = 96
    mode: str = "joint"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode '{self.mode}', expected one of {', '.join(MODES)}")
        if self.steps < 1 or self.span < 1 or self.dt <= 0:
            raise ConfigurationError("horizon steps, span and Δk must be positive")

    @property
    def dt_h(self) -> float:
        return self.dt / 3600.0

    @property
    def include_epn(self) -> bool:
        return _NETWORKS[self.mode][0]

    @property
    def include_dhn(self) -> bool:
        return _NETWORKS[self.mode][1]

    @classmethod
    def from_spec(cls, spec: dict, mode: Optional[str] = None) -> "HorizonConfig":
        return cls(steps=int(spec.get("steps", 16)), dt=float(spec.get("dt_s", 900.0)),
                   span=int(spec.get("span_steps", 96)), mode=mode or spec.get("mode", "joint"))

    def transit_check(self, network: CoupledNetwork):
        """Warn when the horizon is shorter than the slowest pipeline transit at minimum flow."""
        worst, name = 0, None
        for e in network.edges_of_kind(EdgeKind.PIPELINE):
            edge = network.edges[e]
            low = max(edge.m_min, flow_floor(edge))
            steps = math.ceil(network.pipeline_mass(e) / (low * self.dt))
            if steps > worst:
                worst, name = steps, edge.id
        if worst > self.steps:
            rprint(f"[yellow]⚠️ Horizon of {self.steps} steps is shorter than the {worst}-step transit of "
                   f"{name} at minimum flow[/yellow]")
        return worst


@dataclass(frozen=True)
class InitialConditions:
    supply_k: float = 100.0 + KELVIN
    return_k: float = 55.0 + KELVIN
    flows: Dict[str, float] = field(default_factory=dict)     # kg/s pinned per edge id

    @classmethod
    def from_spec(cls, spec: dict) -> "InitialConditions":
        return cls(supply_k=float(spec.get("supply_temperature_c", 100.0)) + KELVIN,
                   return_k=float(spec.get("return_temperature_c", 55.0)) + KELVIN,
                   flows={str(k): float(v) for k, v in (spec.get("flows_kg_s") or {}).items()})


# ------------------------------
# plant
# ------------------------------

@dataclass
class PlantState:
    """Realised state of both networks plus the controller memory carried between steps."""
    step: int
    agents: Dict[str, object]
    history: Optional[ThermalHistory] = None
    hydraulic: Optional[HydraulicState] = None
    node_temperatures: Optional[np.ndarray] = None
    producer_outlets: Dict[str, float] = field(default_factory=dict)
    predicted_flows: Optional[np.ndarray] = None                # (n_pipe, H)
    schedule: Optional[Dict[str, np.ndarray]] = None            # shifted trajectories of the last solve
    committed: List[DispatchStep] = field(default_factory=list)


def cold_start(network: CoupledNetwork, agents: Dict[str, object], config: HorizonConfig,
               initial: InitialConditions = InitialConditions()) -> PlantState:
    """Steady plant at the initial temperatures.

    The thermal history carries the configured initial flows; the first schedule and the
    predicted flows come from a pre-solve at the first-step bid midpoints."""
    plant = PlantState(step=0, agents=agents)
    if not (config.include_dhn and network.has_dhn):
        return plant
    bids = collect_bids(agents, 0, config.steps, config.dt_h)
    guess = default_guess(network, bids, config.steps, initial.supply_k, initial.return_k)
    planned = guess["dhn.m"][:, 0]
    past = planned
    if initial.flows:
        past = np.clip(steady_flow_estimate(network, initial.flows),
                       [e.m_min for e in network.edges], [e.m_max for e in network.edges])
    pipes = network.edges_of_kind(EdgeKind.PIPELINE)
    src = network.edge_endpoints[0]
    temps = [initial.supply_k if network.nodes[src[e]].side == NodeSide.SUPPLY else initial.return_k for e in pipes]
    depth = required_depth(network, config.steps, config.dt)
    plant.history = ThermalHistory.steady(network, temps, [max(past[e], flow_floor(network.edges[e])) for e in pipes],
                                          depth, config.dt, last_step=-1)
    ahead = [max(planned[e], flow_floor(network.edges[e])) for e in pipes]
    plant.predicted_flows = np.repeat(np.asarray(ahead)[:, None], config.steps, axis=1)
    plant.node_temperatures = guess["dhn.T"][:, 0].copy()
    plant.hydraulic = hydraulic_values(network, guess).column(0)
    plant.producer_outlets = {p.id: float(guess["dhn.T_out"][network.edge_index[p.edge], 0])
                              for p in network.dhn_participants() if p.dhn_role == Role.PRODUCER}
    plant.schedule = guess
    return plant


# ------------------------------
# one step
# ------------------------------

@dataclass
class SolveRecord:
    label: str                      # joint / epn / dhn
    problem: NlpProblem
    solution: Optional[KktSolution]
    restarted: bool = False         # cold restart after a failed warm start

    @property
    def converged(self) -> bool:
        return self.solution is not None and self.solution.converged

    @property
    def status(self) -> str:
        return self.solution.status if self.solution is not None else "error"


@dataclass
class StepResult:
    step: int
    status: str                     # converged / infeasible / fallback
    dispatch: DispatchStep
    prices: PriceReport
    welfare: Dict[str, float]       # ¤/h per network
    bids: Dict[str, ParticipantBid]
    solves: List[SolveRecord]
    wall_time: float
    omega: Optional[OmegaWeights] = None
    deviation: List[dict] = field(default_factory=list)
    temperatures: List[dict] = field(default_factory=list)
    settlement: Optional[pd.DataFrame] = None

    @property
    def welfare_rate(self) -> float:
        return self.welfare["epn"] + self.welfare["dhn"]


@except_handler("Horizon solve failed", default_return=False)
def _solve_once(problem: NlpProblem, settings: SolverSettings):
    return solve(problem, settings=settings)


def _restart_guess(network: CoupledNetwork, bids, plant: PlantState, config: HorizonConfig) -> Dict[str, np.ndarray]:
    """Fresh start point at the plant's current temperatures; EPN families start flat."""
    t = plant.node_temperatures
    if not network.has_dhn or t is None:
        return {}
    supply = np.array([n.side == NodeSide.SUPPLY for n in network.nodes])
    return default_guess(network, bids, config.steps, float(np.mean(t[supply])), float(np.mean(t[~supply])),
                         node_temperatures=t, k0=plant.step)


def _solve(label: str, network, bids, forecasts, plant: PlantState, config: HorizonConfig, omega,
           settings: SolverSettings, **options) -> SolveRecord:
    k = plant.step
    build = BuildOptions(k0=k, dt_s=config.dt, previous_outlet=plant.producer_outlets, guess=plant.schedule,
                         **options)
    if build.include_dhn and network.has_dhn:
        build.t_ambient = _cut(forecasts, "ambient_k", k, config.steps)
    problem = assemble(network, bids, forecasts, plant.history, omega, config, build)
    record = SolveRecord(label, problem, _solve_once(problem, settings) or None)
    if not record.converged and k > 0:
        rprint(f"[yellow]⚠️ Step {k}: {label} solve ended with status {record.status}, restarting cold[/yellow]")
        build.guess = _restart_guess(network, bids, plant, config)
        problem = assemble(network, bids, forecasts, plant.history, omega, config, build)
        record = SolveRecord(label, problem, _solve_once(problem, settings) or None, restarted=True)
    if not record.converged:
        rprint(f"[red]❌ Step {k}: {label} solve ended with status {record.status}[/red]")
    return record


def _cut(forecasts: Dict[str, np.ndarray], key: str, k: int, steps: int) -> np.ndarray:
    if key not in forecasts:
        raise SeriesError(f"forecast '{key}' is missing")
    series = np.asarray(forecasts[key], dtype=float)
    if series.size < k + steps:
        raise SeriesError(f"series shorter than span + horizon: {key} has {series.size} steps, needs {k + steps}")
    return series[k:k + steps]


def _converter_power(network: CoupledNetwork, values: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Signed MW of converters from the DHN side: heat pumps draw Φ/ζ, CHPs inject it."""
    out = {}
    for part in network.participants_on(NetworkSide.CONVERTER):
        phi = values[f"dhn.phi.{part.id}"]
        sign = -1.0 if part.epn_role == Role.CONSUMER else 1.0
        out[part.id] = sign * phi / part.zeta
    return out


def _converter_heat(network: CoupledNetwork, values: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {part.id: part.zeta * np.abs(values[f"epn.P.{part.id}"]) * network.base_mva
            for part in network.participants_on(NetworkSide.CONVERTER)}


def _solve_step(network, bids, forecasts, plant, config, omega, settings, zero_demand_weight):
    """All solves of the configured mode; returns (records, merged values, status)."""
    common = dict(zero_demand_weight=zero_demand_weight)
    mode = config.mode
    if mode in ("joint", "epn-only", "dhn-only"):
        rec = _solve(mode if mode != "joint" else "joint", network, bids, forecasts, plant, config, omega, settings,
                     include_epn=config.include_epn, include_dhn=config.include_dhn, **common)
        if rec.converged:
            return [rec], solution_values(rec.problem, rec.solution.x), "converged"
        return [rec], {}, "fallback"

    first_epn = mode == "seq-epn"
    first = _solve("epn" if first_epn else "dhn", network, bids, forecasts, plant, config, omega, settings,
                   include_epn=first_epn, include_dhn=not first_epn, **common)
    if not first.converged:
        return [first], {}, "fallback"
    values = solution_values(first.problem, first.solution.x)
    if first_epn:
        second = _solve("dhn", network, bids, forecasts, plant, config, omega, settings, include_epn=False,
                        include_dhn=True, converter_heat=_converter_heat(network, values), **common)
    else:
        second = _solve("epn", network, bids, forecasts, plant, config, omega, settings, include_epn=True,
                        include_dhn=False, converter_power=_converter_power(network, values), **common)
    if not second.converged:
        return [first, second], values, "infeasible"
    values.update(solution_values(second.problem, second.solution.x))
    return [first, second], values, "converged"


def _with_fallback(values: Dict[str, np.ndarray], plant: PlantState, config: HorizonConfig) -> Dict[str, np.ndarray]:
    """Fill the families of networks that were not solved from the shifted previous schedule."""
    wanted = [p for p, on in (("epn.", config.include_epn), ("dhn.", config.include_dhn)) if on]
    solved = {p for p in wanted if any(name.startswith(p) for name in values)}
    merged = dict(values)
    for name, v in (plant.schedule or {}).items():
        prefix = name[:4]
        if prefix in wanted and prefix not in solved:
            merged[name] = v
    missing = [p.rstrip(".") for p in wanted if not any(name.startswith(p) for name in merged)]
    if missing:
        rprint(f"[yellow]⚠️ Step {plant.step}: no schedule to fall back on for {', '.join(missing)}[/yellow]")
    return merged


def _prices(network: CoupledNetwork, records: List[SolveRecord]) -> LmpReport:
    lam_p = lam_mix = None
    for rec in records:
        if not rec.converged:
            continue
        if "epn.balance" in rec.problem.row_slices:
            lam_p = rec.solution.multipliers(rec.problem, "epn.balance")[:len(network.buses)]
        if "dhn.mixing" in rec.problem.row_slices:
            lam_mix = rec.solution.multipliers(rec.problem, "dhn.mixing")[:len(network.nodes)]
    return lmp_from_multipliers(network, lam_p, lam_mix)


def _advance_plant(plant: PlantState, network: CoupledNetwork, values, dispatch: DispatchStep,
                   t_ambient: float) -> Tuple[List[dict], List[dict]]:
    """Exact plant step; returns per-pipeline outlet deviation rows and per-node temperature rows."""
    k = plant.step
    flows = values["dhn.m"][:, 0]
    realised = simulate_plant_temperatures(network, plant.history, flows, dispatch.heat, t_ambient,
                                           previous=plant.node_temperatures)
    advance_history(plant.history, network, realised, flows)
    model_out, model_t = values.get("dhn.T_out"), values.get("dhn.T")
    deviation = []
    for pipe in plant.history.pipelines:
        e = network.edge_index[pipe]
        model = float(model_out[e, 0]) if model_out is not None else np.nan
        deviation.append({"step": k, "pipeline": pipe, "model_outlet_k": model,
                          "plant_outlet_k": float(realised.T_out[e]),
                          "deviation_k": float(realised.T_out[e]) - model})
    temperatures = [{"step": k, "node": node.id,
                     "model_k": float(model_t[i, 0]) if model_t is not None else np.nan,
                     "plant_k": float(realised.T[i])} for i, node in enumerate(network.nodes)]
    worst = max((abs(r["deviation_k"]) for r in deviation if np.isfinite(r["deviation_k"])), default=0.0)
    if worst > 1.0:
        rprint(f"[yellow]⚠️ Step {k}: plant and ω model outlets differ by up to {worst:.3f} K[/yellow]")
    plant.node_temperatures = realised.T.copy()
    plant.hydraulic = hydraulic_values(network, values).column(0)
    plant.producer_outlets = {p.id: float(realised.T_out[network.edge_index[p.edge]])
                              for p in network.dhn_participants() if p.dhn_role == Role.PRODUCER}
    return deviation, temperatures


def step(plant: PlantState, network: CoupledNetwork, forecasts: Dict[str, np.ndarray], config: HorizonConfig,
         settings: Optional[SolverSettings] = None, bids: Optional[Dict[str, ParticipantBid]] = None,
         zero_demand_weight: float = 1e-6) -> StepResult:
    """Clear interval `plant.step`, commit its dispatch and move the plant one step forward."""
    settings = settings or SolverSettings()
    start = time.perf_counter()
    k = plant.step
    bids = bids if bids is not None else collect_bids(plant.agents, k, config.steps, config.dt_h)
    with_dhn = config.include_dhn and network.has_dhn

    omega = None
    if with_dhn:
        omega = compute_omega(plant.predicted_flows, network, plant.history)

    records, values, status = _solve_step(network, bids, forecasts, plant, config, omega, settings,
                                          zero_demand_weight)
    if status != "converged":
        values = _with_fallback(values, plant, config)

    committed = dispatch_values(network, values, 0)
    dispatch = DispatchStep(step=k, **committed)
    for agent in plant.agents.values():
        agent.apply(dispatch, config.dt_h)
    plant.committed.append(dispatch)

    lmp = _prices(network, records)
    prices = price_report(dispatch, bids, lmp, network, k=0)
    roles = {p.id: p.dhn_role for p in network.dhn_participants()}
    terms = welfare_terms(dispatch, bids, 0, roles)
    settlement = settle(dispatch, {"epn_ump": prices.epn_ump, "dhn_ump": prices.dhn_ump, "lmp": lmp}, k,
                        network, config.dt_h)

    deviation, temperatures = [], []
    if with_dhn and "dhn.m" in values:
        t_amb = float(_cut(forecasts, "ambient_k", k, 1)[0])
        deviation, temperatures = _advance_plant(plant, network, values, dispatch, t_amb)
        plant.predicted_flows = shift_predicted_flows(pipeline_flows(network, values, plant.history.pipelines))
    if values:
        plant.schedule = shift_values(values)
    plant.step += 1

    return StepResult(step=k, status=status, dispatch=dispatch, prices=prices, welfare=terms, bids=bids,
                      solves=records, wall_time=time.perf_counter() - start, omega=omega,
                      deviation=deviation, temperatures=temperatures, settlement=settlement)


# ------------------------------
# whole run
# ------------------------------

@dataclass
class RunReport:
    mode: str
    config: HorizonConfig
    steps: List[StepResult]
    history: Optional[ThermalHistory] = None
    stopped: bool = False

    @property
    def total_welfare(self) -> float:
        """Accumulated welfare [¤] over the simulated span."""
        return ledger((s.welfare_rate for s in self.steps), self.config.dt_h)

    @property
    def failed_steps(self) -> List[int]:
        return [s.step for s in self.steps if s.status != "converged"]

    def dispatch_frame(self) -> pd.DataFrame:
        rows = [r for s in self.steps for r in s.dispatch.rows()]
        return pd.DataFrame(rows, columns=["step", "participant", "network", "power_mw", "charge_mw", "discharge_mw"])

    def price_frame(self) -> pd.DataFrame:
        rows = [r for s in self.steps for r in s.prices.rows()]
        return pd.DataFrame(rows, columns=["step", "network", "kind", "location", "price"])

    def multiplier_frame(self) -> pd.DataFrame:
        rows = [{"step": s.step, "network": net, "location": loc, "multiplier": v}
                for s in self.steps for (net, loc), v in s.prices.lmp.multipliers.items()]
        return pd.DataFrame(rows, columns=["step", "network", "location", "multiplier"])

    def settlement_frame(self) -> pd.DataFrame:
        frames = [s.settlement for s in self.steps if s.settlement is not None and not s.settlement.empty]
        if not frames:
            return pd.DataFrame(columns=["step", "participant", "network", "quantity_mw", "energy_mwh",
                                         "ump", "ump_cashflow", "lmp", "lmp_cashflow"])
        return pd.concat(frames, ignore_index=True)

    def welfare_frame(self) -> pd.DataFrame:
        dt_h = self.config.dt_h
        return pd.DataFrame([{"step": s.step, "status": s.status, "epn_rate": s.welfare["epn"],
                              "dhn_rate": s.welfare["dhn"], "rate": s.welfare_rate,
                              "welfare": s.welfare_rate * dt_h} for s in self.steps],
                            columns=["step", "status", "epn_rate", "dhn_rate", "rate", "welfare"])

    def solver_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.steps:
            for rec in s.solves:
                sol = rec.solution
                rows.append({"step": s.step, "solve": rec.label, "status": rec.status, "restarted": rec.restarted,
                             "iterations": sol.iterations if sol else 0,
                             "objective": sol.objective if sol else np.nan,
                             "inf_pr": sol.inf_pr if sol else np.nan, "inf_du": sol.inf_du if sol else np.nan,
                             "complementarity": sol.complementarity if sol else np.nan,
                             "solve_time_s": sol.wall_time if sol else np.nan, "step_time_s": s.wall_time,
                             "variables": rec.problem.n, "equalities": rec.problem.m_eq})
        return pd.DataFrame(rows)

    def iteration_frame(self) -> pd.DataFrame:
        rows = [{"step": s.step, "solve": rec.label, **it}
                for s in self.steps for rec in s.solves if rec.solution is not None for it in rec.solution.history]
        return pd.DataFrame(rows)

    def deviation_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r for s in self.steps for r in s.deviation],
                            columns=["step", "pipeline", "model_outlet_k", "plant_outlet_k", "deviation_k"])

    def temperature_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r for s in self.steps for r in s.temperatures],
                            columns=["step", "node", "model_k", "plant_k"])

    def bids_frame(self) -> pd.DataFrame:
        """First-step bids of every interval, enough to recompute UMPs and welfare."""
        rows = []
        for s in self.steps:
            for pid, bid in s.bids.items():
                rows.append({"step": s.step, "participant": pid, "network": bid.network.value,
                             "side": bid.side.value, "price": float(bid.price[0]),
                             "price_heat": float(bid.price_heat[0]) if bid.price_heat is not None else np.nan,
                             "p_min_mw": float(bid.p_min[0]), "p_max_mw": float(bid.p_max[0]),
                             "flexible": bool(bid.flexible)})
        return pd.DataFrame(rows, columns=["step", "participant", "network", "side", "price", "price_heat",
                                           "p_min_mw", "p_max_mw", "flexible"])


def check_forecasts(network: CoupledNetwork, forecasts: Dict[str, np.ndarray], config: HorizonConfig):
    if config.include_dhn and network.has_dhn:
        _cut(forecasts, "ambient_k", config.span - 1, config.steps)


def run(network: CoupledNetwork, agents: Dict[str, object], forecasts: Dict[str, np.ndarray], config: HorizonConfig,
        settings: Optional[SolverSettings] = None, initial: InitialConditions = InitialConditions(),
        zero_demand_weight: float = 1e-6, on_step: Optional[Callable[[StepResult], None]] = None,
        should_stop: Optional[Callable[[], bool]] = None) -> RunReport:
    """Rolling horizon over `config.span` intervals; failed steps are recorded and the run goes on."""
    if config.include_dhn and network.has_dhn:
        dof_audit(network)
        config.transit_check(network)
    check_forecasts(network, forecasts, config)
    plant = cold_start(network, agents, config, initial)
    results, stopped = [], False
    rprint(f"[cyan]🚀 Running {config.span} steps in {config.mode} mode (H={config.steps}, Δk={config.dt:g} s)[/cyan]")
    for _ in range(config.span):
        if should_stop is not None and should_stop():
            rprint(f"[yellow]⚠️ {config.mode} stopped at step {plant.step}[/yellow]")
            stopped = True
            break
        result = step(plant, network, forecasts, config, settings, zero_demand_weight=zero_demand_weight)
        results.append(result)
        if on_step is not None:
            on_step(result)
    report = RunReport(mode=config.mode, config=config, steps=results, history=plant.history, stopped=stopped)
    failed = report.failed_steps
    if failed:
        rprint(f"[yellow]⚠️ {config.mode}: {len(failed)} step(s) not converged: {failed[:10]}[/yellow]")
    rprint(f"[green]✅ {config.mode} finished, welfare {report.total_welfare:.2f} ¤[/green]")
    return report
