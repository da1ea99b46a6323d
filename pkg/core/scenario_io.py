"""
Scenario ingestion, series resampling and the run directory.

Run directory layout (all CSV, comma separated, header row):
    manifest.json           scenario, mode, horizon, totals, serialised network
    dispatch.csv            step, participant, network, power_mw, charge_mw, discharge_mw
    bids.csv                step, participant, network, side, price, price_heat, p_min_mw, p_max_mw, flexible
    prices.csv              step, network, kind (ump|lmp), location, price [¤/MW]
    multipliers.csv         step, network, location, multiplier
    settlement.csv          step, participant, network, quantity_mw, energy_mwh, ump, ump_cashflow, lmp, lmp_cashflow
    welfare.csv             step, status, epn_rate, dhn_rate, rate [¤/h], welfare [¤]
    solver_stats.csv        one row per solve
    iterations.csv          one row per interior-point iteration
    thermal_deviation.csv   step, pipeline, model_outlet_k, plant_outlet_k, deviation_k
    node_temperatures.csv   step, node, model_k, plant_k
    thermal_history.csv     step, pipeline, inlet_temperature_k, mass_flow_kg_s
    run.log
"""
import io
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd
from rich import print as rprint

from core.bid_agents import build_agents
from core.dhn_thermal import OracleConfig, oracle_experiment
from core.isoems import HorizonConfig, InitialConditions, RunReport
from core.market import (DispatchStep, LmpReport, ParticipantBid, Side, ledger, lmp_from_multipliers, price_report,
                         welfare_terms)
from core.network_model import KELVIN, CoupledNetwork, NetworkSide, Role, load_network, serialize_network
from core.scenario_schema import validate_document
from core.utils.config_utils import load_yaml
from core.utils.decorator import except_handler
from core.utils.errors import ScenarioError, SeriesError
from core.utils.paths import (_BIDS, _DISPATCH, _ITERATIONS, _MANIFEST, _MULTIPLIERS, _NODE_TEMPERATURES,
                              _PLOT_FILES, _PRICES, _SETTLEMENT, _SOLVER_STATS, _THERMAL_DEVIATION,
                              _THERMAL_HISTORY, _WELFARE)

PLOT_SERIES = tuple(_PLOT_FILES)


# ------------------------------
# series
# ------------------------------

def resolve_series(value, length: int, dt: float, base_dir: str = ".", name: str = "series",
                   named: Optional[Dict[str, np.ndarray]] = None) -> np.ndarray:
    """Array of `length` samples at Δk from a constant, list, breakpoint list, CSV or named forecast."""
    if isinstance(value, str):
        if named is None or value not in named:
            raise SeriesError(f"{name}: unknown forecast '{value}'")
        series = named[value]
    elif isinstance(value, (int, float)):
        series = np.full(length, float(value))
    elif isinstance(value, list):
        series = np.asarray(value, dtype=float)
    elif isinstance(value, dict):
        series = _from_spec(value, length, dt, base_dir, name)
    else:
        raise SeriesError(f"{name}: cannot read a series from {type(value).__name__}")
    series = np.asarray(series, dtype=float)
    if series.size < length:
        raise SeriesError(f"series shorter than span + horizon: {name} has {series.size} steps, needs {length}")
    return series[:length].copy()


def _from_spec(spec: dict, length: int, dt: float, base_dir: str, name: str) -> np.ndarray:
    scale = float(spec.get("scale", 1.0))
    hours = np.arange(length) * dt / 3600.0
    if spec.get("constant") is not None:
        return np.full(length, float(spec["constant"]) * scale)
    if spec.get("values") is not None:
        return np.asarray(spec["values"], dtype=float) * scale
    if spec.get("breakpoints") is not None:
        points = np.asarray(spec["breakpoints"], dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or np.any(np.diff(points[:, 0]) < 0):
            raise SeriesError(f"{name}: breakpoints must be increasing [hour, value] pairs")
        if points[-1, 0] < hours[-1] - 1e-9:
            raise SeriesError(f"series shorter than span + horizon: {name} ends at {points[-1, 0]:g} h, "
                              f"needs {hours[-1]:g} h")
        return np.interp(hours, points[:, 0], points[:, 1]) * scale
    path = spec["csv"] if os.path.isabs(spec["csv"]) else os.path.join(base_dir, spec["csv"])
    if not os.path.exists(path):
        raise SeriesError(f"{name}: CSV file {path} not found")
    frame = pd.read_csv(path)
    column = spec.get("column") or [c for c in frame.columns if c != "time_h"][0]
    if column not in frame.columns:
        raise SeriesError(f"{name}: column '{column}' missing in {path}")
    if "time_h" in frame.columns:
        t = frame["time_h"].to_numpy(dtype=float)
        if t[-1] < hours[-1] - 1e-9:
            raise SeriesError(f"series shorter than span + horizon: {name} ends at {t[-1]:g} h")
        return np.interp(hours, t, frame[column].to_numpy(dtype=float)) * scale
    return frame[column].to_numpy(dtype=float) * scale


# ------------------------------
# scenario bundle
# ------------------------------

@dataclass
class ScenarioBundle:
    name: str
    path: Optional[str]
    document: dict
    network: CoupledNetwork
    forecasts: Dict[str, np.ndarray]
    horizon: HorizonConfig
    solver: dict
    initial: InitialConditions
    approximate: List[str] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.horizon.span + self.horizon.steps

    @property
    def base_dir(self) -> str:
        return os.path.dirname(os.path.abspath(self.path)) if self.path else "."

    def resolve(self, value) -> np.ndarray:
        return resolve_series(value, self.length, self.horizon.dt, self.base_dir, "bid", self.forecasts)

    def agents(self) -> Dict[str, object]:
        """Fresh agents; battery state lives in them, so every run needs its own set."""
        return build_agents(self.network, self.document.get("bids", {}), self.resolve, self.length,
                            self.horizon.dt_h)

    def with_mode(self, mode: str) -> "ScenarioBundle":
        horizon = HorizonConfig(steps=self.horizon.steps, dt=self.horizon.dt, span=self.horizon.span, mode=mode)
        return ScenarioBundle(self.name, self.path, self.document, self.network, self.forecasts, horizon,
                              self.solver, self.initial, self.approximate)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def read_document(path: str, _seen: Optional[set] = None) -> dict:
    """Scenario YAML with its `network_file` merged underneath (the base may chain further)."""
    if not os.path.exists(path):
        raise ScenarioError(f"scenario file {path} not found")
    seen = set(_seen or ())
    key = os.path.abspath(path)
    if key in seen:
        raise ScenarioError(f"network_file chain loops back to {path}")
    seen.add(key)
    document = load_yaml(path)
    network_file = document.pop("network_file", None)
    if network_file:
        ref = network_file if os.path.isabs(network_file) else os.path.join(os.path.dirname(path), network_file)
        if not os.path.exists(ref):
            raise ScenarioError(f"network_file {network_file} not found next to {path}")
        base = read_document(ref, seen)
        base.pop("schema_version", None)
        base.pop("name", None)
        base.pop("description", None)
        document = _merge(base, document)
    return document


def load_scenario(path: str, mode: Optional[str] = None) -> ScenarioBundle:
    document = validate_document(read_document(path))
    network = load_network(document)
    horizon = HorizonConfig.from_spec(document.get("horizon", {}), mode)
    length = horizon.span + horizon.steps
    base_dir = os.path.dirname(os.path.abspath(path))

    forecasts, approximate = {}, []
    for name, value in (document.get("forecasts") or {}).items():
        forecasts[name] = resolve_series(value, length, horizon.dt, base_dir, name)
        if isinstance(value, dict) and value.get("approximate"):
            approximate.append(name)
    if "ambient_k" not in forecasts and "ambient_c" in forecasts:
        forecasts["ambient_k"] = forecasts["ambient_c"] + KELVIN
    if network.has_dhn and horizon.include_dhn and "ambient_k" not in forecasts:
        raise SeriesError("forecast 'ambient_c' is missing")

    bundle = ScenarioBundle(name=document.get("name") or os.path.splitext(os.path.basename(path))[0], path=path,
                            document=document, network=network, forecasts=forecasts, horizon=horizon,
                            solver=document.get("solver") or {},
                            initial=InitialConditions.from_spec(document.get("initial") or {}),
                            approximate=approximate)
    bundle.agents()     # surfaces missing bids and short bid series before any solve
    if approximate:
        rprint(f"[yellow]⚠️ Approximate (digitised) series: {', '.join(approximate)}[/yellow]")
    return bundle


# ------------------------------
# run directory
# ------------------------------

def _csv(frame: pd.DataFrame, run_dir: str, name: str):
    frame.to_csv(os.path.join(run_dir, name), index=False)


def _read(run_dir: str, name: str) -> pd.DataFrame:
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        raise ScenarioError(f"{path} not found; is this a run directory?")
    return pd.read_csv(path, float_precision="round_trip", keep_default_na=True)


@except_handler("Failed to write run directory", retry=1, delay=1)
def write_run(report: RunReport, bundle: ScenarioBundle, run_dir: str) -> str:
    os.makedirs(run_dir, exist_ok=True)
    _csv(report.dispatch_frame(), run_dir, _DISPATCH)
    _csv(report.bids_frame(), run_dir, _BIDS)
    _csv(report.price_frame(), run_dir, _PRICES)
    _csv(report.multiplier_frame(), run_dir, _MULTIPLIERS)
    _csv(report.settlement_frame(), run_dir, _SETTLEMENT)
    _csv(report.welfare_frame(), run_dir, _WELFARE)
    _csv(report.solver_frame(), run_dir, _SOLVER_STATS)
    _csv(report.iteration_frame(), run_dir, _ITERATIONS)
    _csv(report.deviation_frame(), run_dir, _THERMAL_DEVIATION)
    _csv(report.temperature_frame(), run_dir, _NODE_TEMPERATURES)
    if report.history is not None:
        _csv(report.history.to_frame(), run_dir, _THERMAL_HISTORY)
    statuses = pd.Series([s.status for s in report.steps], dtype=object).value_counts().to_dict()
    manifest = {
        "scenario": bundle.name,
        "scenario_path": bundle.path,
        "mode": report.mode,
        "steps": report.config.steps,
        "dt_s": report.config.dt,
        "span": report.config.span,
        "simulated_steps": len(report.steps),
        "stopped": report.stopped,
        "total_welfare": report.total_welfare,
        "statuses": {str(k): int(v) for k, v in statuses.items()},
        "failed_steps": report.failed_steps,
        "approximate_series": bundle.approximate,
        "network": serialize_network(bundle.network),
    }
    with open(os.path.join(run_dir, _MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    rprint(f"[green]✅ Run written to {run_dir}[/green]")
    return run_dir


def read_manifest(run_dir: str) -> dict:
    path = os.path.join(run_dir, _MANIFEST)
    if not os.path.exists(path):
        raise ScenarioError(f"{path} not found; is this a run directory?")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _bids_of_step(frame: pd.DataFrame) -> Dict[str, ParticipantBid]:
    bids = {}
    for row in frame.itertuples(index=False):
        heat = None if pd.isna(row.price_heat) else np.array([float(row.price_heat)])
        bids[row.participant] = ParticipantBid(participant=row.participant, network=NetworkSide(row.network),
                                               side=Side(row.side), price=np.array([float(row.price)]),
                                               p_min=np.array([float(row.p_min_mw)]),
                                               p_max=np.array([float(row.p_max_mw)]),
                                               flexible=bool(row.flexible), price_heat=heat)
    return bids


def _lmp_of_step(network: CoupledNetwork, frame: pd.DataFrame) -> LmpReport:
    lam = {}
    for net, count, ids in (("epn", len(network.buses), [b.id for b in network.buses]),
                            ("dhn", len(network.nodes), [n.id for n in network.nodes])):
        part = frame[frame["network"] == net]
        if part.empty or count == 0:
            lam[net] = None
            continue
        values = dict(zip(part["location"].astype(int), part["multiplier"].astype(float)))
        lam[net] = np.array([values[i] for i in ids])
    return lmp_from_multipliers(network, lam["epn"], lam["dhn"])


def recompute_prices(run_dir: str):
    """UMP/LMP tables and the welfare ledger rebuilt from dispatch, bids and multipliers.

    Returns `(prices, welfare_total)`.
    """
    manifest = read_manifest(run_dir)
    network = load_network(manifest["network"])
    dispatch = _read(run_dir, _DISPATCH)
    bids = _read(run_dir, _BIDS)
    multipliers = _read(run_dir, _MULTIPLIERS)
    roles = {p.id: p.dhn_role for p in network.dhn_participants()}
    rows, rates = [], []
    for k in sorted(set(bids["step"])):
        step_bids = _bids_of_step(bids[bids["step"] == k])
        step_dispatch = DispatchStep.from_frame(dispatch, int(k))
        lmp = _lmp_of_step(network, multipliers[multipliers["step"] == k])
        rows += price_report(step_dispatch, step_bids, lmp, network, k=0).rows()
        terms = welfare_terms(step_dispatch, step_bids, 0, roles)
        rates.append(terms["epn"] + terms["dhn"])
    prices = pd.DataFrame(rows, columns=["step", "network", "kind", "location", "price"])
    return prices, ledger(rates, float(manifest["dt_s"]) / 3600.0)


def prices_match(run_dir: str, recomputed: pd.DataFrame) -> bool:
    stored = _read(run_dir, _PRICES)
    stored["location"] = stored["location"].fillna("").astype(str)
    fresh = pd.read_csv(io.StringIO(recomputed.to_csv(index=False)), float_precision="round_trip")
    fresh["location"] = fresh["location"].fillna("").astype(str)
    if stored.shape != fresh.shape:
        return False
    same = (stored["price"].to_numpy() == fresh["price"].to_numpy()) | (stored["price"].isna() & fresh["price"].isna())
    return bool(np.all(same) and (stored["location"] == fresh["location"]).all())


def compare_runs(run_dirs: Iterable[str]) -> pd.DataFrame:
    """One welfare row per run, highest welfare first."""
    rows = []
    for run_dir in run_dirs:
        manifest = read_manifest(run_dir)
        welfare = _read(run_dir, _WELFARE)
        infeasible = int((welfare["status"] == "infeasible").sum())
        fallback = int((welfare["status"] == "fallback").sum())
        rows.append({"run": run_dir, "scenario": manifest["scenario"], "mode": manifest["mode"],
                     "welfare": float(welfare["welfare"].sum()), "steps": len(welfare),
                     "infeasible_steps": infeasible, "fallback_steps": fallback,
                     "result": "No Feasible Solution" if infeasible or fallback else "ok"})
    frame = pd.DataFrame(rows, columns=["run", "scenario", "mode", "welfare", "steps", "infeasible_steps",
                                        "fallback_steps", "result"])
    return frame.sort_values("welfare", ascending=False, kind="mergesort").reset_index(drop=True)


# ------------------------------
# plot data
# ------------------------------

def _time(frame: pd.DataFrame, dt_h: float) -> pd.DataFrame:
    frame = frame.copy()
    frame.insert(0, "time_h", frame["step"] * dt_h)
    return frame


def _dsm_bands(report: RunReport, network: CoupledNetwork) -> pd.DataFrame:
    """Aggregated flexibility band of flexible consumers and what was dispatched inside it."""
    rows = []
    for s in report.steps:
        for side, served in (("epn", s.dispatch.power), ("dhn", s.dispatch.heat)):
            lo = hi = got = 0.0
            for pid, bid in s.bids.items():
                part = network.participants[network.participant_index[pid]]
                role = part.epn_role if side == "epn" else part.dhn_role
                if pid not in served or role != Role.CONSUMER or not bid.flexible or part.network == NetworkSide.CONVERTER:
                    continue
                lo += float(bid.p_min[0])
                hi += float(bid.p_max[0])
                got += abs(served[pid])
            rows.append({"step": s.step, "network": side, "band_min_mw": lo, "band_max_mw": hi, "dispatched_mw": got})
    return pd.DataFrame(rows, columns=["step", "network", "band_min_mw", "band_max_mw", "dispatched_mw"])


def _heat_balance(report: RunReport, network: CoupledNetwork) -> pd.DataFrame:
    roles = {p.id: p.dhn_role for p in network.dhn_participants()}
    rows = []
    for s in report.steps:
        produced = sum(v for pid, v in s.dispatch.heat.items() if roles.get(pid) == Role.PRODUCER)
        consumed = sum(v for pid, v in s.dispatch.heat.items() if roles.get(pid) == Role.CONSUMER)
        temps = [r["plant_k"] for r in s.temperatures]
        rows.append({"step": s.step, "produced_mw": produced, "consumed_mw": consumed,
                     "avg_node_temperature_c": float(np.mean(temps)) - KELVIN if temps else np.nan})
    return pd.DataFrame(rows, columns=["step", "produced_mw", "consumed_mw", "avg_node_temperature_c"])


def emit_plot_data(report: RunReport, selection: Iterable[str], out_dir: str, network: CoupledNetwork) -> List[str]:
    """One CSV per selected figure family; an empty selection writes nothing."""
    selection = list(selection)
    unknown = [s for s in selection if s not in _PLOT_FILES]
    if unknown:
        raise ScenarioError(f"unknown plot series {', '.join(unknown)}; choose from {', '.join(PLOT_SERIES)}")
    if not selection:
        return []
    dt_h = report.config.dt_h
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in selection:
        if name == "injections":
            frame = _time(report.dispatch_frame()[["step", "participant", "network", "power_mw"]], dt_h)
        elif name == "dsm_bands":
            frame = _time(_dsm_bands(report, network), dt_h)
        elif name == "node_temperatures":
            temps = report.temperature_frame()
            frame = pd.DataFrame({"time_h": temps["step"] * dt_h, "node": temps["node"],
                                  "t_c": temps["plant_k"] - KELVIN})
        elif name == "heat_balance":
            frame = _time(_heat_balance(report, network), dt_h)
        elif name == "prices":
            frame = _time(report.price_frame(), dt_h)
        elif name == "solve_times":
            stats = report.solver_frame()
            frame = stats[["step", "solve", "iterations", "solve_time_s", "step_time_s"]] if not stats.empty \
                else pd.DataFrame(columns=["step", "solve", "iterations", "solve_time_s", "step_time_s"])
            frame = _time(frame, dt_h)
        else:
            frame = _time(report.deviation_frame()[["step", "pipeline", "deviation_k"]], dt_h)
        path = os.path.join(out_dir, _PLOT_FILES[name])
        frame.to_csv(path, index=False)
        written.append(path)
    return written


# ------------------------------
# approximation accuracy
# ------------------------------

def oracle_check(path: Optional[str] = None, tail_steps: int = 10):
    """Exact-vs-ω outlet deviation for the scenario's `oracle` section (defaults without one).

    Returns `(series, summary)`; summary holds the peak deviation, its step and the largest
    deviation over the last `tail_steps` steps.
    """
    config = OracleConfig()
    if path is not None:
        document = validate_document(read_document(path))
        if document.get("oracle"):
            network = load_network(document) if document.get("dhn") else None
            config = OracleConfig.from_spec(document["oracle"], network)
    series = oracle_experiment(config)
    dev = series["deviation_k"].abs()
    summary = {"peak_k": float(dev.max()), "peak_step": int(series["step"].iloc[int(dev.to_numpy().argmax())]),
               "tail_k": float(dev.iloc[-tail_steps:].max()), "dt_s": config.dt}
    return series, summary


def write_oracle(series: pd.DataFrame, out_dir: str, dt_s: float = 900.0) -> str:
    os.makedirs(out_dir, exist_ok=True)
    frame = pd.DataFrame({"time_h": series["step"] * dt_s / 3600.0, "step": series["step"],
                          "exact_outlet_c": series["exact_outlet_k"] - KELVIN,
                          "approx_outlet_c": series["approx_outlet_k"] - KELVIN,
                          "deviation_k": series["deviation_k"]})
    path = os.path.join(out_dir, _PLOT_FILES["deviation"])
    frame.to_csv(path, index=False)
    return path
