import json
import os

import numpy as np
import pandas as pd
import pytest

import main
from core import isoems, scenario_io
from core.interior_point import SolverSettings
from core.dhn_thermal import (OracleConfig, ThermalHistory, compute_omega, exact_window, lossless_outlet,
                              lossy_outlet, oracle_experiment, required_depth, residence_time)
from core.network_model import KELVIN, EdgeKind
from core.scenario_io import load_scenario, read_document, resolve_series
from core.utils.errors import ConfigurationError, ScenarioError, SeriesError

from conftest import SCENARIO_DIR, write_yaml

DT = 900.0


@pytest.mark.parametrize("value, expected", [
    (2.0, [2.0, 2.0, 2.0]),
    ([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0]),
    ({"constant": 2.0, "scale": 0.5}, [1.0, 1.0, 1.0]),
    ({"values": [1.0, 2.0, 3.0], "scale": 2.0}, [2.0, 4.0, 6.0]),
])
def test_series_forms(value, expected):
    np.testing.assert_allclose(resolve_series(value, 3, DT), expected)


def test_breakpoints_are_interpolated_in_hours():
    series = resolve_series({"breakpoints": [[0, 0.0], [1, 4.0]]}, 5, DT)
    np.testing.assert_allclose(series, [0.0, 1.0, 2.0, 3.0, 4.0])


def test_named_forecast():
    named = {"wind": np.arange(5.0)}
    np.testing.assert_allclose(resolve_series("wind", 3, DT, named=named), [0.0, 1.0, 2.0])
    with pytest.raises(SeriesError, match="unknown forecast 'sun'"):
        resolve_series("sun", 3, DT, named=named)


@pytest.mark.parametrize("value", [
    [1.0, 2.0],
    {"breakpoints": [[0, 1.0], [0.25, 1.0]]},
])
def test_short_series_rejected(value):
    with pytest.raises(SeriesError, match="span \\+ horizon"):
        resolve_series(value, 3, DT)


def test_breakpoints_must_increase():
    with pytest.raises(SeriesError, match="increasing"):
        resolve_series({"breakpoints": [[0, 1.0], [2, 1.0], [1, 1.0]]}, 3, DT)


def test_csv_series(tmp_path):
    pd.DataFrame({"time_h": [0.0, 1.0], "load": [2.0, 6.0]}).to_csv(tmp_path / "load.csv", index=False)
    series = resolve_series({"csv": "load.csv", "scale": 0.5}, 3, DT, base_dir=str(tmp_path))
    np.testing.assert_allclose(series, [1.0, 1.5, 2.0])
    with pytest.raises(SeriesError, match="not found"):
        resolve_series({"csv": "missing.csv"}, 3, DT, base_dir=str(tmp_path))


def test_network_file_is_merged_underneath(tmp_path, two_bus_doc):
    base = {k: two_bus_doc[k] for k in ("schema_version", "name", "epn", "participants")}
    write_yaml(base, tmp_path / "grid.yaml")
    child = {"schema_version": 1, "name": "child", "network_file": "grid.yaml", "bids": two_bus_doc["bids"],
             "epn": {"base_mva": 2.0}}
    document = read_document(write_yaml(child, tmp_path / "child.yaml"))
    assert document["name"] == "child"
    assert document["epn"]["base_mva"] == 2.0
    assert len(document["epn"]["buses"]) == 2
    assert "network_file" not in document


def test_network_file_loop_rejected(tmp_path):
    write_yaml({"schema_version": 1, "network_file": "b.yaml"}, tmp_path / "a.yaml")
    write_yaml({"schema_version": 1, "network_file": "a.yaml"}, tmp_path / "b.yaml")
    with pytest.raises(ScenarioError, match="loops back"):
        read_document(str(tmp_path / "a.yaml"))


def test_missing_network_file(tmp_path):
    path = write_yaml({"schema_version": 1, "network_file": "nowhere.yaml"}, tmp_path / "a.yaml")
    with pytest.raises(ScenarioError, match="nowhere.yaml"):
        read_document(path)


def test_shipped_scenario_loads():
    bundle = load_scenario(f"{SCENARIO_DIR}/scenario1.yaml")
    assert bundle.horizon.mode == "joint"
    assert bundle.length == 96 + 16
    np.testing.assert_allclose(bundle.forecasts["ambient_k"], 10.0 + KELVIN)
    assert "elec_shape" in bundle.approximate
    agents = bundle.agents()
    assert set(agents) == {p.id for p in bundle.network.participants}


def test_heat_scenario_needs_ambient(tmp_path, loop_doc):
    loop_doc["bids"] = {"heat_source": {"agent": "envelope", "price": 20.0, "p_min_mw": 0.0, "p_max_mw": 3.0},
                        "heat_sink": {"agent": "flexible", "price": 50.0, "base_mw": 2.0}}
    loop_doc["horizon"] = {"steps": 2, "span_steps": 2, "mode": "dhn-only"}
    path = write_yaml(loop_doc, tmp_path / "loop.yaml")
    with pytest.raises(SeriesError, match="ambient_c"):
        load_scenario(path)
    loop_doc["forecasts"] = {"ambient_c": 5.0}
    bundle = load_scenario(write_yaml(loop_doc, tmp_path / "loop.yaml"))
    np.testing.assert_allclose(bundle.forecasts["ambient_k"], 278.15)


def test_bid_for_unknown_participant(tmp_path, two_bus_doc):
    two_bus_doc["bids"]["ghost"] = {"agent": "envelope", "p_min_mw": 0.0, "p_max_mw": 1.0}
    with pytest.raises(ConfigurationError, match="ghost"):
        load_scenario(write_yaml(two_bus_doc, tmp_path / "bad.yaml"))


def test_oracle_defaults():
    series, summary = scenario_io.oracle_check()
    assert summary["peak_step"] == 21
    assert 1.0 <= summary["peak_k"] <= 1.5
    assert summary["tail_k"] < 0.1
    assert len(series) == 60


def test_plot_selection(tmp_path, two_bus_file):
    bundle = load_scenario(two_bus_file)
    report = isoems.run(bundle.network, bundle.agents(), bundle.forecasts, bundle.horizon, SolverSettings())
    assert scenario_io.emit_plot_data(report, [], str(tmp_path / "none"), bundle.network) == []
    assert not os.path.exists(tmp_path / "none")
    with pytest.raises(ScenarioError, match="unknown plot series"):
        scenario_io.emit_plot_data(report, ["rainbow"], str(tmp_path), bundle.network)
    written = scenario_io.emit_plot_data(report, ["injections", "dsm_bands"], str(tmp_path), bundle.network)
    injections = pd.read_csv(written[0])
    np.testing.assert_allclose(sorted(set(injections["time_h"])), [0.0, 0.25])
    bands = pd.read_csv(written[1])
    epn = bands[bands["network"] == "epn"]
    np.testing.assert_allclose(epn["band_max_mw"], 0.5)
    np.testing.assert_allclose(epn["dispatched_mw"], 0.5, atol=1e-5)


# ------------------------------
# command line
# ------------------------------

def test_cli_simulate_then_recompute_prices(tmp_path, two_bus_file):
    run_dir = str(tmp_path / "run")
    assert main.main(["simulate", two_bus_file, "--out", run_dir, "--plots", "prices"]) == 0
    for name in ("manifest.json", "dispatch.csv", "prices.csv", "welfare.csv", "settlement.csv", "bids.csv",
                 "multipliers.csv", "plot_prices.csv"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    with open(os.path.join(run_dir, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["mode"] == "epn-only"
    assert manifest["failed_steps"] == []
    assert manifest["total_welfare"] == pytest.approx(2.5, abs=1e-3)

    prices, total = scenario_io.recompute_prices(run_dir)
    assert scenario_io.prices_match(run_dir, prices)
    assert total == pytest.approx(manifest["total_welfare"], rel=1e-9)
    assert main.main(["prices", run_dir, "--out", str(tmp_path / "prices.csv")]) == 0
    assert os.path.exists(tmp_path / "prices.csv")

    csv = str(tmp_path / "compare.csv")
    assert main.main(["compare", run_dir, "--csv", csv]) == 0
    table = pd.read_csv(csv)
    assert list(table["mode"]) == ["epn-only"]
    assert table.loc[0, "result"] == "ok"


def test_cli_validate_shipped_scenarios():
    for name in ("scenario1", "scenario2", "scenario2_tight", "scenario2_varying"):
        assert main.main(["validate", f"{SCENARIO_DIR}/{name}.yaml"]) == 0


def test_cli_missing_scenario(tmp_path, capsys):
    assert main.main(["simulate", str(tmp_path / "absent.yaml")]) == 2
    assert "error[scenario]" in capsys.readouterr().err


def test_cli_span_out_of_range(tmp_path, two_bus_file, capsys):
    assert main.main(["simulate", two_bus_file, "--span", "5", "--out", str(tmp_path / "run")]) == 2
    assert "error[configuration]" in capsys.readouterr().err


def test_cli_schema_error(tmp_path, two_bus_doc, capsys):
    two_bus_doc["horizon"]["mode"] = "sideways"
    path = write_yaml(two_bus_doc, tmp_path / "bad.yaml")
    assert main.main(["validate", path]) == 2
    assert "horizon.mode" in capsys.readouterr().err


def test_cli_prices_outside_a_run_directory(tmp_path):
    assert main.main(["prices", str(tmp_path)]) == 2


def test_cli_oracle_check(tmp_path):
    assert main.main(["oracle-check", "--out", str(tmp_path)]) == 0
    frame = pd.read_csv(tmp_path / "plot_deviation.csv")
    assert list(frame.columns) == ["time_h", "step", "exact_outlet_c", "approx_outlet_c", "deviation_k"]
    assert len(frame) == 60


def test_oracle_with_perfect_prediction_has_no_deviation():
    series = oracle_experiment(OracleConfig(steps=96, perfect_prediction=True))
    np.testing.assert_array_equal(series["predicted_flow_kg_s"], series["mass_flow_kg_s"])
    assert series["deviation_k"].abs().max() <= 1e-10


def test_horizon_outlets_match_the_plant_when_flows_are_predicted_right():
    """ω windows frozen on the true future flows reproduce the exact outlets at every horizon step."""
    network = load_scenario(f"{SCENARIO_DIR}/scenario1.yaml").network
    H, span = 16, 96
    pipes = network.edges_of_kind(EdgeKind.PIPELINE)
    history = ThermalHistory.steady(network, 360.0, 12.0, required_depth(network, H, DT), DT)
    t = np.arange(span + H)
    phase = np.arange(len(pipes))[:, None]
    flows = 12.0 + 6.0 * np.sin(2 * np.pi * (t + phase) / 37.0)
    inlets = 360.0 + 15.0 * np.cos(2 * np.pi * (t + 3 * phase) / 29.0)
    ambient = 283.15
    taus = [network.pipeline_time_constant(e) for e in pipes]

    predicted = {}
    worst, checked = 0.0, 0
    for k in range(span):
        omega = compute_omega(flows[:, k:k + H], network, history)
        for i in range(len(pipes)):
            for j in range(H):
                w = omega.coefficients[i][j]
                steps = k + j - np.arange(w.size)
                temps = np.where(steps >= 0, inlets[i, np.maximum(steps, 0)], 360.0)
                predicted.setdefault((i, k + j), []).append(
                    lossy_outlet(float(w @ temps), omega.residence[i, j], ambient, taus[i]))
        history.push(inlets[:, k], flows[:, k])
        for i, pipe in enumerate(history.pipelines):
            window = exact_window(history, pipe, k)
            exact = lossy_outlet(lossless_outlet(history, window, flows[i, k], k, pipe),
                                 residence_time(history, window, flows[i, k], k, pipe), ambient, taus[i])
            for approx in predicted.pop((i, k)):
                worst = max(worst, abs(exact - approx))
                checked += 1
    assert checked > span * len(pipes)
    assert worst <= 1e-10


@pytest.mark.parametrize("name", ["scenario1", "scenario2"])
def test_omega_weights_are_a_partition(name):
    bundle = load_scenario(f"{SCENARIO_DIR}/{name}.yaml")
    plant = isoems.cold_start(bundle.network, bundle.agents(), bundle.horizon, bundle.initial)
    omega = compute_omega(plant.predicted_flows, bundle.network, plant.history)
    np.testing.assert_allclose(omega.w1 + omega.w2 + omega.w3, 1.0, atol=1e-12)
    assert min(omega.w1.min(), omega.w2.min(), omega.w3.min()) >= -1e-12
