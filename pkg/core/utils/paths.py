# ------------------------------------------
# run directory products
# ------------------------------------------

_MANIFEST = "manifest.json"
_DISPATCH = "dispatch.csv"
_PRICES = "prices.csv"
_SETTLEMENT = "settlement.csv"
_WELFARE = "welfare.csv"
_SOLVER_STATS = "solver_stats.csv"
_ITERATIONS = "iterations.csv"
_THERMAL_DEVIATION = "thermal_deviation.csv"
_NODE_TEMPERATURES = "node_temperatures.csv"
_THERMAL_HISTORY = "thermal_history.csv"
_BIDS = "bids.csv"
_MULTIPLIERS = "multipliers.csv"
_RUN_LOG = "run.log"

# ------------------------------------------
# plot-ready series
# ------------------------------------------

_PLOT_FILES = {
    "injections": "plot_injections.csv",
    "dsm_bands": "plot_dsm_bands.csv",
    "node_temperatures": "plot_node_temperatures.csv",
    "heat_balance": "plot_heat_balance.csv",
    "prices": "plot_prices.csv",
    "solve_times": "plot_solve_times.csv",
    "deviation": "plot_deviation.csv",
}

__all__ = [
    "_MANIFEST",
    "_DISPATCH",
    "_PRICES",
    "_SETTLEMENT",
    "_WELFARE",
    "_SOLVER_STATS",
    "_ITERATIONS",
    "_THERMAL_DEVIATION",
    "_NODE_TEMPERATURES",
    "_THERMAL_HISTORY",
    "_BIDS",
    "_MULTIPLIERS",
    "_RUN_LOG",
    "_PLOT_FILES",
]
