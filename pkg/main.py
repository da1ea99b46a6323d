"""
Command line front end of the transactive control simulator.

    python main.py validate scenarios/scenario1.yaml
    python main.py simulate scenarios/scenario2.yaml --mode joint --out output/s2_joint
    python main.py prices output/s2_joint
    python main.py compare output/s2/joint output/s2/epn-only output/s2/dhn-only
    python main.py oracle-check scenarios/network_cepdhn.yaml
"""
import argparse
import os
import sys
from typing import List, Optional

# Ensure project root is in path
current_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.append(current_dir)

from rich import print as rprint
from rich.console import Console
from rich.table import Table

from backend.global_state import state
from backend.logger import setup_logger
from backend.task_manager import run_manager
from core import scenario_io
from core.isoems import MODES, HorizonConfig
from core.network_model import dof_audit
from core.utils.config_utils import output_dir
from core.utils.errors import ConfigurationError, TcsError


def _table(frame, title: str) -> Table:
    table = Table(title=title)
    for col in frame.columns:
        table.add_column(str(col))
    for row in frame.itertuples(index=False):
        table.add_row(*[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    return table


# ------------------------------
# subcommands
# ------------------------------

def cmd_validate(args) -> int:
    bundle = scenario_io.load_scenario(args.scenario)
    network = bundle.network
    audit = dof_audit(network) if network.has_dhn else {}
    if network.has_dhn:
        bundle.horizon.transit_check(network)
    rprint(f"[green]✅ {bundle.name}: {len(network.buses)} buses, {len(network.nodes)} DHN nodes, "
           f"{len(network.edges)} edges, {len(network.participants)} participants[/green]")
    if audit:
        rprint(f"[cyan]DOF audit: {audit['equalities']} equalities + {audit['setpoints']} setpoints "
               f"= {audit['unknowns']} unknowns[/cyan]")
    return 0


def cmd_simulate(args) -> int:
    bundle = scenario_io.load_scenario(args.scenario, args.mode)
    if args.span is not None:
        if not 1 <= args.span <= bundle.horizon.span:
            raise ConfigurationError(f"--span must lie in 1..{bundle.horizon.span}")
        bundle.horizon = HorizonConfig(steps=bundle.horizon.steps, dt=bundle.horizon.dt, span=args.span,
                                       mode=bundle.horizon.mode)
    out = args.out or os.path.join(output_dir(), f"{bundle.name}_{bundle.horizon.mode}")
    run_dirs = run_manager.run_modes(bundle, [bundle.horizon.mode], out, workers=1)
    report = run_manager.reports[bundle.horizon.mode]
    if args.plots is not None:
        selection = scenario_io.PLOT_SERIES if args.plots == ["all"] else args.plots
        written = scenario_io.emit_plot_data(report, selection, run_dirs[bundle.horizon.mode], bundle.network)
        for path in written:
            rprint(f"[cyan]📈 {path}[/cyan]")
    return 0


def cmd_prices(args) -> int:
    prices, total = scenario_io.recompute_prices(args.run_dir)
    manifest = scenario_io.read_manifest(args.run_dir)
    if scenario_io.prices_match(args.run_dir, prices):
        rprint("[green]✅ Recomputed prices match prices.csv[/green]")
    else:
        rprint("[yellow]⚠️ Recomputed prices differ from prices.csv[/yellow]")
    rprint(f"[cyan]Welfare ledger: {total:.6f} ¤ (run reported {manifest['total_welfare']:.6f} ¤)[/cyan]")
    if args.out:
        prices.to_csv(args.out, index=False)
        rprint(f"[cyan]Prices written to {args.out}[/cyan]")
    return 0


def cmd_compare(args) -> int:
    run_dirs = list(args.run_dirs)
    if args.scenario:
        bundle = scenario_io.load_scenario(args.scenario)
        out = args.out or os.path.join(output_dir(), f"{bundle.name}_compare")
        run_dirs += list(run_manager.run_modes(bundle, args.modes, out, workers=args.workers).values())
    if not run_dirs:
        rprint("[yellow]⚠️ Nothing to compare[/yellow]")
        return 0
    frame = scenario_io.compare_runs(run_dirs)
    Console().print(_table(frame, "Accumulated welfare"))
    if args.csv:
        frame.to_csv(args.csv, index=False)
    return 0


def cmd_oracle(args) -> int:
    series, summary = scenario_io.oracle_check(args.scenario)
    rprint(f"[cyan]Peak deviation {summary['peak_k']:.4f} K at step {summary['peak_step']}, "
           f"tail {summary['tail_k']:.4f} K[/cyan]")
    if args.out:
        path = scenario_io.write_oracle(series, args.out, summary["dt_s"])
        rprint(f"[cyan]📈 {path}[/cyan]")
    return 0


# ------------------------------
# entry point
# ------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Transactive control of coupled power and district heating networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="Schema check and degrees-of-freedom audit")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="Rolling-horizon simulation")
    p.add_argument("scenario")
    p.add_argument("--mode", choices=MODES, default=None, help="Overrides horizon.mode of the scenario")
    p.add_argument("--out", default=None, help="Run directory (default: <output.dir>/<scenario>_<mode>)")
    p.add_argument("--span", type=int, default=None, help="Simulate only the first N steps")
    p.add_argument("--plots", nargs="*", default=None,
                   help=f"Plot series to emit: all or any of {', '.join(scenario_io.PLOT_SERIES)}")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("prices", help="Recompute UMP/LMP tables of a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None, help="Write the recomputed table here")
    p.set_defaults(func=cmd_prices)

    p = sub.add_parser("compare", help="Welfare comparison across runs")
    p.add_argument("run_dirs", nargs="*")
    p.add_argument("--scenario", default=None, help="Run these modes first, concurrently")
    p.add_argument("--modes", nargs="+", choices=MODES, default=["joint", "epn-only", "dhn-only"])
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--csv", default=None, help="Also write the comparison table as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("oracle-check", help="Exact node method against the ω approximation")
    p.add_argument("scenario", nargs="?", default=None)
    p.add_argument("--out", default=None, help="Directory for plot_deviation.csv")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    setup_logger()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TcsError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        state.add_log(f"Unhandled error: {e}")
        print(f"error[internal]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
