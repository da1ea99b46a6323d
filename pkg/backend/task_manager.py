import os
import sys
import threading
import traceback
from typing import Dict, List, Optional

from backend.global_state import state, RunStatus

# Ensure project root is on sys.path
current_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if current_dir not in sys.path:
    sys.path.append(current_dir)

from core import isoems, scenario_io
from core.interior_point import SolverSettings
from core.utils.config_utils import load_key_or
from core.utils.paths import _RUN_LOG


class RunManager:
    """Runs rolling-horizon simulations, one thread per mode when several are requested."""

    def __init__(self):
        self.worker_threads: List[threading.Thread] = []
        self.stop_flag = threading.Event()
        self.reports: Dict[str, isoems.RunReport] = {}
        self.errors: Dict[str, BaseException] = {}
        self.lock = threading.Lock()

    def stop(self):
        self.stop_flag.set()
        for entry in state.modes.values():
            if entry["status"] == "running":
                entry["status"] = "stopping"
        state.add_log("Stop requested. Waiting for the current step to finish.")

    def _run_mode(self, bundle: scenario_io.ScenarioBundle, run_dir: str):
        mode = bundle.horizon.mode
        state.update_mode(mode, status="running")
        state.add_log(f"Starting {mode} run of {bundle.name}")
        settings = SolverSettings.resolve(bundle.solver)
        weight = bundle.solver.get("zero_demand_weight") or load_key_or("solver.zero_demand_weight", 1e-6)

        def on_step(result: isoems.StepResult):
            state.update_mode(mode, progress=result.step + 1)
            if result.status != "converged":
                state.add_log(f"{mode}: step {result.step} {result.status}")

        report = isoems.run(bundle.network, bundle.agents(), bundle.forecasts, bundle.horizon, settings,
                            bundle.initial, zero_demand_weight=float(weight), on_step=on_step,
                            should_stop=self.stop_flag.is_set)
        scenario_io.write_run(report, bundle, run_dir)
        with self.lock:
            self.reports[mode] = report
        state.update_mode(mode, status="stopped" if report.stopped else "completed", welfare=report.total_welfare)
        state.add_log(f"{mode} finished: welfare {report.total_welfare:.2f}")

    def _guarded(self, bundle, run_dir, gate: threading.Semaphore):
        mode = bundle.horizon.mode
        with gate:
            try:
                self._run_mode(bundle, run_dir)
            except Exception as e:
                with self.lock:
                    self.errors[mode] = e
                state.update_mode(mode, status="error")
                state.add_log(f"{mode} failed: {e}")
                state.add_log(traceback.format_exc())
            finally:
                if os.path.isdir(run_dir):
                    state.dump_logs(os.path.join(run_dir, _RUN_LOG))

    def run_modes(self, bundle: scenario_io.ScenarioBundle, modes: List[str], out_dir: str,
                  workers: Optional[int] = None) -> Dict[str, str]:
        """Simulate every mode into `<out_dir>/<mode>`; returns the run directory per mode.

        The first error is re-raised after all threads have finished.
        """
        workers = workers or int(load_key_or("run.workers", 2))
        self.stop_flag.clear()
        self.reports, self.errors = {}, {}
        state.set_status(RunStatus.RUNNING)
        gate = threading.Semaphore(max(1, workers))
        run_dirs = {}
        self.worker_threads = []
        for mode in modes:
            run_dirs[mode] = out_dir if len(modes) == 1 else os.path.join(out_dir, mode)
            state.register_mode(mode, bundle.horizon.span)
            thread = threading.Thread(target=self._guarded, args=(bundle.with_mode(mode), run_dirs[mode], gate),
                                      name=f"_run_{mode}", daemon=True)
            self.worker_threads.append(thread)
            thread.start()
        for thread in self.worker_threads:
            thread.join()
        self.worker_threads = []

        if self.errors:
            first = next(iter(self.errors.values()))
            state.set_status(RunStatus.FAILED, str(first))
            raise first
        state.set_status(RunStatus.COMPLETED)
        return run_dirs


run_manager = RunManager()
