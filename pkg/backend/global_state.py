from collections import deque
from datetime import datetime
from enum import Enum
from typing import Dict


class RunStatus(str, Enum):
    IDLE = "IDLE"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


class GlobalState:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(GlobalState, cls).__new__(cls)
            cls._instance.init()
        return cls._instance

    def init(self):
        self.status = RunStatus.IDLE
        self.logs = deque(maxlen=2000)  # Keep last 2000 lines
        self.log_count = 0  # Monotonic counter, survives ring-buffer eviction
        self.modes: Dict[str, dict] = {}
        self.error_msg = None

    def register_mode(self, mode: str, total: int):
        self.modes[mode] = {"status": "pending", "progress": 0, "total": total, "welfare": None}

    def update_mode(self, mode: str, status: str = None, progress: int = None, welfare: float = None):
        entry = self.modes.setdefault(mode, {"status": "pending", "progress": 0, "total": 0, "welfare": None})
        if status is not None:
            entry["status"] = status
        if progress is not None:
            entry["progress"] = progress
        if welfare is not None:
            entry["welfare"] = welfare

    def set_status(self, status: RunStatus, error_msg: str = None):
        self.status = status
        if error_msg is not None:
            self.error_msg = error_msg

    def add_log(self, message: str):
        timestamp = datetime.now().strftime("%H:%M:%S")
        self.logs.append(f"[{timestamp}] {message}")
        self.log_count += 1

    def dump_logs(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.logs) + "\n")

    def reset(self):
        self.status = RunStatus.IDLE
        self.modes = {}
        self.error_msg = None
        self.add_log("State reset.")


# Singleton instance
state = GlobalState()
