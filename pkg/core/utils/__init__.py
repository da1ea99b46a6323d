# use try-except to avoid error when installing
try:
    from .decorator import except_handler
    from .config_utils import load_key, load_key_or, load_yaml, output_dir
    from .errors import (
        TcsError,
        ScenarioError,
        ConfigurationError,
        SeriesError,
        HistoryError,
        FrictionError,
        SolverError,
    )
    from rich import print as rprint
except ImportError:
    pass

__all__ = [
    "except_handler",
    "load_key",
    "load_key_or",
    "load_yaml",
    "output_dir",
    "rprint",
    "TcsError",
    "ScenarioError",
    "ConfigurationError",
    "SeriesError",
    "HistoryError",
    "FrictionError",
    "SolverError",
]
