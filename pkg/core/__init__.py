# use try-except to avoid error when installing
try:
    from . import (
        network_model,
        epn_model,
        dhn_hydraulic,
        dhn_thermal,
        market,
        bid_agents,
        isoems,
        scenario_io,
    )
    from .utils import *
except ImportError:
    pass

__all__ = [
    'load_key',
    'network_model',
    'epn_model',
    'dhn_hydraulic',
    'dhn_thermal',
    'market',
    'bid_agents',
    'isoems',
    'scenario_io',
]
