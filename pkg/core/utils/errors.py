class TcsError(Exception):
    """Base error of the transactive control toolchain."""

    category = "tcs"
    exit_code = 1


class ScenarioError(TcsError):
    """Scenario document does not conform to the schema."""

    category = "scenario"
    exit_code = 2


class ConfigurationError(TcsError):
    """Scenario is well-formed but describes an unusable network or bid set."""

    category = "configuration"
    exit_code = 2


class SeriesError(TcsError):
    category = "series"
    exit_code = 3


class HistoryError(TcsError):
    """Node-method history is too shallow for the requested window."""

    category = "history"
    exit_code = 4


class FrictionError(TcsError):
    category = "friction"
    exit_code = 2


class SolverError(TcsError):
    category = "solver"
    exit_code = 4
