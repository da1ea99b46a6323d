import numpy as np
import pytest

from core.epn_model import EpnState, epn_inequality_set, epn_jacobian, power_flow_residual
from core.network_model import load_network
from core.utils.errors import ConfigurationError


def _two_bus_point(network, angle=0.1):
    """Lossless feeder with x = 0.1: the generator exports 10 sin(angle), both ends absorb the same VAr."""
    state = EpnState.flat(network)
    state.delta[0, 0] = angle
    p = 10.0 * np.sin(angle)
    q = 10.0 - 10.0 * np.cos(angle)
    state.P[:, 0] = [p, -p]
    state.Q[:, 0] = [q, q]
    return state


def test_flat_start_has_no_flow(two_bus_doc):
    network = load_network(two_bus_doc)
    dP, dQ = power_flow_residual(EpnState.flat(network), network, 0)
    np.testing.assert_array_almost_equal(dP, 0.0)
    np.testing.assert_array_almost_equal(dQ, 0.0)


def test_two_bus_power_flow(two_bus_doc):
    network = load_network(two_bus_doc)
    state = _two_bus_point(network)
    dP, dQ = power_flow_residual(state, network, 0)
    np.testing.assert_allclose(dP, 0.0, atol=1e-12)
    np.testing.assert_allclose(dQ, 0.0, atol=1e-12)

    state.P[:, 0] = 0.0
    dP, _ = power_flow_residual(state, network, 0)
    np.testing.assert_allclose(dP, [-10.0 * np.sin(0.1), 10.0 * np.sin(0.1)], rtol=1e-12)


def _flatten(state):
    return np.concatenate([state.V[:, 0], state.delta[:, 0], state.P[:, 0], state.Q[:, 0]])


def _residual_at(x, network, nb, npart):
    state = EpnState(V=x[:nb, None], delta=x[nb:2 * nb, None], P=x[2 * nb:2 * nb + npart, None],
                     Q=x[2 * nb + npart:, None])
    dP, dQ = power_flow_residual(state, network, 0)
    return np.concatenate([dP, dQ])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_jacobian_matches_central_differences(two_bus_doc, seed):
    network = load_network(two_bus_doc)
    rng = np.random.default_rng(seed)
    state = _two_bus_point(network)
    state.V[:, 0] = 1.0 + 0.05 * (rng.random(2) - 0.5)
    state.delta[:, 0] = 0.2 * (rng.random(2) - 0.5)
    nb, npart = 2, 2
    x = _flatten(state)
    jac = epn_jacobian(state, network, 0).toarray()

    h = 1e-6
    fd = np.zeros_like(jac)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd[:, j] = (_residual_at(xp, network, nb, npart) - _residual_at(xm, network, nb, npart)) / (2 * h)
    np.testing.assert_allclose(jac, fd, atol=1e-8)


def test_inequality_set_reports_margins(two_bus_doc):
    network = load_network(two_bus_doc)
    state = _two_bus_point(network)
    envelopes = {"gen": {"p_min": 0.0, "p_max": 2.0, "q_min": -1.0, "q_max": 1.0},
                 "load": {"p_min": -2.0, "p_max": 0.0}}
    margins = epn_inequality_set(state, network, 0, envelopes)
    # two voltage rows per bus, then P (and Q) rows per participant
    assert margins.size == 4 + 4 + 2
    np.testing.assert_allclose(margins[:4], [0.05, 0.05, 0.05, 0.05])
    assert np.all(margins >= 0)


def test_inequality_set_needs_envelopes(two_bus_doc):
    network = load_network(two_bus_doc)
    with pytest.raises(ConfigurationError):
        epn_inequality_set(EpnState.flat(network), network, 0, {})
