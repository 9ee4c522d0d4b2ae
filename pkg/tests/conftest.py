import copy

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridtrade.grid import builtin_scenario, scenario_from_dict

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def two_bus_doc(r=0.0, x=0.1, horizon=1, s_max=10.0, v_bounds=(0.9, 1.1), appliances=None,
                generators=None, power_factor=1.0):
    """Slack at bus 1, one aggregator at bus 2; generator list defaults to none."""
    return {
        "name": "two-bus",
        "base": {"mva": 0.001, "kv": 0.4},
        "network": {
            "buses": [{"id": 1, "kind": "slack", "v_min": v_bounds[0], "v_max": v_bounds[1]},
                      {"id": 2, "v_min": v_bounds[0], "v_max": v_bounds[1]}],
            "branches": [{"from": 1, "to": 2, "r": r, "x": x, "s_max": s_max}],
        },
        "aggregators": [{"bus": 2, "power_factor": power_factor, "appliances": appliances or []}],
        "generators": generators or [],
        "market": {"horizon": horizon, "vartheta": 1.0, "xi1": 1e-8, "xi2": 1e-8,
                   "step": {"schedule": "inv_sqrt", "base": 2.0, "mu_scale": 0.5},
                   "penalty": 0.2, "max_iters": 2000, "seed": 3},
    }


def ev_appliance(horizon=2, wake_prob=None, **kw):
    d = {"id": "ev", "type": 1, "count": 1, "window_offset": 0, "window_length": horizon,
         "e_min": 0.0, "e_max": 1.0, "E_min": 0.5, "E_max": 1.5, "e_nom": 0.75, "E_nom": 1.5,
         "kappa": 1.0, "kernel": "log1p",
         "wake_prob": wake_prob if wake_prob is not None else [1.0] + [0.0] * (horizon - 1)}
    d.update(kw)
    return d


@pytest.fixture(scope="session")
def ref5():
    return builtin_scenario("ref5")


@pytest.fixture(scope="session")
def toy2():
    return builtin_scenario("toy2")


@pytest.fixture
def doc_factory():
    return lambda **kw: copy.deepcopy(two_bus_doc(**kw))


@pytest.fixture
def build():
    return scenario_from_dict


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dno_case(op, rng, T=4, scale=0.02):
    """Random network state, multipliers and injections around the flat start of ``op``."""
    from gridtrade.dno import DnoState, Injections

    st0 = op.flat_state(T)
    x = st0.x + scale * rng.standard_normal(st0.x.shape)
    mu = rng.normal(0.0, 2.0, (op.nr, T))
    p = rng.normal(0.0, 5.0, (op.n, T))
    q = rng.normal(0.0, 2.0, (op.n, T))
    ren_min = np.zeros((op.n, T))
    ren = np.zeros((op.n, T))
    ren_min[op.ren_pos] = rng.uniform(0.0, 1.0, (len(op.ren_pos), T))
    ren[op.ren_pos] = ren_min[op.ren_pos] + rng.uniform(0.0, 1.0, (len(op.ren_pos), T))
    inj = Injections(p, q, ren, ren_min, welfare=float(rng.normal(0.0, 10.0)))
    return DnoState(x, mu), inj


def lagrangian_fd(op, state, inj, penalty, h=1e-6):
    """Central finite differences of the operator's Lagrangian in ``(x, mu)``."""
    from gridtrade.dno import DnoState, lagrangian_value_and_gradient

    def val(x, mu):
        return lagrangian_value_and_gradient(op, DnoState(x, mu), inj, penalty)[0]

    gx = np.zeros_like(state.x)
    gm = np.zeros_like(state.mu)
    for arr, out, is_x in ((state.x, gx, True), (state.mu, gm, False)):
        for idx in np.ndindex(arr.shape):
            up, dn = arr.copy(), arr.copy()
            up[idx] += h
            dn[idx] -= h
            if is_x:
                out[idx] = (val(up, state.mu) - val(dn, state.mu)) / (2 * h)
            else:
                out[idx] = (val(state.x, up) - val(state.x, dn)) / (2 * h)
    return gx, gm
