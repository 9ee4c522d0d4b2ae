import math

import numpy as np
import pytest

from conftest import ev_appliance, two_bus_doc
from gridtrade.grid import builtin_scenario, scenario_from_dict
from gridtrade.linpf import assemble_lambda
from gridtrade.market import (Mailbox, Market, World, benchmark_run, dominance_tol, par, run_horizon, trace_rows)

GEN = {"bus": 1, "cost": [0.05, 0.5, 0.0], "p_min": 0.0, "p_max": 20.0, "q_min": -5.0, "q_max": 5.0}


@pytest.fixture(scope="module")
def ref5_runs():
    scen = builtin_scenario("ref5")
    return {mode: run_horizon(scen, mode) for mode in ("uncertainty", "complete", "benchmark")}


def test_first_slot_initialization():
    mk = Market(builtin_scenario("ref5"))
    try:
        mk.begin_slot(1)
        theta, v = mk.op.theta_v(mk.state.x)
        assert not theta.any() and np.all(v == 1.0) and not mk.state.mu.any()
        for g in mk.gens:
            assert np.array_equal(g.decision.p_ren, g.decision.ren_max) and g.decision.confidence == 0.0
    finally:
        mk.close()


def test_next_slot_warm_starts_from_equilibrium():
    mk = Market(builtin_scenario("ref5"))
    try:
        mk.run_slot(1)
        x, mu = mk.state.x.copy(), mk.state.mu.copy()
        p_conv = [g.decision.p_conv.copy() for g in mk.gens]
        mk.begin_slot(2)
        assert np.array_equal(mk.state.x, x[:, 1:]) and np.array_equal(mk.state.mu, mu[:, 1:])
        for g, prev in zip(mk.gens, p_conv):
            assert np.array_equal(g.decision.p_conv, prev[1:])
    finally:
        mk.close()


def test_degenerate_scenario_clears_at_once():
    scen = scenario_from_dict(two_bus_doc(horizon=3))
    res = run_horizon(scen)
    assert [s.iterations for s in res.slots] == [1, 1, 1]
    assert res.converged
    assert not res.committed["p"].any() and not res.committed["rho"].any()


def test_single_slot_horizon():
    doc = two_bus_doc(horizon=1, generators=[GEN],
                      appliances=[ev_appliance(horizon=1, E_min=0.3, E_max=0.9)])
    res = run_horizon(scenario_from_dict(doc))
    assert len(res.slots) == 1 and res.converged
    out = res.slots[0]
    assert np.array_equal(res.committed["p"][:, 0], out.p[:, 0])
    assert np.array_equal(res.committed["rho"][:, 0], out.signals.rho[:, 0])


def test_benchmark_runs_nominal_from_wake():
    app = ev_appliance(horizon=4, wake_prob=[0.0, 0.0, 1.0, 0.0], window_length=2, e_min=0.0, e_max=1.0,
                       E_min=0.5, E_max=1.5, e_nom=0.75, E_nom=1.5)
    doc = two_bus_doc(horizon=4, generators=[GEN], appliances=[app])
    res = benchmark_run(scenario_from_dict(doc))
    assert np.allclose(res.committed["load"][1], [0.0, 0.0, 0.75, 0.75], atol=0, rtol=0)


def _trace_text(res):
    return "\n".join(",".join(map(str, r)) for r in trace_rows(res))


def test_repeat_runs_identical():
    scen = builtin_scenario("ref5")
    a, b = run_horizon(scen), run_horizon(scen)
    c = run_horizon(scen, threads=4)
    assert _trace_text(a) == _trace_text(b) == _trace_text(c)
    for key in a.committed:
        assert np.array_equal(a.committed[key], c.committed[key])


def test_world_replay_identical(tmp_path):
    scen = builtin_scenario("ref5")
    world = World.sample(scen, 11)
    world.write_csv(tmp_path / "w.csv")
    again = World.read_csv(tmp_path / "w.csv")
    assert again.events == {k: v for k, v in world.events.items() if v}
    assert _trace_text(run_horizon(scen, seed=11)) == _trace_text(run_horizon(scen, seed=11, world=again))


def test_world_sampling_follows_wake_law():
    p = [0.1, 0.3, 0.0, 0.2, 0.25, 0.05]
    n = 20000
    app = ev_appliance(horizon=6, wake_prob=p, count=n, window_length=1)
    scen = scenario_from_dict(two_bus_doc(horizon=6, appliances=[app]))
    counts = np.zeros(7)
    for slot, _, k in World.sample(scen, 5).events[2]:
        counts[slot] += k
    counts[0] = n - counts.sum()
    probs = np.array([1.0 - sum(p)] + p)
    sd = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) <= 4 * sd + 1e-9)


def test_complete_information_peak_not_higher(ref5_runs):
    assert (ref5_runs["complete"].metrics["peak_demand"]["aggregate"]
            <= ref5_runs["uncertainty"].metrics["peak_demand"]["aggregate"])


def test_reference_par_and_profit_direction(ref5_runs):
    dr, bm = ref5_runs["uncertainty"], ref5_runs["benchmark"]
    assert dr.metrics["par"]["aggregate"] <= bm.metrics["par"]["aggregate"]
    assert dr.dominance and all(opt >= comp - dominance_tol(comp) for _, _, opt, comp in dr.dominance)


@pytest.mark.parametrize("mode", ["uncertainty", "complete", "benchmark"])
def test_price_identities_every_iteration(mode):
    for name in ("ref5", "toy2"):
        scen = builtin_scenario(name)
        res = run_horizon(scen, mode)
        mk = Market(scen, mode)
        op = mk.op
        mk.close()
        agg = [(op.blocks.pos[a.bus], a.power_factor) for a in scen.aggregators]
        for rec in res.trace:
            for i, pf in agg:
                assert abs(rec.rho[i] - (rec.lam[i] + rec.gam[i] * math.sqrt((1 - pf * pf) / (pf * pf)))) <= 1e-12
            for j in op.gen_pos:
                assert rec.rho[j] == rec.lam[j] and rec.varrho[j] == rec.gam[j]


def test_beta_constant_across_iterations(ref5_runs):
    beta = ref5_runs["uncertainty"].committed["beta"]
    assert np.all(beta == beta[:, :1])


def test_trace_bookkeeping(ref5_runs):
    res = ref5_runs["uncertainty"]
    for s in res.slots:
        recs = [r for r in res.trace if r.slot == s.t]
        assert len(recs) == s.iterations
        assert [r.k for r in recs] == list(range(1, s.iterations + 1))
        assert all(r.seq == (s.t, r.k) for r in recs)


def test_stopping_test_uses_both_criteria(ref5_runs):
    res = ref5_runs["uncertainty"]
    m = builtin_scenario("ref5").market
    for s in res.slots:
        recs = [r for r in res.trace if r.slot == s.t]
        hits = [r.dtheta <= m.xi1 and r.dv <= m.xi2 for r in recs]
        assert s.converged == hits[-1]
        assert not any(hits[:-1])


def test_iteration_cap_reports_nonconvergence():
    res = run_horizon(builtin_scenario("ref5"), max_iters=3)
    assert not res.converged
    assert all(s.iterations == 3 for s in res.slots if not s.converged)


def test_committed_decisions_never_change():
    seen = []

    def hook(mk, out):
        snap = {}
        for a in mk.aggs:
            for c in a.state.all_cohorts():
                snap[(a.bus, c.key)] = c.committed[:out.t - 1].copy()
        seen.append(snap)

    res = run_horizon(builtin_scenario("ref5"), on_slot=hook)
    latest = {}
    for snap in seen:
        for key, past in snap.items():
            prev = latest.get(key, past[:0])
            assert np.array_equal(past[:len(prev)], prev)
            latest[key] = past
    assert res.converged and len(seen) == len(res.slots)


def test_mailbox_barrier():
    box = Mailbox(2)
    box.post(1, 1, 10, "a")
    with pytest.raises(RuntimeError, match="twice"):
        box.post(1, 1, 10, "again")
    with pytest.raises(RuntimeError, match="1 of 2"):
        box.collect(1, 1)
    box.post(1, 2, 10, "a")
    box.post(1, 2, 11, "b")
    with pytest.raises(RuntimeError, match="before"):
        box.broadcast(1, 1, None)
    box.collect(1, 2)
    box.broadcast(1, 2, "bundle")
    assert box.read(1, 2) == "bundle"
    with pytest.raises(RuntimeError, match="expected"):
        box.read(1, 3)


def test_par():
    assert par([1.0, 1.0, 1.0]) == 1.0
    assert par([0.0, 2.0]) == 2.0
    assert math.isnan(par([0.0, 0.0]))


def test_saddle_progress_over_windows(ref5_runs):
    """Best balance residual per 50-iteration window does not grow."""
    res = ref5_runs["uncertainty"]
    for s in res.slots:
        r = [float(rec.residual.max()) for rec in res.trace if rec.slot == s.t]
        wins = [min(r[i:i + 50]) for i in range(0, len(r) - 49, 50)]
        assert all(b <= a * (1 + 1e-9) for a, b in zip(wins, wins[1:]))


RESIDUAL_BOUND_GAP = pytest.mark.xfail(
    strict=True, reason="the angle/magnitude stop test cannot see a system-wide imbalance that only the "
                        "prices remove; at tight tolerances the residual left exceeds 5*xi*|Lambda|")


@pytest.mark.parametrize("name", [
    pytest.param("ref5", marks=RESIDUAL_BOUND_GAP), pytest.param("toy2", marks=RESIDUAL_BOUND_GAP),
    "feeder13", "feeder37"])
def test_converged_residual_bound(name):
    scen = builtin_scenario(name)
    res = run_horizon(scen, trace=False)
    bound = 5 * max(scen.market.xi1, scen.market.xi2) * assemble_lambda(scen.network).norm_inf
    assert res.converged
    assert all(s.residual <= bound for s in res.slots)
