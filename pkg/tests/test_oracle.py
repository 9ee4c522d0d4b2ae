import numpy as np
import pytest

from conftest import ev_appliance, two_bus_doc
from gridtrade.grid import builtin_scenario, scenario_from_dict
from gridtrade.market import Market
from gridtrade.oracle import (GridTooLarge, InfeasibleProblem, brute_force, compare_market, kkt_check,
                              run_central, solve_central)


def _problem(scen, t=1):
    mk = Market(scen)
    try:
        mk.begin_slot(t)
        return mk.problem(t)
    finally:
        mk.close()


def _gen(a2=0.5, a1=0.2, a0=0.0, **kw):
    g = {"bus": 1, "cost": [a2, a1, a0], "p_min": 0.0, "p_max": 5.0, "q_min": -2.0, "q_max": 2.0}
    g.update(kw)
    return g


def test_forced_load_dispatch_at_marginal_cost():
    app = ev_appliance(horizon=1, e_min=0.6, e_max=0.6, E_min=0.6, E_max=0.6, e_nom=0.6, E_nom=0.6)
    pb = _problem(scenario_from_dict(two_bus_doc(generators=[_gen()], appliances=[app])))
    sol = solve_central(pb)
    assert sol.p_conv[0][0] == pytest.approx(0.6, abs=1e-6)
    gpos = pb.gen_pos[0]
    assert sol.lam[gpos, 0] == pytest.approx(2 * 0.5 * 0.6 + 0.2, abs=1e-5)
    assert kkt_check(pb, sol).worst <= 1e-6


def test_zero_load_zero_dispatch():
    pb = _problem(scenario_from_dict(two_bus_doc(horizon=2, generators=[_gen(a0=0.3)])))
    sol = solve_central(pb)
    assert np.abs(sol.p_conv[0]).max() <= 1e-9
    assert np.abs(sol.theta).max() <= 1e-9 and np.abs(sol.v - 1.0).max() <= 1e-9
    assert sol.objective == pytest.approx(-2 * 0.3, abs=1e-9)


def test_brute_force_singleton():
    app = ev_appliance(horizon=1, e_min=0.4, e_max=0.4, E_min=0.4, E_max=0.4, e_nom=0.4, E_nom=0.4)
    gen = _gen(q_min=0.0, q_max=0.0)
    pb = _problem(scenario_from_dict(two_bus_doc(generators=[gen], appliances=[app])))
    bf = brute_force(pb)
    assert bf.E[0].ravel()[0] == pytest.approx(0.4, abs=1e-12)
    assert bf.p_conv[0][0] == pytest.approx(0.4, abs=1e-12)
    assert bf.objective == pytest.approx(solve_central(pb).objective, abs=1e-6)


@pytest.mark.parametrize("kernel", ["log1p", "sqrt_shift"])
@pytest.mark.parametrize("kappa", [0.5, 2.0])
def test_brute_force_agrees_on_two_bus_single_slot(kernel, kappa):
    app = ev_appliance(horizon=1, kernel=kernel, kappa=kappa, E_min=0.0, E_max=1.0)
    pb = _problem(scenario_from_dict(two_bus_doc(r=0.02, generators=[_gen()], appliances=[app])))
    bf = brute_force(pb, resolution=1e-3)
    sol = solve_central(pb)
    assert sol.objective >= bf.objective - 1e-7
    assert sol.objective - bf.objective <= 2 * bf.grid_tolerance


def test_brute_force_agrees_on_toy():
    pb = _problem(builtin_scenario("toy2"))
    bf = brute_force(pb, resolution=1e-3)
    sol = solve_central(pb)
    assert abs(sol.objective - bf.objective) <= bf.grid_tolerance


def test_unreachable_voltage_box_is_infeasible():
    app = ev_appliance(horizon=1, e_min=0.2, e_max=0.5, E_min=0.2, E_max=0.5)
    doc = two_bus_doc(r=0.05, generators=[_gen()], appliances=[app])
    doc["network"]["buses"][1].update(v_min=1.1, v_max=1.2)
    pb = _problem(scenario_from_dict(doc))
    with pytest.raises(InfeasibleProblem):
        solve_central(pb)
    with pytest.raises(InfeasibleProblem):
        brute_force(pb, resolution=1e-2)


def test_brute_force_guards():
    with pytest.raises(ValueError, match="at most"):
        brute_force(_problem(builtin_scenario("ref5")))
    with pytest.raises(GridTooLarge):
        brute_force(_problem(builtin_scenario("toy2")), resolution=1e-7)


def test_kkt_flags_exactly_the_perturbed_bus():
    scen = builtin_scenario("ref5")
    pb = _problem(scen)
    sol = solve_central(pb)
    base = kkt_check(pb, sol)
    assert base.worst <= 1e-6 * base.scale
    for pos in pb.agg_pos + pb.gen_pos:
        lam = sol.lam.copy()
        lam[pos] += 0.1
        rep = kkt_check(pb, sol, lam=lam)
        assert rep.flagged(1e-4) == [int(pb.op.blocks.ids[pos])]


def test_kkt_needs_multipliers():
    pb = _problem(builtin_scenario("toy2"))
    with pytest.raises(ValueError, match="multipliers"):
        kkt_check(pb, brute_force(pb, resolution=1e-2))


def test_uniqueness_probe():
    pb = _problem(builtin_scenario("ref5"))
    a, b = solve_central(pb, seed=1), solve_central(pb, seed=2)
    for Ea, Eb in zip(a.E, b.E):
        assert np.allclose(Ea, Eb, atol=1e-4)
    for j, g in enumerate(pb.gen_assets):
        if g.a2 > 0:
            assert np.allclose(a.p_conv[j], b.p_conv[j], atol=1e-4)
    assert a.objective == pytest.approx(b.objective, abs=1e-6 * max(1.0, abs(a.objective)))


def test_market_matches_central_on_reference():
    report, res = compare_market(builtin_scenario("ref5"))
    assert res.converged and len(report["slots"]) == builtin_scenario("ref5").market.horizon
    assert report["max_injection_deviation"] <= 1e-2
    assert report["max_objective_rel_deviation"] <= 5e-3
    assert report["max_kkt_relative"] <= 1e-2


def test_rolling_central_run():
    res = run_central(builtin_scenario("toy2"))
    assert res.mode == "central" and res.converged
    assert all(s.residual <= 1e-6 for s in res.slots)
    assert res.committed["p"].shape[1] == builtin_scenario("toy2").market.horizon
