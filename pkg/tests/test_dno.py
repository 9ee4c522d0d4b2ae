import math

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import lagrangian_fd, random_dno_case, two_bus_doc
from gridtrade.dno import (DnoState, Injections, NetworkOperator, lagrangian_value_and_gradient, network_step,
                           risk, signals, update_phi)
from gridtrade.grid import builtin_scenario, scenario_from_dict
from gridtrade.linpf import branch_flow_values, polygon_values, solve_flow


@pytest.fixture(scope="module")
def op5():
    return NetworkOperator(builtin_scenario("ref5"))


def _two_bus_op(s_max=1.0, alpha=math.pi / 3, v_bounds=(0.95, 1.05), pf=0.9):
    doc = two_bus_doc(r=0.05, x=0.1, s_max=s_max, v_bounds=v_bounds, power_factor=pf,
                      generators=[{"bus": 1, "cost": [1, 1, 0], "p_min": 0, "p_max": 5}])
    doc["network"]["branches"][0]["alpha"] = alpha
    doc["network"]["buses"][0]["kind"] = "slack"
    return NetworkOperator(scenario_from_dict(doc))


def test_flat_zero_multipliers_value_is_operator_objective(op5, rng):
    T = 4
    _, inj = random_dno_case(op5, rng, T)
    st0 = op5.flat_state(T)
    val, _, _ = lagrangian_value_and_gradient(op5, st0, inj, penalty=0.0)
    expected = inj.welfare - op5.scenario.market.vartheta * risk(op5, inj)
    assert val == pytest.approx(expected, rel=1e-14, abs=1e-12)


def test_balanced_injections_zero_multiplier_gradient(op5, rng):
    T = 4
    state, _ = random_dno_case(op5, rng, T)
    theta, v = op5.theta_v(state.x)
    p, q = op5.blocks.injections(op5.blocks.embed(state.x))
    inj = Injections(p, q, np.zeros_like(p), np.zeros_like(p))
    _, _, gmu = lagrangian_value_and_gradient(op5, state, inj, 0.02)
    assert np.abs(gmu).max() < 1e-9


def test_dimension_mismatch(op5, rng):
    state, inj = random_dno_case(op5, rng, 4)
    bad = Injections(inj.p[:, :3], inj.q[:, :3], inj.ren[:, :3], inj.ren_min[:, :3])
    with pytest.raises(ValueError, match="shape"):
        lagrangian_value_and_gradient(op5, state, bad)


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31), st.sampled_from([0.0, 0.02, 1.0]))
def test_gradient_matches_finite_differences(seed, penalty):
    op = NetworkOperator(builtin_scenario("ref5"))
    state, inj = random_dno_case(op, np.random.default_rng(seed))
    _, gx, gm = lagrangian_value_and_gradient(op, state, inj, penalty)
    fx, fm = lagrangian_fd(op, state, inj, penalty)
    g = np.concatenate([gx.ravel(), gm.ravel()])
    f = np.concatenate([fx.ravel(), fm.ravel()])
    assert np.linalg.norm(f - g) <= 1e-6 * np.linalg.norm(g)
    # per component, roundoff of the differenced value (eps |L| / h) sets a floor near 1e-8
    assert np.all(np.abs(f - g) <= 1e-6 * np.maximum(np.abs(g), 1.0))


def test_risk_equals_worst_case_gap(op5, rng):
    _, inj = random_dno_case(op5, rng)
    v = solve_flow(op5.blocks, inj.p, inj.q).v
    v_hat = solve_flow(op5.blocks, inj.p - (inj.ren - inj.ren_min), inj.q).v
    assert risk(op5, inj) == pytest.approx(float((v - v_hat).sum()), rel=1e-12)
    nominal = Injections(inj.p, inj.q, inj.ren_min, inj.ren_min)
    assert risk(op5, nominal) == pytest.approx(0.0, abs=1e-12)


def test_update_phi_zero_gradient_is_fixed_point(op5, rng):
    state, _ = random_dno_case(op5, rng, scale=0.0)
    for metric in ("euclidean", "network"):
        new = update_phi(op5, state, np.zeros_like(state.x), np.zeros_like(state.mu), 0.3, metric)
        assert np.array_equal(new.x, state.x) and np.array_equal(new.mu, state.mu)
        assert new.k == state.k + 1


def test_voltage_box_clip():
    op = _two_bus_op(s_max=1e6)
    st0 = op.flat_state(1)
    gx = np.zeros_like(st0.x)
    gx[1, 0] = 1.0  # reduced order: theta_2 then v_2
    new = update_phi(op, st0, gx, np.zeros_like(st0.mu), 0.2)
    assert new.x[1, 0] == pytest.approx(1.05, abs=1e-12)
    assert new.x[0, 0] == 0.0
    gx[1, 0] = -1.0
    assert update_phi(op, st0, gx, np.zeros_like(st0.mu), 0.2).x[1, 0] == pytest.approx(0.95, abs=1e-12)


def _oracle_projection(op, x0, metric):
    """Projection by a generic QP solver with the constraints rebuilt from branch flows."""
    br = op.scenario.network.branches[0]
    bus2 = op.scenario.network.buses[1]
    y = cp.Variable(2)
    th2, v2 = y[0], y[1]
    p, q = branch_flow_values(0.0, th2, 1.0, v2, br.r, br.x)
    cons = [v2 >= bus2.v_min, v2 <= bus2.v_max]
    for m in range(br.sides):
        cons.append(p * math.cos(m * br.alpha) + q * math.sin(m * br.alpha) <= br.s_max)
    d = y - x0
    obj = cp.sum_squares(op.A @ d) if metric == "network" else cp.sum_squares(d)
    cp.Problem(cp.Minimize(obj), cons).solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12,
                                             tol_feas=1e-12)
    return np.asarray(y.value)


@pytest.mark.parametrize("metric", ["euclidean", "network"])
@pytest.mark.parametrize("x0", [(-0.2, 1.0), (0.15, 1.02), (-0.3, 0.9), (0.0, 1.2)])
def test_projection_matches_qp_oracle(metric, x0):
    op = _two_bus_op()
    x0 = np.array(x0)
    got = op.project(x0[:, None], metric)[:, 0]
    want = _oracle_projection(op, x0, metric)
    assert np.allclose(got, want, atol=1e-6)
    br = op.scenario.network.branches[0]
    p, q = branch_flow_values(0.0, got[0], 1.0, got[1], br.r, br.x)
    assert polygon_values(p, q, br).max() <= 1e-9


def test_single_half_plane_projection_is_tight():
    op = _two_bus_op()
    br = op.scenario.network.branches[0]
    x0 = np.array([[-0.12], [0.97]])
    vals0 = op.polytope.values(x0)[:, 0]
    assert (vals0 > 0).sum() == 1
    out = op.project(x0, "euclidean")
    vals = op.polytope.values(out)[:, 0]
    assert vals[np.argmax(vals0)] == pytest.approx(0.0, abs=1e-9)
    assert br.sides == 6


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31))
def test_ldp_and_hildreth_agree(seed):
    op = NetworkOperator(builtin_scenario("ref5"))
    rng = np.random.default_rng(seed)
    x0 = op.flat_state(3).x + rng.normal(0.0, 0.15, (op.m, 3))
    a = op.project(x0, "network", method="ldp")
    b = op.project(x0, "network", method="hildreth", tol=1e-13)
    cost = lambda y: np.linalg.norm(op.A @ (y - x0), axis=0)
    assert np.all(op.polytope.values(a) <= 1e-8)
    assert np.allclose(cost(a), cost(b), rtol=1e-6, atol=1e-7)
    assert np.allclose(a, b, atol=1e-5)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31), st.sampled_from(["network", "euclidean"]))
def test_projection_idempotent(seed, metric):
    op = NetworkOperator(builtin_scenario("ref5"))
    x0 = op.flat_state(2).x + np.random.default_rng(seed).normal(0.0, 0.15, (op.m, 2))
    once = op.project(x0, metric)
    assert np.allclose(op.project(once, metric), once, atol=1e-10)


def test_signal_identities(op5, rng):
    state, _ = random_dno_case(op5, rng)
    sig = signals(op5, state)
    lam, gam = op5.split_mu(state.mu)
    for agg in op5.scenario.aggregators:
        i = op5.blocks.pos[agg.bus]
        pf = agg.power_factor
        assert np.all(np.abs(sig.rho[i] - (lam[i] + gam[i] * math.sqrt((1 - pf * pf) / (pf * pf)))) <= 1e-12)
    for j in op5.gen_pos:
        assert np.array_equal(sig.rho[j], lam[j]) and np.array_equal(sig.varrho[j], gam[j])
    assert np.all(gam[op5.blocks.slack_pos] == 0.0)


def test_unit_power_factor_price_is_lambda():
    op = _two_bus_op(pf=1.0)
    state = DnoState(op.flat_state(1).x, np.array([[1.5], [2.5], [-0.7]]))
    sig = signals(op, state)
    # mu stacks lambda of buses 1 and 2, then gamma of bus 2
    assert sig.rho[1, 0] == 2.5 and sig.gam[1, 0] == -0.7


def test_zero_gamma_zero_reactive_price(op5):
    state = DnoState(op5.flat_state(2).x, np.zeros((op5.nr, 2)))
    state.mu[:op5.n] = 3.0
    assert not signals(op5, state).varrho.any()


def test_beta_linear_in_vartheta():
    scen = builtin_scenario("ref5")
    b1 = NetworkOperator(scen).beta()
    b2 = NetworkOperator(scen.with_market(vartheta=2 * scen.market.vartheta)).beta()
    assert np.allclose(b2, 2 * b1, rtol=1e-15, atol=0)
    assert np.count_nonzero(b1) == sum(g.renewable is not None for g in scen.generators)


def test_beta_is_column_sum_of_voltage_sensitivity(op5):
    S = op5.blocks.sensitivity
    for j in op5.ren_pos:
        assert op5.beta_unit[j] == pytest.approx(S[op5.n:, j].sum(), rel=1e-14)


def test_network_step_exact_option_leaves_only_unabsorbable_residual(op5, rng):
    state, inj = random_dno_case(op5, rng, scale=0.0)
    state.mu[:] = 0.0
    inj.p *= 0.01
    inj.q *= 0.01
    r0 = op5.residual(state.x, inj)
    new, r_exact = network_step(op5, state, inj, 0.5, 0.02, 0.5, exact=True)
    if np.all(op5.polytope.values(op5.pinv @ r0 + state.x) <= 0):
        outside = r0 - op5.A @ (op5.pinv @ r0)
        assert np.allclose(r_exact, outside, atol=1e-9)
    assert np.linalg.norm(r_exact) <= np.linalg.norm(r0) + 1e-12
    assert np.allclose(new.mu, -0.5 * 0.5 * 0.02 * r_exact)
    plain, r_plain = network_step(op5, state, inj, 0.5, 0.02, 0.5)
    assert np.array_equal(r_plain, r0)
