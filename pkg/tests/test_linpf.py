import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import two_bus_doc
from gridtrade.grid import Branch, builtin_scenario, scenario_from_dict
from gridtrade.linpf import (FlowState, SingularNetworkError, assemble_lambda, branch_flow, branch_flow_values,
                             polygon_violations, reduced_inverse, solve_flow, worst_case_voltage)


def _two_bus(r=0.0, x=0.1, **kw):
    return scenario_from_dict(two_bus_doc(r=r, x=x, **kw)).network


def test_two_bus_lambda_by_hand():
    blocks = assemble_lambda(_two_bus())
    # y = 1/(j 0.1) = -10j, so Y = [[-10j, 10j], [10j, -10j]]
    B = np.array([[-10.0, 10.0], [10.0, -10.0]])
    assert np.allclose(blocks.B, B, rtol=0, atol=1e-12)
    assert np.array_equal(blocks.G, np.zeros((2, 2)))
    expected = np.array([[10.0, -10.0, 0.0, 0.0],
                         [-10.0, 10.0, 0.0, 0.0],
                         [0.0, 0.0, 10.0, -10.0],
                         [0.0, 0.0, -10.0, 10.0]])
    assert np.allclose(blocks.Lam, expected, rtol=0, atol=1e-12)


def test_shunt_changes_only_unprimed_diagonal():
    doc = two_bus_doc(r=0.01)
    doc["network"]["buses"][1]["b_shunt"] = 0.3
    doc["network"]["buses"][1]["g_shunt"] = 0.05
    blocks = assemble_lambda(scenario_from_dict(doc).network)
    assert blocks.B[1, 1] - blocks.Bp[1, 1] == pytest.approx(0.3, abs=1e-15)
    assert blocks.G[1, 1] - blocks.Gp[1, 1] == pytest.approx(0.05, abs=1e-15)
    off = ~np.eye(2, dtype=bool)
    assert np.array_equal(blocks.B[off], blocks.Bp[off])


def test_no_shunts_primed_equal():
    blocks = assemble_lambda(builtin_scenario("ref5").network)
    assert np.array_equal(blocks.B, blocks.Bp) and np.array_equal(blocks.G, blocks.Gp)


def test_reduced_inverse_two_bus_by_hand():
    blocks = assemble_lambda(_two_bus())
    S = reduced_inverse(blocks)
    # remaining rows (p2, q2) and columns (theta2, v2) form diag(10, 10)
    assert S[1, 1] == pytest.approx(0.1)
    assert S[3, 3] == pytest.approx(0.1)
    assert S[1, 3] == 0.0 and S[3, 1] == 0.0
    assert not S[[0, 2]].any() and not S[:, [0, 2]].any()


def test_full_lambda_is_singular():
    with pytest.raises(SingularNetworkError, match="dependent rows"):
        reduced_inverse(assemble_lambda(_two_bus(r=0.01)), slack=None)


def test_voltage_sensitivity_positive_matches_finite_difference():
    blocks = assemble_lambda(_two_bus(r=0.01))
    S = reduced_inverse(blocks)
    dv_dp = S[2 + 1, 1]
    assert dv_dp > 0.0
    h = 1e-6
    v_plus = solve_flow(blocks, [0.0, h], [0.0, 0.0]).v[1, 0]
    v_minus = solve_flow(blocks, [0.0, -h], [0.0, 0.0]).v[1, 0]
    assert (v_plus - v_minus) / (2 * h) == pytest.approx(dv_dp, rel=1e-6)


def test_zero_injection_is_flat():
    blocks = assemble_lambda(builtin_scenario("ref5").network)
    st_ = solve_flow(blocks, np.zeros(blocks.n), np.zeros(blocks.n))
    assert np.abs(st_.theta).max() < 1e-12 and np.abs(st_.v - 1.0).max() < 1e-12


def test_two_bus_load_by_hand():
    blocks = assemble_lambda(_two_bus())
    st_ = solve_flow(blocks, [0.0, -0.1], [0.0, 0.0])
    # p2 = 10 (theta2 - theta1) = -0.1 and q2 = 10 (v2 - v1) = 0
    assert st_.theta[1, 0] == pytest.approx(-0.01, abs=1e-15)
    assert st_.v[1, 0] == pytest.approx(1.0, abs=1e-15)


_ref_blocks = assemble_lambda(builtin_scenario("ref5").network)
_vec = arrays(np.float64, 5, elements=st.floats(-5, 5))


@given(_vec, _vec, _vec, _vec)
def test_superposition(p1, q1, p2, q2):
    b = _ref_blocks
    a, c, s = solve_flow(b, p1, q1), solve_flow(b, p2, q2), solve_flow(b, p1 + p2, q1 + q2)
    flat = solve_flow(b, np.zeros(5), np.zeros(5))
    assert np.allclose(s.theta, a.theta + c.theta - flat.theta, atol=1e-9)
    assert np.allclose(s.v, a.v + c.v - flat.v, atol=1e-9)


@given(arrays(np.float64, 5, elements=st.floats(-0.2, 0.2)), arrays(np.float64, 5, elements=st.floats(0.9, 1.1)))
def test_solve_is_left_inverse_of_injections(theta, v):
    b = _ref_blocks
    theta = theta.copy(); v = v.copy()
    theta[b.slack_pos] = 0.0
    v[b.slack_pos] = 1.0
    p, q = b.injections(FlowState(theta[:, None], v[:, None]))
    back = solve_flow(b, p, q)
    assert np.allclose(back.theta[:, 0], theta, atol=1e-9)
    assert np.allclose(back.v[:, 0], v, atol=1e-9)


def test_branch_flow_examples():
    assert branch_flow_values(0.1, 0.1, 1.0, 1.0, 0.0, 0.1) == (0.0, 0.0)
    p, q = branch_flow_values(0.01, 0.0, 1.0, 1.0, 0.0, 0.1)
    assert p == pytest.approx(0.1) and q == pytest.approx(0.0)
    p2, q2 = branch_flow_values(0.0, 0.01, 1.0, 1.0, 0.0, 0.1)
    assert p2 == pytest.approx(-p) and q2 == pytest.approx(-q)


def test_branch_flow_on_state():
    blocks = assemble_lambda(_two_bus())
    state = solve_flow(blocks, [0.0, -0.1], [0.0, 0.0])
    br = blocks.network.branches[0]
    p, q = branch_flow(blocks, state, br)
    assert p == pytest.approx(0.1) and q == pytest.approx(0.0, abs=1e-12)


def test_polygon_examples():
    br = Branch(1, 2, 0.0, 0.1, 2.0, alpha=math.pi / 2)
    assert polygon_violations(0.0, 0.0, br) == []
    assert polygon_violations(2.0, 0.0, br) == []
    br6 = Branch(1, 2, 0.0, 0.1, 2.0, alpha=math.pi / 6)
    r = 2.0 * 1.05
    assert polygon_violations(r * math.cos(math.pi / 12), r * math.sin(math.pi / 12), br6)


@given(st.floats(0, 2 * math.pi), st.floats(0.0, 1.0), st.sampled_from([4, 6, 8, 12]))
def test_polygon_is_inscribed_in_circle(angle, frac, sides):
    """Points inside the inradius always pass; points beyond s_max always fail."""
    alpha = 2 * math.pi / sides
    br = Branch(1, 2, 0.0, 0.1, 1.0, alpha=alpha)
    inner = frac * math.cos(alpha / 2)
    assert polygon_violations(inner * math.cos(angle), inner * math.sin(angle), br) == []
    outer = 1.0 / math.cos(alpha / 2) * (1.0 + 1e-6)
    assert polygon_violations(outer * math.cos(angle), outer * math.sin(angle), br) or \
        polygon_violations(outer * math.cos(angle), outer * math.sin(angle), br, tol=0.0)


def test_worst_case_voltage_examples():
    blocks = assemble_lambda(_two_bus(r=0.01))
    p, q = np.array([0.0, 0.1]), np.zeros(2)
    v = solve_flow(blocks, p, q).v
    # nothing scheduled above the lower bound: unchanged
    assert np.array_equal(worst_case_voltage(blocks, p, q, np.zeros(2), np.zeros(2)), v)
    assert np.array_equal(worst_case_voltage(blocks, p, q, [0.0, 0.05], [0.0, 0.05]), v)
    v_hat = worst_case_voltage(blocks, p, q, [0.0, 0.1], [0.0, 0.0])
    assert v_hat[1, 0] < v[1, 0]
