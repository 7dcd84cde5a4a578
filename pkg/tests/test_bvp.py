import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lplab.backgrounds import Cigar, Flat, FlowParams, Sphere
from lplab.bvp import (g_p_scan, grad_L_check, great_circle_oracle, laplacian_L_check, lp_values,
                       min_lp_bound_check, small_time_limit, solve_lp, speed_bound_check,
                       gradient_bound_check)
from lplab.errors import DomainError

P = lambda p: FlowParams(p, math.inf)


def test_oracle_closed_form_p_half():
    # n=2, a=1, p=1/2: I = arctan(sqrt tau), int rho^{1/2} R = 2 sqrt tau - 2 arctan sqrt tau
    bg = Sphere(2, 1.0)
    for tau in (0.3, 1.0, 2.5):
        o = great_circle_oracle(bg, 0.5, 1.1, tau)
        r = math.sqrt(tau)
        assert o["I"] == pytest.approx(math.atan(r), rel=1e-12)
        assert o["curvature_part"] == pytest.approx(2 * r - 2 * math.atan(r), rel=1e-12)
        assert o["L_p"] == pytest.approx(2 * r - 2 * math.atan(r) + 1.21 / math.atan(r), rel=1e-12)


def test_flat_solution():
    sol = solve_lp(Flat(2), P(0.5), [2.0, 0.0], 1.0)
    assert np.allclose(sol.v_star, [1, 0], atol=1e-8)
    assert sol.value.L_p == pytest.approx(2.0, rel=1e-9)
    assert sol.value.l_p == pytest.approx(1.0, rel=1e-9)
    assert sol.in_omega and sol.basin_count == 1


def test_base_point_target():
    assert solve_lp(Flat(2), P(0.6), [0.0, 0.0], 0.7).value.L_p == pytest.approx(0.0, abs=1e-14)
    bg = Sphere(2, 1.0)
    sol = solve_lp(bg, P(0.5), [0.0, 0.0], 1.0)
    assert np.linalg.norm(sol.v_star) < 1e-7
    assert sol.value.L_p == pytest.approx(great_circle_oracle(bg, 0.5, 0.0, 1.0)["curvature_part"], rel=1e-8)


def test_sphere_quarter_circle():
    bg = Sphere(2, 1.0)
    q = Sphere.point_at_angle(math.pi / 2, [1.0, 1.0])
    sol = solve_lp(bg, P(0.5), q, 1.0)
    ref = float(great_circle_oracle(bg, 0.5, math.pi / 2, 1.0)["L_p"])
    assert sol.value.L_p == pytest.approx(ref, rel=1e-6)


def test_near_antipode_target():
    bg = Sphere(2, 1.0)
    sol = solve_lp(bg, P(0.5), Sphere.point_at_angle(math.pi - 1e-4, [1, 0]), 1.0)
    # the short arc still minimizes; the reverse arc is a distinct, costlier basin
    ref = float(great_circle_oracle(bg, 0.5, math.pi - 1e-4, 1.0)["L_p"])
    assert sol.value.L_p == pytest.approx(ref, rel=1e-6)
    assert sol.in_omega and sol.basin_count >= 2


@settings(max_examples=10)
@given(st.floats(0.3, 0.9), st.floats(0.2, 3), st.floats(-2, 2), st.floats(-2, 2))
def test_flat_reduced_distance(p, tau, a, b):
    sol = solve_lp(Flat(2), P(p), [a, b], tau, starts=4)
    assert sol.value.l_p == pytest.approx((1 - p) ** 2 * (a * a + b * b) / tau ** (2 * (1 - p)),
                                          rel=1e-8, abs=1e-9)


def test_gradient_checks():
    g = grad_L_check(solve_lp(Flat(2), P(0.5), [2.0, 0.0], 1.0))
    assert np.allclose(g["analytic"], [2, 0], atol=1e-8)
    assert g["abs_error"] < 1e-4
    g0 = grad_L_check(solve_lp(Sphere(2, 1.0), P(0.5), [0.0, 0.0], 1.0))
    assert np.linalg.norm(g0["analytic"]) < 1e-7
    rng = np.random.default_rng(2)
    for _ in range(3):
        sol = solve_lp(Sphere(2, 1.0), P(0.6), rng.uniform(-0.8, 0.8, 2), 0.9)
        assert grad_L_check(sol)["rel_error"] < 1e-3


def test_laplacian_checks():
    lap = laplacian_L_check(solve_lp(Flat(2), P(0.5), [0.7, -0.4], 1.0))
    assert lap["lhs"] == pytest.approx(2.0, abs=1e-4) and lap["rhs"] == pytest.approx(2.0, abs=1e-4)
    assert laplacian_L_check(solve_lp(Flat(3), P(0.6), [0, 0, 0], 0.8))["slack"] >= -1e-6
    rng = np.random.default_rng(4)
    for _ in range(3):
        sol = solve_lp(Sphere(2, 1.0), P(0.5), rng.uniform(-0.8, 0.8, 2), 0.8)
        assert laplacian_L_check(sol)["slack"] >= -1e-6


def test_pointwise_bounds():
    sol = solve_lp(Sphere(2, 1.0), P(0.75), [0.4, -0.3], 0.7)
    assert speed_bound_check(sol)["min_slack"] > 0
    assert gradient_bound_check(sol)["slack"] > 0


def test_derived_fields_need_omega():
    sol = solve_lp(Flat(2), P(0.5), [1.0, 0.0], 1.0)
    sol.in_omega = False
    with pytest.raises(DomainError):
        grad_L_check(sol)


def test_g_p_flat_closed_form():
    ax = np.linspace(-0.5, 0.5, 5)
    Q = np.array(np.meshgrid(ax, ax)).reshape(2, -1).T
    for p in (0.5, 0.7):
        res = g_p_scan(Flat(2), P(p), [0.1, 0.5, 1.0, 2.0], Q)
        for row in res["rows"]:
            assert row["G_p"] == pytest.approx(-(2 / (2 * p)) * row["tau"], abs=1e-6)
        assert res["decreasing"]


def test_g_p_sphere_decreasing_and_small_time():
    ax = np.linspace(-0.3, 0.3, 7)
    Q = np.array(np.meshgrid(ax, ax)).reshape(2, -1).T
    res = g_p_scan(Sphere(2, 1.0), P(0.5), np.geomspace(0.1, 2, 10), Q)
    assert res["decreasing"]
    assert abs(g_p_scan(Sphere(2, 1.0), P(0.5), [1e-4], Q)["rows"][0]["G_p"]) < 1e-3


def test_min_lp_bound():
    ax = np.linspace(-0.3, 0.3, 7)
    Q = np.array(np.meshgrid(ax, ax)).reshape(2, -1).T
    r = min_lp_bound_check(Sphere(2, 1.0), P(0.5), 1.0, Q)
    assert r["bound"] == pytest.approx(1.0) and r["ok"]
    r = min_lp_bound_check(Sphere(2, 1.0), P(0.75), 0.5, Q)
    assert r["bound"] == pytest.approx(2 * 0.25 / 1.5 * 0.5 ** 0.5) and r["ok"]
    assert min_lp_bound_check(Flat(2), P(0.5), 1.0, Q)["min_l"] == pytest.approx(0.0, abs=1e-14)


def test_lp_values_match_solver():
    bg = Cigar()
    Q = np.array([[0.1, 0.05], [-0.2, 0.1]])
    L = lp_values(bg, P(0.6), Q, 0.5, tol=1e-11)
    for q, Lq in zip(Q, L):
        assert Lq == pytest.approx(solve_lp(bg, P(0.6), q, 0.5, starts=8, tol=1e-11).value.L_p, rel=1e-8)


def g0_frame(bg, params):
    """Columns of a g(p0, 0)-orthonormal frame."""
    x0 = params.base_point(bg)
    g0 = bg.fields("metric", x0[None], np.array([0.0]))["g"][0]
    return np.linalg.inv(np.linalg.cholesky(g0)).T


def test_small_time_limit():
    rng = np.random.default_rng(5)
    for bg in (Flat(2), Sphere(2, 1.0), Cigar()):
        E = g0_frame(bg, P(0.5))
        res = small_time_limit(bg, P(0.5), rng.normal(size=(5, 2)) @ E.T)
        assert np.all(res["error"] < 1e-3)


def test_small_time_error_is_first_order():
    bg, pr = Sphere(2, 1.0), P(0.75)
    v = np.array([[0.3, -0.2]])
    e = [float(small_time_limit(bg, pr, v, tau=t)["error"][0]) for t in (1e-3, 1e-4)]
    assert e[0] / e[1] == pytest.approx(10.0, rel=0.05)
