import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lplab.backgrounds import Cigar, Flat, FlowParams, Sphere
from lplab.bvp import great_circle_datum, great_circle_oracle
from lplab.geodesics import (conjugate_times_dense, exp_jacobian, jacobi_residual, jacobian_limit,
                             lp_exp, richardson, s_of_tau, shoot, shoot_batch, tau_of_s,
                             variational_columns)

P = lambda p: FlowParams(p, math.inf)
vec2 = st.lists(st.floats(-2, 2), min_size=2, max_size=2).map(np.array)


def test_flat_endpoints():
    assert np.allclose(lp_exp(Flat(2), P(0.5), [1, 0], 1.0), [2, 0], atol=1e-9)
    assert np.allclose(lp_exp(Flat(2), P(0.75), [1, 0], 1.0), [4, 0], atol=1e-9)
    assert np.allclose(lp_exp(Flat(2), P(0.5), [0, 3], 4.0), [0, 12], atol=1e-8)
    base = FlowParams(0.5, math.inf, (1.0, -2.0))
    assert np.allclose(lp_exp(Flat(2), base, [0, 0], 3.0), [1, -2], atol=1e-14)


@given(vec2, st.floats(0.3, 0.9), st.floats(0.05, 3))
def test_flat_closed_form(v, p, tau):
    x = lp_exp(Flat(2), P(p), v, tau)
    assert np.allclose(x, v * tau ** (1 - p) / (1 - p), rtol=1e-8, atol=1e-10)


@given(st.floats(0.05, 5), st.floats(0.1, 0.9))
def test_s_tau_inverse(t, p):
    assert tau_of_s(s_of_tau(t, p), p) == pytest.approx(t, rel=1e-13)


def test_sphere_polar_angle_oracle():
    bg = Sphere(2, 1.0)
    for p, theta, tau in ((0.5, 1.2, 1.0), (0.75, 2.5, 0.6), (0.6, 0.4, 2.0)):
        d = np.array([0.6, -0.8])
        v = great_circle_datum(bg, p, theta, d, tau)
        x = lp_exp(bg, P(p), v, tau, tol=1e-11)
        assert float(Sphere.polar_angle(x)) == pytest.approx(theta, rel=1e-6)
        assert np.allclose(x / np.linalg.norm(x), d, atol=1e-8)


def test_sphere_action_matches_oracle():
    bg = Sphere(2, 1.0)
    p, theta, tau = 0.5, 1.0, 1.0
    v = great_circle_datum(bg, p, theta, [1, 0], tau)
    c = shoot(bg, P(p), v, tau, tol=1e-11)
    L = c.final_state[c.system.CURV] + c.final_state[c.system.KIN]
    assert L == pytest.approx(float(great_circle_oracle(bg, p, theta, tau)["L_p"]), rel=1e-8)


def test_sphere_chart_switch_passes_antipode_region():
    bg = Sphere(2, 1.0)
    v = great_circle_datum(bg, 0.5, 2.9, [1, 0], 1.0)
    c = shoot(bg, P(0.5), v, 1.0, tol=1e-11)
    assert c.final_chart == 1
    assert float(Sphere.polar_angle(c.endpoint())) == pytest.approx(2.9, rel=1e-7)


def test_flat_jacobian():
    for mode in ("variational", "fd_bundle"):
        rec = exp_jacobian(Flat(2), P(0.5), [0.3, -0.2], 1.0, mode=mode)
        assert np.allclose(rec.matrix, 2 * np.eye(2), atol=1e-7)
        assert rec.jp == pytest.approx(4.0, rel=1e-7)
        assert rec.conjugate_times == []


@given(vec2, st.floats(0.05, 4))
def test_flat_normalized_jacobian_constant(v, tau):
    rec = exp_jacobian(Flat(2), P(0.5), v, tau, mode="variational")
    assert tau ** -1.0 * rec.jp == pytest.approx(4.0, rel=1e-9)
    assert rec.conjugate_times == []


def test_jacobian_modes_agree_on_sphere():
    bg = Sphere(2, 1.0)
    a = exp_jacobian(bg, P(0.5), [0.2, 0.1], 0.8, mode="variational", tol=1e-11)
    b = exp_jacobian(bg, P(0.5), [0.2, 0.1], 0.8, mode="fd_bundle", tol=1e-11)
    assert np.allclose(a.matrix, b.matrix, rtol=1e-5, atol=1e-7)
    assert a.jp == pytest.approx(b.jp, rel=1e-5)


def test_sphere_conjugate_point():
    # every geodesic from the pole refocuses at the antipode: theta = pi
    bg = Sphere(2, 1.0)
    tau = 1.0
    v = great_circle_datum(bg, 0.5, 1.2 * math.pi, [1, 0], tau)
    c = shoot(bg, P(0.5), v, tau, tol=1e-11, variational=True)
    conj = conjugate_times_dense(c)
    assert conj
    # swept angle theta(t) = |v|_chart * 2 c(0) * I(t)
    I = float(great_circle_oracle(bg, 0.5, 0.0, conj[0])["I"])
    assert float(np.linalg.norm(v)) * 2 * float(bg.c(0.0)) * I == pytest.approx(math.pi, rel=1e-6)


def test_jacobian_limit_sphere():
    res = jacobian_limit(Sphere(2, 1.0), P(0.5), [[0.3, 0.1], [-0.5, 0.2]])
    assert np.all(res["error"] < 1e-4)
    assert res["target"] == 4.0


def test_jacobi_residual_flat_linear_field():
    c = shoot(Flat(2), P(0.5), [0.4, 0.1], 1.0, variational=True)
    w = np.array([0.3, -0.7])
    s = c.s_nodes
    Y = np.stack([np.outer(s, w), np.tile(w, (len(s), 1)), np.zeros((len(s), 2))], axis=1)
    assert jacobi_residual(c, Y) == 0.0
    assert jacobi_residual(c, np.zeros((len(s), 3, 2))) == 0.0


def test_jacobi_residual_variational_columns():
    for bg in (Sphere(2, 1.0), Cigar()):
        c = shoot(bg, P(0.5), [0.3, 0.2], 0.7, variational=True, tol=1e-10)
        s, cols = variational_columns(c)
        for col in cols:
            assert jacobi_residual(c, col, s) < 10 * 1e-10


def test_shoot_batch_matches_shoot():
    bg = Cigar()
    V = np.array([[0.2, 0.1], [-0.4, 0.3]])
    br = shoot_batch(bg, P(0.75), V, [0.5, 1.0], tol=1e-11)
    for b in range(2):
        x = lp_exp(bg, P(0.75), V[b], 1.0, tol=1e-11)
        assert np.allclose(br.base_x(bg, 1)[b], x, atol=1e-8)


def test_richardson_removes_powers():
    h = 0.1 / 2.0 ** np.arange(4)
    vals = 3.0 + 2 * h - 5 * h ** 2 + 0.5 * h ** 3
    est, _ = richardson(vals, h, (1, 2, 3))
    assert est == pytest.approx(3.0, abs=1e-13)
