import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lplab.backgrounds import Cigar, Flat, FlowParams, Sphere
from lplab.errors import DomainError, RangeError, UnsupportedError
from lplab.volume import (Quadrature, a0_constant, gaussian_mass, monotonicity_scan,
                          reduced_volume_direct, reduced_volume_pushforward, rescaled_constants,
                          rescaled_monotonicity_scan, rescaled_volume, rho_cap, symmetric_pole,
                          tau0, tau_bar1, volume_limit, w_exponent, zp_monotone_check)

P = lambda p: FlowParams(p, math.inf)
SMALL = Quadrature(order=12, angular=4)


def test_constants():
    assert a0_constant(0.5, None, 4.0) == 0.0
    assert a0_constant(0.75, 0.5, 3.0) == pytest.approx(3.0)
    assert tau0(0.75, 10.0) == pytest.approx(4.0)
    assert tau0(0.75, 2.0) == 2.0
    assert tau_bar1(0.75, 0.5, math.inf) == pytest.approx(2.0)
    assert tau_bar1(0.5, None, 3.0) == 3.0
    with pytest.raises(RangeError):
        tau_bar1(0.75, 1.0, math.inf)
    with pytest.raises(RangeError):
        tau_bar1(0.4, 0.5, math.inf)


def test_gaussian_mass():
    assert gaussian_mass(2, 0.5) == pytest.approx(4 * math.pi)
    assert gaussian_mass(3, 0.75) == pytest.approx((math.sqrt(math.pi) / 0.25) ** 3)


@given(st.integers(1, 3), st.integers(2, 20), st.floats(0.5, 9.0), st.data())
def test_radial_rule_polynomial_exactness(n, order, R, data):
    k = data.draw(st.integers(0, 2 * order - n))
    r, w = Quadrature(order=order).radial(R, n)
    exact = R ** (n + k) / (n + k)
    assert math.fsum(w * r ** k) == pytest.approx(exact, rel=1e-11)


@given(st.integers(1, 3), st.integers(2, 10))
def test_direction_weights_sum_to_sphere_area(n, m):
    d, w = Quadrature(angular=m).directions(n)
    area = 2 * math.pi ** (n / 2) / math.gamma(n / 2)
    assert math.fsum(w) == pytest.approx(area, rel=1e-12)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_flat_pushforward_exact(n):
    for p in (0.5, 0.7):
        r = reduced_volume_pushforward(Flat(n), P(p), 0.8)
        assert r.value == pytest.approx(gaussian_mass(n, p), rel=1e-10)
        assert r.excluded == 0 and r.envelope_ok


def test_sphere_methods_agree():
    bg = Sphere(2, 1.0)
    for p, tau in ((0.5, 0.5), (0.75, 1.0)):
        a = reduced_volume_pushforward(bg, P(p), tau)
        b = reduced_volume_direct(bg, P(p), tau)
        assert a.value == pytest.approx(b, rel=1e-4)
        assert a.truncation == "compact" and a.r_star_min < math.inf


def test_direct_needs_sphere():
    with pytest.raises(UnsupportedError):
        reduced_volume_direct(Cigar(), P(0.5), 1.0)


def test_pushforward_deterministic_across_threads():
    bg = Sphere(2, 1.0)
    a = reduced_volume_pushforward(bg, P(0.5), 0.7, SMALL, threads=1, chunk=16)
    b = reduced_volume_pushforward(bg, P(0.5), 0.7, SMALL, threads=4, chunk=16)
    assert a.value == b.value


def test_full_minimality_matches_conjugate_rule():
    bg = Sphere(2, 1.0)
    q = Quadrature(order=4, angular=2)
    a = reduced_volume_pushforward(bg, P(0.5), 0.4, q)
    b = reduced_volume_pushforward(bg, P(0.5), 0.4, q, minimality="full")
    assert b.value == pytest.approx(a.value, rel=1e-12)
    assert b.excluded == a.excluded


def test_volume_small_time_limits():
    for bg, p in ((Sphere(2, 1.0), 0.5), (Sphere(3, 1.0), 0.75), (Flat(2), 0.6)):
        est = volume_limit(bg, P(p))["limit"]
        assert est == pytest.approx(gaussian_mass(bg.n, p), rel=1e-3)


def test_flat_scan_constant():
    sc = monotonicity_scan(Flat(2), P(0.5), [0.2, 0.6, 1.5], quad=SMALL)
    assert sc.A0 == 0.0
    assert np.allclose(sc.weighted, 4 * math.pi, rtol=1e-10)
    assert sc.ok


def test_sphere_scan_and_negative_control():
    grid = np.geomspace(0.05, 1.9, 12)
    sc = monotonicity_scan(Sphere(2, 1.0), P(0.75), grid, 0.5)
    assert sc.ok and sc.A0 == pytest.approx(1.0)
    bad = monotonicity_scan(Sphere(2, 1.0), P(0.75), grid, 0.5, weight_sign=-1)
    assert not bad.ok
    with pytest.raises(RangeError):
        monotonicity_scan(Sphere(2, 1.0), P(0.75), [0.5, 2.5], 0.5)
    with pytest.raises(RangeError):
        monotonicity_scan(Sphere(2, 1.0), P(0.5), [0.5, 0.4])


def test_zp_flat_constant():
    v = np.array([0.4, -0.3])
    r = zp_monotone_check(Flat(2), P(0.6), v, [0.2, 0.5, 1.0], c=0.5)
    assert abs(r["max"]) < 1e-9
    assert r["ok"] and r["fd_vs_analytic"] < 1e-9


def test_zp_sphere_and_cigar():
    r = zp_monotone_check(Sphere(2, 1.0), P(0.5), [0.1, 0.2], [0.2, 0.5, 1.0])
    assert r["ok"] and r["bound_violation"] <= 1e-8
    r = zp_monotone_check(Cigar(), P(0.75), [0.05, -0.02], [0.1, 0.5, 1.5], c=0.5)
    assert r["ok"] and r["A0"] == pytest.approx(4.0)


def test_zp_rejects_conjugate_data():
    from lplab.bvp import great_circle_datum
    v = great_circle_datum(Sphere(2, 1.0), 0.5, 1.3 * math.pi, [1, 0], 1.0)
    with pytest.raises(DomainError):
        zp_monotone_check(Sphere(2, 1.0), P(0.5), v, [0.5, 1.0])


def test_symmetric_pole():
    assert symmetric_pole(Flat(2), FlowParams(0.5, 1.0, (1.0, 2.0)))
    assert symmetric_pole(Cigar(), P(0.5))
    assert not symmetric_pole(Cigar(), FlowParams(0.5, 1.0, (0.3, 0.0)))


def test_rescaled_flat_identity():
    for rho in (0.5, 1.0, 2.0):
        val = rescaled_volume(Flat(2), P(0.5), 1.7, rho, method="pushforward", quad=SMALL)
        assert val == pytest.approx(rho ** 0.5 * 4 * math.pi, rel=1e-10)


@settings(max_examples=10)
@given(st.floats(0.1, 4), st.floats(0.1, 3.0), st.sampled_from([0.5, 0.6, 0.75]))
def test_rescaled_paths_agree(tb, rho, p):
    bg = Sphere(2, 1.0)
    a = rescaled_volume(bg, P(p), tb, rho, path="identity")
    b = rescaled_volume(bg, P(p), tb, rho, path="recompute")
    assert a == pytest.approx(b, rel=1e-10)


def test_rescaled_paths_pushforward():
    bg = Flat(2)
    pr = FlowParams(0.6, math.inf, (0.5, -1.0))
    a = rescaled_volume(bg, pr, 2.0, 0.7, path="identity", method="pushforward", quad=SMALL)
    b = rescaled_volume(bg, pr, 2.0, 0.7, path="recompute", method="pushforward", quad=SMALL)
    assert a == pytest.approx(b, rel=1e-10)


def test_rho_cap():
    assert rho_cap(0.6) == pytest.approx(1.25 ** 5)
    assert rho_cap(0.5) == math.e
    with pytest.raises(RangeError):
        rescaled_volume(Sphere(2, 1.0), P(0.6), 1.0, 3.1, enforce_cap=True)


def test_rescaled_constants_and_weight():
    c = rescaled_constants(Sphere(2, 1.0), P(0.5))
    assert c["A0"] == c["A1"] == c["A2"] == 0.0
    c = rescaled_constants(Sphere(2, 1.0), P(0.6), tau_bar0=0.1)
    # c2 = 1/2, diam0 = sqrt(2) pi, C0 = (0.4 / 1.6) * 2 pi^2
    assert c["C0"] == pytest.approx(0.25 * 2 * math.pi ** 2)
    assert c["A1"] == pytest.approx(0.2 * c["C0"])
    assert c["A2"] == pytest.approx(0.2 * c["C0"] / (2 * 0.5 * 0.1 ** 3))
    W = w_exponent(1.0, 2.0, 0.6, c)
    ref = (c["A0"] * 2 + c["A1"] * 2 ** 1.2 + c["A2"] * 2 ** -1.8 * math.exp(2.0)) * 1.0
    assert W == pytest.approx(ref)
    with pytest.raises(UnsupportedError):
        rescaled_constants(Cigar(), P(0.6), tau_bar0=0.1)


def test_rescaled_scan():
    bg = Sphere(2, 1.0)
    sc = rescaled_monotonicity_scan(bg, P(0.5), 1.0, np.geomspace(0.1, 4, 10))
    assert sc.ok and sc.meta["limit_error"] < 1e-3
    bad = rescaled_monotonicity_scan(bg, P(0.6), rho_cap(0.6), np.geomspace(0.1, 4, 10), weight_sign=-1)
    assert not bad.ok
