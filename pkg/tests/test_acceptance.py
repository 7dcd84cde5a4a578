"""One test per acceptance criterion, at the stated tolerances."""

import json
import math
import time

import numpy as np
import pytest

from lplab.action import dlogJ_inequality_check, harnack_bound_check, lp_pde_residual
from lplab.backgrounds import Cigar, Flat, FlowParams, Sphere, rescale, rescale_point
from lplab.bvp import (g_p_scan, grad_L_check, great_circle_oracle, gradient_bound_check,
                       laplacian_L_check, min_lp_bound_check, small_time_limit, solve_lp,
                       speed_bound_check)
from lplab.cli import run
from lplab.errors import DomainError
from lplab.geodesics import jacobian_limit
from lplab.volume import (Quadrature, gaussian_mass, monotonicity_scan, reduced_volume_pushforward,
                          rescaled_monotonicity_scan, rho_cap, zp_monotone_check)

P = lambda p: FlowParams(p, math.inf)
MODELS = {"flat": Flat(2), "sphere2": Sphere(2, 1.0), "sphere3": Sphere(3, 1.0), "cigar": Cigar()}


def g0_frame(bg, params):
    x0 = params.base_point(bg)
    g0 = bg.fields("metric", x0[None], np.array([0.0]))["g"][0]
    return np.linalg.inv(np.linalg.cholesky(g0)).T


def test_criterion_01_flat_closed_form(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_l = worst_g = 0.0
    count = 0
    for n in (1, 2, 3):
        bg = Flat(n)
        for p in (0.5, 0.6, 0.75, 0.9):
            for d in (0.5, 1.0, 2.0):
                for tb in (0.25, 1.0, 4.0):
                    u = rng.normal(size=n)
                    q = d * u / np.linalg.norm(u)
                    sol = solve_lp(bg, P(p), q, tb)
                    ref = (1 - p) ** 2 * d ** 2 / tb ** (2 * (1 - p))
                    worst_l = max(worst_l, abs(sol.value.l_p - ref))
                    worst_g = max(worst_g, grad_L_check(sol)["rel_error"])
                    count += 1
    dt = time.perf_counter() - t0
    ok = count == 108 and worst_l < 1e-6 and worst_g < 1e-4 and dt < 30
    report(1, ok, f"{count} configs, max |l_p - ref| = {worst_l:.2e}, max grad_L rel = {worst_g:.2e}, "
                  f"{dt:.1f}s")
    assert ok


def test_criterion_02_flat_volume(report):
    quad = Quadrature(order=20)
    grid = np.geomspace(0.05, 1.8, 10)
    t0 = time.perf_counter()
    worst = spread = 0.0
    for n in (1, 2, 3):
        for p, c in ((0.5, None), (0.75, 0.5)):
            sc = monotonicity_scan(Flat(n), P(p), grid, c, quad=quad)
            ref = gaussian_mass(n, p)
            assert ref == pytest.approx((math.sqrt(math.pi) / (1 - p)) ** n, rel=1e-14)
            worst = max(worst, float(np.max(np.abs(sc.values / ref - 1))))
            spread = max(spread, float(np.ptp(sc.weighted) / ref))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and spread < 1e-4 and dt < 120
    report(2, ok, f"max rel error {worst:.2e}, max spread {spread:.2e}, {dt:.1f}s")
    assert ok


def test_criterion_03_jacobian_limit(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for name in ("flat", "sphere2", "sphere3", "cigar"):
        bg = MODELS[name]
        for p in (0.5, 0.75):
            pr = P(p)
            V = (g0_frame(bg, pr) @ rng.normal(size=(bg.n, 4))).T * 0.5
            worst = max(worst, float(np.max(jacobian_limit(bg, pr, V)["error"])))
    ok = worst < 1e-4
    report(3, ok, f"max rel error {worst:.2e} over 4 models x 2 p x 4 v")
    assert ok


def test_criterion_04_small_time(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for name, bg in MODELS.items():
        for p in (0.5, 0.75):
            pr = P(p)
            V = (g0_frame(bg, pr) @ rng.normal(size=(bg.n, 10))).T
            worst = max(worst, float(np.max(small_time_limit(bg, pr, V, tau=1e-4)["error"])))
    ok = worst < 1e-3
    report(4, ok, f"max |l_p - |v|^2| = {worst:.2e} at tau = 1e-4, 10 v per model and p")
    assert ok


def test_criterion_05_sphere_oracle(report):
    rng = np.random.default_rng(5)
    worst = 0.0
    t0 = time.perf_counter()
    for k in range(20):
        bg = Sphere(2 + k % 2, 1.0)
        theta, tb, p = rng.uniform(0.05, 3.0), rng.uniform(0.1, 3.0), rng.uniform(0.5, 0.9)
        d = rng.normal(size=bg.n)
        q = Sphere.point_at_angle(theta, d)
        sol = solve_lp(bg, P(p), q, tb, seed=k)
        ref = float(great_circle_oracle(bg, p, theta, tb)["L_p"])
        worst = max(worst, abs(sol.value.L_p - ref) / abs(ref))
    ok = worst < 1e-6
    report(5, ok, f"max rel error {worst:.2e} over 20 samples, {time.perf_counter() - t0:.1f}s")
    assert ok


def test_criterion_06_volume_monotonicity(report):
    t0 = time.perf_counter()
    grid = np.geomspace(0.05, 2.0, 20)
    details = []
    ok = True
    for n in (2, 3):
        bg = Sphere(n, 1.0)
        sc = monotonicity_scan(bg, P(0.5), grid, method="direct")
        ok &= sc.ok and bool(np.all(sc.weighted <= gaussian_mass(n, 0.5) + 1e-6))
        # the quadrature path agrees with the direct one
        for i in (0, 9, 19):
            pf = reduced_volume_pushforward(bg, P(0.5), float(grid[i])).value
            ok &= abs(pf / sc.values[i] - 1) < 1e-4
        details.append(f"sphere({n},1) min decrement {float(np.min(-np.diff(sc.weighted))):.2e}")
    cg = np.geomspace(0.02, 1.95, 10)
    sc = monotonicity_scan(Cigar(), P(0.75), cg, 0.5, method="pushforward")
    ok &= sc.ok and bool(np.all(sc.weighted <= gaussian_mass(2, 0.75) + 1e-6))
    ok &= sc.meta["tau_bar1"] == pytest.approx(2.0) and cg[-1] < sc.meta["tau_bar1"]
    details.append(f"cigar max weighted {float(np.max(sc.weighted)):.4g}")
    dt = time.perf_counter() - t0
    ok = bool(ok) and dt < 600
    report(6, ok, "; ".join(details) + f", {dt:.1f}s")
    assert ok


def _admissible(bg, pr, rng, scale, grid, c):
    out = []
    while len(out) < 10:
        v = (g0_frame(bg, pr) @ rng.normal(size=bg.n)) * scale
        try:
            out.append(zp_monotone_check(bg, pr, v, grid, c=c))
        except DomainError:
            continue
    return out


def test_criterion_07_zp(report):
    rng = np.random.default_rng(7)
    cases = [("flat", 0.6, 0.5, [0.2, 0.6, 1.2]), ("sphere2", 0.5, None, [0.1, 0.5, 1.0, 1.5]),
             ("sphere3", 0.5, None, [0.1, 0.5, 1.0]), ("cigar", 0.75, 0.5, [0.1, 0.5, 1.0, 1.8])]
    worst = -math.inf
    for name, p, c, grid in cases:
        for r in _admissible(MODELS[name], P(p), rng, 0.4, grid, c):
            worst = max(worst, max(row["dlogZ_fd"] for row in r["rows"]))
    ok = worst <= 1e-7
    report(7, ok, f"max FD d log Z_p = {worst:.3e} over 40 geodesics")
    assert ok


def test_criterion_08_inequalities(report):
    rng = np.random.default_rng(8)
    configs = violations = 0
    names = ("flat", "sphere2", "sphere3", "cigar")
    # slacks: dlogJ 1e-8, Harnack 1e-10, Laplacian 1e-6, gradient and speed 1e-8
    # dlogJ: 20 geodesics
    for k in range(20):
        bg = MODELS[names[k % 4]]
        pr = P([0.5, 0.6, 0.75][k % 3])
        while True:
            v = (g0_frame(bg, pr) @ rng.normal(size=bg.n)) * 0.3
            try:
                res = dlogJ_inequality_check(bg, pr, v, [0.1, 0.3, 0.6])
                break
            except DomainError:
                continue
        violations += sum(r["violation"] > 1e-8 for r in res["rows"])
        configs += 1
    # Harnack: 20 space-time points with a random vector
    for k in range(20):
        bg = MODELS[names[k % 4]]
        x = rng.uniform(-1, 1, bg.n)
        res = harnack_bound_check(bg, P(0.5), x, float(rng.uniform(0.05, 2)), rng.normal(size=bg.n) * 2)
        violations += sum(r["slack"] < -1e-10 for r in res["rows"])
        configs += 1
    # Laplacian, gradient and speed bounds: 20 minimizers each
    for k in range(20):
        # cigar solves are slow, so it gets two of the twenty
        bg = MODELS["cigar"] if k in (3, 11) else MODELS[names[k % 3]]
        pr = P([0.5, 0.75][k % 2])
        q = pr.base_point(bg) + rng.uniform(-0.5, 0.5, bg.n)
        sol = solve_lp(bg, pr, q, float(rng.uniform(0.2, 1.0)), seed=k)
        if not sol.in_omega:
            continue
        lap = laplacian_L_check(sol)
        violations += lap["lhs"] > lap["rhs"] + 1e-6
        gb = gradient_bound_check(sol)
        violations += gb["lhs"] > gb["rhs"] + 1e-8
        sp = speed_bound_check(sol, samples=10)
        violations += sum(r["slack"] < -1e-8 for r in sp["rows"])
        configs += 3
    ok = configs >= 100 and violations == 0
    report(8, ok, f"{configs} configurations, {violations} violations")
    assert ok


def test_criterion_09_scaling(report):
    rng = np.random.default_rng(9)
    worst = 0.0
    for name in ("flat", "sphere2", "cigar"):
        bg = MODELS[name]
        for k in range(10):
            p = float(rng.uniform(0.5, 0.8))
            tb, tau = float(rng.uniform(0.3, 2.5)), float(rng.uniform(0.2, 1.0))
            q = rng.uniform(-0.6, 0.6, bg.n)
            starts = 8 if name == "cigar" else 32
            base = solve_lp(bg, P(p), q, tb * tau, starts=starts, seed=k).value.L_p
            resc = solve_lp(rescale(bg, tb), P(p), rescale_point(bg, tb, q), tau, starts=starts,
                            seed=k).value.L_p
            ident = tb ** (-p) * base
            worst = max(worst, abs(resc - ident) / abs(ident))
    ok = worst < 1e-6
    report(9, ok, f"max rel diff {worst:.2e} over 30 (tau_bar, tau, q)")
    assert ok


def test_criterion_10_g_p(report):
    ok = True
    ax = np.linspace(-0.4, 0.4, 7)
    Q2 = np.array(np.meshgrid(ax, ax, indexing="ij")).reshape(2, -1).T
    Q3 = np.array(np.meshgrid(ax[::2], ax[::2], ax[::2], indexing="ij")).reshape(3, -1).T
    for bg, Q in ((Sphere(2, 1.0), Q2), (Sphere(3, 1.0), Q3)):
        for p in (0.5, 0.75):
            ok &= g_p_scan(bg, P(p), np.geomspace(0.05, 2.0, 10), Q)["decreasing"]
            for t in (0.2, 1.0):
                ok &= min_lp_bound_check(bg, P(p), t, Q)["ok"]
    worst = 0.0
    for p in (0.5, 0.6, 0.75):
        for row in g_p_scan(Flat(2), P(p), [0.1, 0.5, 1.0, 2.0], Q2)["rows"]:
            worst = max(worst, abs(row["G_p"] + 2 / (2 * p) * row["tau"]))
    ok = bool(ok) and worst < 1e-6
    report(10, ok, f"sphere scans decreasing, min-l_p bounds hold; flat G_p error {worst:.2e}")
    assert ok


def test_criterion_11_rescaled(report):
    bg = Sphere(2, 1.0)
    grid = np.geomspace(0.1, 4.0, 20)
    ok = True
    worst = 0.0
    for p in (0.5, 0.6):
        for rho in (rho_cap(p), 0.5 * rho_cap(p), 1.0):
            sc = rescaled_monotonicity_scan(bg, P(p), rho, grid)
            ok &= sc.ok
            worst = max(worst, sc.meta["limit_error"])
    ok = bool(ok) and worst < 1e-3
    report(11, ok, f"all scans nonincreasing, max limit error {worst:.2e}")
    assert ok


def test_criterion_12_pde(report):
    bg = Flat(2)
    res = lp_pde_residual(bg, P(0.5), 0.5, N=64)["sup"]
    # l = n/2 log tau is a function of tau alone and misses the equation
    wrong = lambda q, t: np.full(len(q), bg.n / 2 * math.log(t))
    neg = lp_pde_residual(bg, P(0.5), 0.5, N=64, l_func=wrong)["sup"]
    ok = res < 1e-6 and neg > 1e-2
    report(12, ok, f"residual {res:.2e}, negative control {neg:.2e}")
    assert ok


def test_criterion_13_determinism(tmp_path, report):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"background": {"kind": "sphere", "n": 2, "a": 1.0}, "p": 0.6, "seed": 11,
                               "verify": {"samples": 3}}))
    assert run("verify", str(cfg), tmp_path / "t1", 1) == 0
    assert run("verify", str(cfg), tmp_path / "t4", 4) == 0
    a = (tmp_path / "t1" / "verify.csv").read_bytes()
    b = (tmp_path / "t4" / "verify.csv").read_bytes()
    ok = a == b and len(a) > 0
    report(13, ok, f"verify.csv identical across 1 and 4 threads ({len(a)} bytes)")
    assert ok
