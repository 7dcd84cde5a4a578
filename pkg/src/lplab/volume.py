"""Generalized reduced volume, its rescaled version, and monotonicity scans.

The pushforward form integrates over initial data v at the base point,

    V(tau) = int_U tau^{-(1-p)n} exp(-l_p(gamma_v(tau), tau)) J_p(v, tau) dv,

in polar coordinates w = r * omega of a g(p0, 0)-orthonormal frame.  Each ray
is cut at its first conjugate radius, so every radial panel integrates a
smooth function.  On the round sphere the same quantity is also available as
a one-dimensional integral over the polar angle (``reduced_volume_direct``).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as sint
from scipy import special

from .action import curve_H_integrals, jacobian_log_derivative
from .backgrounds import Background, Cigar, Flat, FlowParams, Rescaled, Sphere, rescale, rescale_point
from .bvp import great_circle_oracle, solve_lp
from .errors import DomainError, RangeError, TruncationError, UnsupportedError
from .geodesics import (conjugate_times_dense, envelope_constants, richardson, s_of_tau, shoot,
                        shoot_batch)

TAIL = 1e-8
MONO_SLACK = 1e-6
BOUND_SLACK = 1e-6
ENVELOPE_SLACK = 1e-8
MIN_TOL = 1e-6


# ---------------------------------------------------------------------------
# constants
def _p_of(params):
    return params.p if isinstance(params, FlowParams) else float(params)


def tau0(p, window: float) -> float:
    """min((2(1-p))^{-1/(2p-1)}, window); the window itself for p <= 1/2."""
    p = _p_of(p)
    if p <= 0.5:
        return float(window)
    e = -math.log(2 * (1 - p)) / (2 * p - 1)
    base = math.exp(e) if e < 700 else math.inf
    return min(base, float(window))


def tau_bar1(p, c, window: float) -> float:
    """End of the monotonicity interval: (1-c) tau0 for p > 1/2, the window for p = 1/2."""
    p = _p_of(p)
    if p < 0.5:
        raise RangeError("volume monotonicity needs p >= 1/2")
    if p == 0.5:
        return float(window)
    _check_c(c)
    return (1 - c) * tau0(p, window)


def _check_c(c, allow_one=False):
    if c is None or not (0 < c < 1 or (allow_one and c == 1)):
        raise RangeError(f"c must lie in (0,1), got {c}")


def a0_constant(params, c, R_sup: float, *, allow_c_one: bool = False) -> float:
    """((2p-1)_+ / (2(2-p)) + 1 / (2(2-p)c)) R_sup, and 0 for p = 1/2."""
    p = _p_of(params)
    if p == 0.5:
        return 0.0
    _check_c(c, allow_c_one)
    return (max(2 * p - 1, 0.0) / (2 * (2 - p)) + 1.0 / (2 * (2 - p) * c)) * R_sup


def envelope_c1(p: float, window: float, tau_bar: float, R_sup: float) -> float:
    """Growth rate C1 in tau^{-(1-p)n} e^{-C1 tau} J_p <= (1-p)^{-n} on [0, tau_bar]."""
    if math.isinf(window):
        ratio = 1.0
    else:
        if tau_bar >= window:
            raise RangeError("tau_bar must lie inside the time window")
        ratio = window / (window - tau_bar)
    return (max(2 * p - 1, 0.0) / (2 * (2 - p)) + ratio / (2 * (2 - p))) * R_sup


def gaussian_mass(n: int, p: float) -> float:
    return (math.sqrt(math.pi) / (1 - p)) ** n


def _window(bg, params):
    return min(params.tau_max, bg.tau_max)


# ---------------------------------------------------------------------------
# quadrature
@dataclass(frozen=True)
class Quadrature:
    """Polar rule: ``order`` Gauss-Legendre nodes per radial panel of width
    at most ``panel``; ``angular`` sets the number of directions (n = 2) or of
    polar nodes in cos(theta) with twice as many azimuths (n = 3)."""

    order: int = 20
    angular: int = 8
    panel: float = 3.5

    def directions(self, n: int):
        if n == 1:
            return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
        if n == 2:
            m = self.angular
            phi = 2 * np.pi * (np.arange(m) + 0.5) / m
            return np.stack([np.cos(phi), np.sin(phi)], 1), np.full(m, 2 * np.pi / m)
        if n == 3:
            m = self.angular
            ct, wt = np.polynomial.legendre.leggauss(m)
            phi = 2 * np.pi * (np.arange(2 * m) + 0.5) / (2 * m)
            st = np.sqrt(1 - ct ** 2)
            dirs = np.stack([np.outer(st, np.cos(phi)).ravel(), np.outer(st, np.sin(phi)).ravel(),
                             np.repeat(ct, 2 * m)], 1)
            return dirs, np.repeat(wt, 2 * m) * (np.pi / m)
        raise UnsupportedError("polar quadrature implemented for n <= 3")

    def radial(self, r_end: float, n: int):
        """Nodes and weights (including r^{n-1}) on [0, r_end]."""
        k = max(1, math.ceil(r_end / self.panel))
        t, w = np.polynomial.legendre.leggauss(self.order)
        edges = np.linspace(0.0, r_end, k + 1)
        a, b = edges[:-1, None], edges[1:, None]
        r = (0.5 * (b - a) * (t + 1) + a).ravel()
        ww = (0.5 * (b - a) * w).ravel() * r ** (n - 1)
        return r, ww


def truncation_radius(bg: Background, params: FlowParams, tau: float, lam: float = 1.0):
    """Radius beyond which the integrand carries < TAIL of the Gaussian mass.

    Uses l >= e^{-C2 tau} |v|^2 - C3' (1-p) tau^{1+2p} / (2+p) - (1-p) n c1 tau^{2p} / (1+p)
    and the Jacobian envelope.  Returns (inflated radius, raw radius); both are
    inf when the bound is too weak to certify anything.
    """
    p, n = params.p, bg.n
    c1, _ = bg.ricci_bounds(tau)
    _, C2, C3 = envelope_constants(bg.K1(tau), p)
    C3p = (1 - p) ** 2 * C3
    shift = C3p * (1 - p) / (2 + p) * tau ** (1 + 2 * p) + (1 - p) * n * c1 * tau ** (2 * p) / (1 + p)
    C1 = envelope_c1(p, _window(bg, params), tau, bg.R_sup(tau))
    rate = lam * math.exp(-C2 * tau)
    log_arg = math.log(TAIL) - C1 * tau - lam * shift + 0.5 * n * math.log(rate / lam)
    if log_arg < -700 or rate <= 0:
        return math.inf, math.inf
    R = math.sqrt(special.gammainccinv(0.5 * n, math.exp(log_arg)) / rate)
    return 1.5 * R, R


def _gauss_radius(n, lam=1.0):
    return math.sqrt(special.gammainccinv(0.5 * n, TAIL) / lam)


# ---------------------------------------------------------------------------
class _NodeEvaluator:
    """Shoots batches of initial data (in the orthonormal frame) to tau.

    Work is split into fixed-size chunks so that the integrator's shared step
    sequence, and hence every result bit, does not depend on the thread count.
    """

    def __init__(self, bg, params, tol, chunk=64, threads=1):
        self.bg, self.params, self.tol = bg, params, tol
        self.chunk, self.threads = int(chunk), int(threads)
        x0 = params.base_point(bg)
        g0 = bg.fields("metric", x0[None], np.array([0.0]))["g"][0]
        ev, U = np.linalg.eigh(g0)
        self.E = U @ np.diag(ev ** -0.5) @ U.T
        self.det_g0 = float(np.linalg.det(g0))
        self.calls = 0

    def _chunk(self, W, tau):
        bg, p = self.bg, self.params.p
        n = bg.n
        V = W @ self.E.T
        br = shoot_batch(bg, self.params, V, [tau], variational=True, monitor=True, tol=self.tol)
        x, M, orient = br.x[0], br.M[0], br.orient[0]
        g = bg.fields("metric", x, np.full(len(x), tau))["g"]
        J = orient * np.sqrt(np.linalg.det(g) / self.det_g0) * np.linalg.det(M)
        Lc = np.linalg.cholesky(g)
        A = np.matmul(np.transpose(Lc, (0, 2, 1)), M) @ self.E
        sv = np.linalg.svd(A, compute_uv=False)
        L = br.curv[0] + br.kin[0]
        s_tau = float(s_of_tau(tau, p))
        return {"J": J, "phi": sv[:, -1] / sv[:, 0], "L": L, "l": (1 - p) * L / tau ** (1 - p),
                "flag": br.first_conj_s < s_tau * (1 - 1e-12), "x": br.base_x(bg, 0)}

    def __call__(self, W, tau):
        W = np.atleast_2d(W)
        self.calls += 1
        parts = [W[i:i + self.chunk] for i in range(0, len(W), self.chunk)]
        if self.threads > 1 and len(parts) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as ex:
                res = list(ex.map(lambda P: self._chunk(P, tau), parts))
        else:
            res = [self._chunk(P, tau) for P in parts]
        return {k: np.concatenate([r[k] for r in res]) for k in res[0]}


def _conjugate_radii(ev, dirs, tau, R, K=32):
    """First radius along each ray where dexp degenerates at time tau (inf if none in (0, R]).

    Brackets come from a sign change of J, from the integrator's conjugate
    monitor, or from a near-zero local minimum of sigma_min / sigma_max; they
    are refined by Illinois on J, bisection on the monitor predicate, or
    golden-section search, respectively.
    """
    B, n = dirs.shape
    rg = R * np.arange(1, K + 1) / K
    res = ev((dirs[:, None, :] * rg[None, :, None]).reshape(-1, n), tau)
    J = res["J"].reshape(B, K)
    phi = res["phi"].reshape(B, K)
    flag = res["flag"].reshape(B, K)
    r_star = np.full(B, np.inf)
    kinds = {"sign": [], "flag": [], "min": []}
    start = np.zeros(B, dtype=int)
    pending = list(range(B))
    while pending:
        nxt = []
        for b in pending:
            for j in range(start[b], K):
                lo = rg[j - 1] if j else 0.0
                if J[b, j] <= 0:
                    kinds["sign"].append((b, lo, rg[j], J[b, j - 1] if j else 1.0, J[b, j]))
                    break
                if flag[b, j]:
                    kinds["flag"].append((b, lo, rg[j]))
                    break
                if 0 < j < K - 1 and phi[b, j] <= phi[b, j - 1] and phi[b, j] <= phi[b, j + 1] \
                        and phi[b, j] < 0.5:
                    kinds["min"].append((b, lo, rg[j + 1], j))
                    break
        if kinds["sign"]:
            items = kinds["sign"]
            idx = np.array([i[0] for i in items])
            a = np.array([i[1] for i in items])
            c = np.array([i[2] for i in items])
            fa = np.array([i[3] for i in items], dtype=float)
            fc = np.array([i[4] for i in items], dtype=float)
            kept = np.zeros(len(idx), dtype=int)      # +1: c kept last time, -1: a kept
            for _ in range(100):
                if np.all(c - a < 1e-12 * R):
                    break
                m = (a * fc - c * fa) / (fc - fa)
                m = np.where((m <= a) | (m >= c) | ~np.isfinite(m), 0.5 * (a + c), m)
                fm = ev(dirs[idx] * m[:, None], tau)["J"]
                move_a = fm * fa > 0
                fc = np.where(move_a & (kept == 1), 0.5 * fc, fc)
                fa = np.where(~move_a & (kept == -1), 0.5 * fa, fa)
                a, fa = np.where(move_a, m, a), np.where(move_a, fm, fa)
                c, fc = np.where(move_a, c, m), np.where(move_a, fc, fm)
                kept = np.where(move_a, 1, -1)
                if np.all(fm == 0):
                    break
            r_star[idx] = 0.5 * (a + c)
            kinds["sign"] = []
        if kinds["flag"]:
            items = kinds["flag"]
            idx = np.array([i[0] for i in items])
            a = np.array([i[1] for i in items])
            c = np.array([i[2] for i in items])
            for _ in range(45):
                m = 0.5 * (a + c)
                out = ev(dirs[idx] * m[:, None], tau)
                bad = out["flag"] | (out["J"] <= 0)
                a = np.where(bad, a, m)
                c = np.where(bad, m, c)
            r_star[idx] = 0.5 * (a + c)
            kinds["flag"] = []
        if kinds["min"]:
            items = kinds["min"]
            idx = np.array([i[0] for i in items])
            a = np.array([i[1] for i in items])
            c = np.array([i[2] for i in items])
            phi_at = lambda r: ev(dirs[idx] * r[:, None], tau)["phi"]
            gr = (math.sqrt(5) - 1) / 2
            x1, x2 = c - gr * (c - a), a + gr * (c - a)
            f1, f2 = phi_at(x1), phi_at(x2)
            for _ in range(80):
                if np.all(c - a < 1e-8 * R):
                    break
                left = f1 < f2
                c = np.where(left, x2, c)
                a = np.where(left, a, x1)
                nx1 = np.where(left, c - gr * (c - a), x2)
                nx2 = np.where(left, x1, a + gr * (c - a))
                fp = phi_at(np.where(left, nx1, nx2))
                f1, f2 = np.where(left, fp, f2), np.where(left, f1, fp)
                x1, x2 = nx1, nx2
            fmin = np.minimum(f1, f2)
            for k, (b, _, _, j) in enumerate(items):
                if fmin[k] < 1e-5:
                    r_star[b] = 0.5 * (a[k] + c[k])
                else:
                    start[b] = j + 1
                    nxt.append(b)
            kinds["min"] = []
        pending = nxt
    return r_star


# ---------------------------------------------------------------------------
@dataclass
class VolumeResult:
    value: float
    tau: float
    nodes: int
    excluded: int
    truncation: str
    R: float
    r_star_min: float
    envelope_max: float
    envelope_ok: bool
    minimality: str
    details: dict = field(default_factory=dict)


def _pushforward_integral(bg, params, tau, lam=1.0, quad=None, minimality="conjugate",
                          tol=1e-10, threads=1, chunk=64, starts=12):
    """int_U exp(-lam l_p(gamma_v(tau), tau)) J_p(v, tau) dv and diagnostics."""
    quad = quad or Quadrature()
    p, n = params.p, bg.n
    if minimality not in ("conjugate", "full"):
        raise ValueError("minimality must be 'conjugate' or 'full'")
    if tau > _window(bg, params):
        raise RangeError(f"tau={tau} exceeds the time window")
    ev = _NodeEvaluator(bg, params, tol, chunk, threads)
    dirs, aw = quad.directions(n)
    R_cert, _ = truncation_radius(bg, params, tau, lam)
    Rg = _gauss_radius(n, lam)
    R_cap = 3.0 * Rg
    certified = R_cert <= R_cap
    R = R_cert if certified else 1.5 * Rg
    while True:
        r_star = _conjugate_radii(ev, dirs, tau, R)
        r_end = np.minimum(r_star, R)
        W, wts, ray = [], [], []
        for b in range(len(dirs)):
            r, w = quad.radial(r_end[b], n)
            W.append(dirs[b] * r[:, None])
            wts.append(w * aw[b])
            ray.append(np.full(len(r), b))
        W, wts, ray = np.vstack(W), np.concatenate(wts), np.concatenate(ray)
        res = ev(W, tau)
        ok = ~res["flag"] & (res["J"] > 0)
        f = np.where(ok, np.exp(-lam * res["l"]) * res["J"], 0.0)
        total = math.fsum(wts * f)
        open_rays = r_star > R
        if certified or not np.any(open_rays):
            truncation = "certified" if certified else "compact"
            break
        # empirical tail: sentinel shells beyond R on the open rays
        fac = np.array([1.0, 1.25, 1.5, 2.0])
        ob = np.nonzero(open_rays)[0]
        Ws = (dirs[ob][:, None, :] * (R * fac)[None, :, None]).reshape(-1, n)
        sres = ev(Ws, tau)
        rs = R * fac
        fs = np.where(~sres["flag"] & (sres["J"] > 0), np.exp(-lam * sres["l"]) * sres["J"], 0.0)
        dens = (fs.reshape(len(ob), -1) * rs ** (n - 1))
        tail = np.trapezoid(dens, rs, axis=1) + dens[:, -1] * R
        tail_total = math.fsum(aw[ob] * tail)
        if tail_total <= TAIL * abs(total) and np.all(np.diff(dens, axis=1) <= 1e-300 + 0 * dens[:, 1:]):
            truncation = "empirical"
            break
        if R * 1.5 > R_cap:
            raise TruncationError(f"tail {tail_total:.3g} of {total:.3g} not below {TAIL} at R={R:.3g}")
        R *= 1.5
    excluded = int(np.sum(~ok))
    if minimality == "full":
        keep = np.nonzero(ok)[0]
        for i in keep:
            sol = solve_lp(bg, params, res["x"][i], tau, starts=starts)
            if res["L"][i] > sol.value.L_p + MIN_TOL * max(1.0, abs(sol.value.L_p)):
                ok[i] = False
        f = np.where(ok, f, 0.0)
        total = math.fsum(wts * f)
        excluded = int(np.sum(~ok))
    C1 = envelope_c1(p, _window(bg, params), tau, bg.R_sup(tau))
    ratio = tau ** (-(1 - p) * n) * math.exp(-C1 * tau) * res["J"][ok] * (1 - p) ** n
    env_max = float(np.max(ratio)) if ratio.size else 0.0
    info = {"nodes": len(W), "excluded": excluded, "truncation": truncation, "R": R,
            "r_star_min": float(np.min(r_star)), "envelope_max": env_max,
            "envelope_ok": env_max <= 1 + ENVELOPE_SLACK, "evaluations": ev.calls,
            "C1": C1}
    return total, info


def reduced_volume_pushforward(bg: Background, params: FlowParams, tau: float, quad: Quadrature = None,
                               *, minimality: str = "conjugate", tol: float = 1e-10,
                               threads: int = 1, chunk: int = 64) -> VolumeResult:
    """tau^{-(1-p)n} int_U e^{-l_p} J_p dv over admissible initial data.

    ``minimality="conjugate"`` admits every node whose geodesic has no
    conjugate point up to tau; ``"full"`` also requires the geodesic's action
    to match the two-point solver at its endpoint within 1e-6.
    """
    total, info = _pushforward_integral(bg, params, tau, 1.0, quad, minimality, tol, threads, chunk)
    val = tau ** (-(1 - params.p) * bg.n) * total
    return VolumeResult(value=val, tau=float(tau), nodes=info["nodes"], excluded=info["excluded"],
                        truncation=info["truncation"], R=info["R"], r_star_min=info["r_star_min"],
                        envelope_max=info["envelope_max"], envelope_ok=info["envelope_ok"],
                        minimality=minimality, details=info)


# ---------------------------------------------------------------------------
def _sphere_mass(bg: Sphere, p: float, T: float, lam: float = 1.0) -> float:
    """int_M exp(-lam l_p(q, T)) dV_{g(T)} from the great-circle reduction."""
    n = bg.n
    o = great_circle_oracle(bg, p, 0.0, T)
    curv, inv = o["curvature_part"], o["I"]
    k = lam * (1 - p) / (inv * T ** (1 - p))
    l0 = lam * (1 - p) * curv / T ** (1 - p)
    sk = math.sqrt(k)
    top = min(math.pi * sk, 40.0)
    pts = [t for t in (0.5, 1.0, 2.0, 4.0, 8.0) if t < top]
    f = lambda t: math.exp(-t * t) * math.sin(t / sk) ** (n - 1)
    val = sint.quad(f, 0.0, top, points=pts or None, epsabs=0.0, epsrel=1e-13, limit=400)[0] / sk
    omega = 2 * math.pi ** (n / 2) / math.gamma(n / 2)
    return math.exp(-l0) * float(bg.c(T)) ** (n / 2) * omega * val


def reduced_volume_direct(bg: Background, params: FlowParams, tau: float) -> float:
    """tau^{-(1-p)n} int_M e^{-l_p} dV_{g(tau)} on the round sphere."""
    if not isinstance(bg, Sphere):
        raise UnsupportedError("direct manifold quadrature needs a compact model (round sphere)")
    if tau > _window(bg, params):
        raise RangeError(f"tau={tau} exceeds the time window")
    return tau ** (-(1 - params.p) * bg.n) * _sphere_mass(bg, params.p, tau)


def _volume(bg, params, tau, method, quad=None, threads=1):
    if method == "auto":
        method = "direct" if isinstance(bg, Sphere) else "pushforward"
    if method == "direct":
        return reduced_volume_direct(bg, params, tau), method
    if method == "pushforward":
        return reduced_volume_pushforward(bg, params, tau, quad, threads=threads).value, method
    raise ValueError(f"unknown volume method {method!r}")


def volume_limit(bg: Background, params: FlowParams, s_small: float = 0.05, levels: int = 4,
                 method: str = "auto", quad: Quadrature = None) -> dict:
    """V(tau) as tau -> 0 by Richardson extrapolation in s = tau^{1-p} over s_small / 2^k."""
    p = params.p
    s = s_small / 2.0 ** np.arange(levels)
    taus = s ** (1 / (1 - p))
    vals = np.array([_volume(bg, params, float(t), method, quad)[0] for t in taus])
    est, _ = richardson(vals, s, powers=range(1, levels))
    target = gaussian_mass(bg.n, p)
    return {"limit": est, "raw": vals, "taus": taus, "target": target,
            "error": abs(est - target) / target}


# ---------------------------------------------------------------------------
@dataclass
class VolumeScan:
    """Volumes and weights along a time grid.

    ``taus`` holds tau for reduced-volume scans and tau_bar for rescaled
    scans; ``log_weighted`` is what the monotonicity check compares (weights
    can underflow).
    """

    taus: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    weighted: np.ndarray
    log_weighted: np.ndarray
    monotone_ok: np.ndarray
    A0: float
    tau0: float
    method: str
    bound_ok: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        good = bool(np.all(self.monotone_ok)) and bool(np.all(self.values > 0))
        if self.bound_ok is not None:
            good = good and bool(np.all(self.bound_ok))
        return good

    @property
    def raw_differences(self) -> np.ndarray:
        return np.diff(self.log_weighted)

    def rows(self) -> list:
        return [{"tau": float(t), "value": float(v), "weight": float(w), "weighted": float(x),
                 "monotone_ok": bool(m)}
                for t, v, w, x, m in zip(self.taus, self.values, self.weights, self.weighted,
                                         self.monotone_ok)]


def _monotone_flags(logw, slack):
    ok = np.ones(len(logw), dtype=bool)
    ok[1:] = np.diff(logw) <= math.log1p(slack)
    return ok


def monotonicity_scan(bg: Background, params: FlowParams, tau_grid, c: float = None, *,
                      method: str = "auto", quad: Quadrature = None, R_sup: float = None,
                      threads: int = 1, slack: float = MONO_SLACK,
                      weight_sign: float = 1.0) -> VolumeScan:
    """Rows (tau, V, e^{-A0 tau} V) with the nonincreasing and upper-bound checks.

    ``weight_sign`` exists for negative controls: -1 flips the exponent.
    """
    p, n = params.p, bg.n
    grid = np.asarray(tau_grid, dtype=float)
    if np.any(np.diff(grid) <= 0) or grid[0] <= 0:
        raise RangeError("tau grid must be positive and strictly increasing")
    window = _window(bg, params)
    t1 = tau_bar1(p, c, window)
    if p > 0.5 and grid[-1] >= t1:
        raise RangeError(f"grid must lie in (0, {t1:.6g}) for p={p}, c={c}")
    if p == 0.5 and grid[-1] > t1:
        raise RangeError(f"grid exceeds the time window {t1}")
    if R_sup is None:
        R_sup = bg.R_sup(t1 if math.isfinite(t1) else grid[-1])
    A0 = a0_constant(p, c, R_sup)
    vals, used = [], None
    for t in grid:
        v, used = _volume(bg, params, float(t), method, quad, threads)
        vals.append(v)
    vals = np.array(vals)
    logw = -weight_sign * A0 * grid
    logwv = np.log(vals) + logw
    bound = gaussian_mass(n, p)
    weighted = np.exp(logwv)
    return VolumeScan(taus=grid, values=vals, weights=np.exp(logw), weighted=weighted,
                      log_weighted=logwv, monotone_ok=_monotone_flags(logwv, slack), A0=A0,
                      tau0=tau0(p, window), method=used, bound_ok=weighted <= bound + BOUND_SLACK,
                      meta={"R_sup": R_sup, "tau_bar1": t1, "c": c, "bound": bound,
                            "R_sup_region": f"M x (0, {t1:g}]"})


# ---------------------------------------------------------------------------
def symmetric_pole(bg: Background, params: FlowParams) -> bool:
    """True when the base point is fixed by a rotation group acting
    transitively on directions, so a conjugate-free L-geodesic minimizes."""
    while isinstance(bg, Rescaled):
        bg = bg.base
    x0 = params.base_point(bg)
    if isinstance(bg, (Flat, Sphere)):
        return isinstance(bg, Flat) or not np.any(x0)
    if isinstance(bg, Cigar):
        return not np.any(x0)
    return False


def zp_monotone_check(bg: Background, params: FlowParams, v, tau_grid, *, c: float = None,
                      A0: float = None, h_rel: float = 1e-3, slack: float = 1e-7,
                      tol: float = 1e-12, check_minimal="auto", starts: int = 12) -> dict:
    """Finite-difference d/dtau log Z_p(v, tau) along the grid, with
    Z_p = tau^{-(1-p)n} e^{-l_p} e^{-A0 tau} J_p.

    Also reports the analytic derivative (trace identity) and the explicit
    upper bound built from curvature integrals along the geodesic.
    ``check_minimal="auto"`` runs the two-point solver only when the base
    point is not a symmetric pole.
    """
    p, n = params.p, bg.n
    grid = np.asarray(tau_grid, dtype=float)
    if A0 is None:
        A0 = a0_constant(p, c, bg.R_sup(tau_bar1(p, c, _window(bg, params)))) if p != 0.5 else 0.0
    h = h_rel * grid
    stops = np.sort(np.concatenate([grid + k * h for k in (-2, -1, 0, 1, 2)]))
    t_end = float(stops[-1])
    curve = shoot(bg, params, v, t_end, tol=tol, variational=True, stop_taus=stops)
    conj = conjugate_times_dense(curve)
    if conj and conj[0] <= t_end:
        raise DomainError(f"v has a conjugate point at tau={conj[0]:.6g}")
    if check_minimal == "auto":
        check_minimal = not symmetric_pole(bg, params)
    if check_minimal:
        sol = solve_lp(bg, params, curve.endpoint(), t_end, starts=starts)
        Lv = curve.final_state[curve.system.CURV] + curve.final_state[curve.system.KIN]
        if Lv > sol.value.L_p + MIN_TOL * max(1.0, abs(sol.value.L_p)):
            raise DomainError("the geodesic of v is not minimizing at the end of the grid")
    sysm = curve.system
    taus, states, _, orients = curve.stop_states()
    x0 = params.base_point(bg)
    g0 = bg.fields("metric", x0[None], np.array([0.0]))["g"][0]

    def logZ(i):
        t = taus[i]
        st = states[i]
        g = bg.fields("metric", st[:n][None], np.array([t]))["g"][0]
        J = orients[i] * math.sqrt(np.linalg.det(g) / np.linalg.det(g0)) * np.linalg.det(st[sysm.M].reshape(n, n))
        l = (1 - p) * (st[sysm.CURV] + st[sysm.KIN]) / t ** (1 - p)
        return -(1 - p) * n * math.log(t) - l - A0 * t + math.log(J)

    rows = []
    for T, hh in zip(grid, h):
        idx = {k: int(np.argmin(np.abs(taus - (T + k * hh)))) for k in (-2, -1, 0, 1, 2)}
        lz = {k: logZ(i) for k, i in idx.items()}
        d_fd = (lz[-2] - 8 * lz[-1] + 8 * lz[1] - lz[2]) / (12 * hh)
        st = states[idx[0]]
        x, u = st[:n], st[n:2 * n]
        M, N = st[sysm.M].reshape(n, n), st[sysm.N].reshape(n, n)
        f = bg.fields("rhs", x[None], np.array([T]))
        R = float(f["scalar_R"][0])
        X2 = (1 - p) ** 2 * T ** (-2 * p) * float(u @ f["g"][0] @ u)
        L = st[sysm.CURV] + st[sysm.KIN]
        dl = (1 - p) / T ** (2 - p) * (T ** (p + 1) * (R + X2) - (1 - p) * L)
        d_an = jacobian_log_derivative(bg, p, x, u, M, N, T) - (1 - p) * n / T - dl - A0
        iR, iH, _, iHp = curve_H_integrals(curve, T)
        bound = ((2 * p - 1) / (2 * T ** (2 - p)) * iR - A0
                 - (iH - 2 * (1 - p) * iHp) / (2 * T ** (2 - p)))
        rows.append({"tau": float(T), "dlogZ_fd": float(d_fd), "dlogZ_analytic": float(d_an),
                     "bound": float(bound), "ok": bool(d_fd <= slack)})
    return {"rows": rows, "max": max(r["dlogZ_fd"] for r in rows), "A0": A0,
            "ok": all(r["ok"] for r in rows),
            "fd_vs_analytic": max(abs(r["dlogZ_fd"] - r["dlogZ_analytic"]) for r in rows),
            "bound_violation": max(r["dlogZ_analytic"] - r["bound"] for r in rows)}


# ---------------------------------------------------------------------------
def rho_cap(p: float) -> float:
    """Largest admissible rho, (1/(2(1-p)))^{1/(2p-1)}; e in the limit p -> 1/2."""
    if p == 0.5:
        return math.e
    if p < 0.5:
        raise RangeError("rho cap defined for p >= 1/2")
    return (1.0 / (2 * (1 - p))) ** (1.0 / (2 * p - 1))


def rescaled_volume(bg: Background, params: FlowParams, tau_bar: float, rho: float, *,
                    path: str = "identity", method: str = "auto", quad: Quadrature = None,
                    enforce_cap: bool = False, threads: int = 1) -> float:
    """rho^{-(1-p)n/2} int_M e^{-l^{tb}(q, rho)} dV_{g^{tb}(rho)}.

    ``identity`` evaluates on the original background at T = tau_bar rho with
    l^{tb} = tau_bar^{1-2p} l(q, T) and dV_{g^{tb}(rho)} = tau_bar^{-n/2} dV_{g(T)};
    ``recompute`` works on the rescaled background directly.
    """
    p, n = params.p, bg.n
    if not (tau_bar > 0 and rho > 0):
        raise RangeError("tau_bar and rho must be positive")
    if enforce_cap and p > 0.5 and rho > rho_cap(p) * (1 + 1e-12):
        raise RangeError(f"rho={rho} exceeds the admissible cap {rho_cap(p):.6g}")
    if method == "auto":
        method = "direct" if isinstance(bg, Sphere) else "pushforward"
    pref = rho ** (-(1 - p) * n / 2)

    def mass(b, pr, T, lam):
        if method == "direct":
            if not isinstance(b, Sphere):
                raise UnsupportedError("direct quadrature needs the round sphere")
            return _sphere_mass(b, p, T, lam)
        return _pushforward_integral(b, pr, T, lam, quad, threads=threads)[0]

    if path == "identity":
        T = tau_bar * rho
        return pref * tau_bar ** (-n / 2) * mass(bg, params, T, tau_bar ** (1 - 2 * p))
    if path == "recompute":
        bgr = rescale(bg, tau_bar)
        p0 = None if params.p0 is None else tuple(rescale_point(bg, tau_bar, params.p0))
        pr = FlowParams(p, params.tau_max / tau_bar, p0, params.t0)
        return pref * mass(bgr, pr, rho, 1.0)
    raise ValueError(f"unknown path {path!r}")


def rescaled_constants(bg: Background, params: FlowParams, tau_bar0: float = None,
                       c2: float = None, C0: float = None) -> dict:
    """A0, A1, A2, C0, c2 and tau_bar0 for the rescaled-volume weight W.

    For p = 1/2 everything vanishes.  Otherwise A0 uses c = 1 and the sup of
    R over all tau; c2 is the model's Ricci upper bound; C0 bounds l_p by
    C0 (T^{2p} + e^{2 c2 T} / T^{2-2p}) via the explicit action upper bound,
    giving C0 = (1-p)/(p+1) max(c2 n, diam_0^2).
    """
    p, n = params.p, bg.n
    if p < 0.5:
        raise RangeError("rescaled monotonicity needs p >= 1/2")
    if p == 0.5:
        return {"A0": 0.0, "A1": 0.0, "A2": 0.0, "C0": 0.0, "c2": 0.0, "tau_bar0": 0.0,
                "derivation": "p = 1/2: all weights vanish"}
    if not isinstance(bg, Sphere):
        raise UnsupportedError("rescaled monotonicity is checked on compact models (round sphere)")
    if tau_bar0 is None or tau_bar0 <= 0:
        raise RangeError("tau_bar0 > 0 is required for p > 1/2")
    if c2 is None:
        c2 = bg.ricci_bounds(math.inf)[1]
    diam0 = math.sqrt(float(bg.c(0.0))) * math.pi
    if C0 is None:
        C0 = (1 - p) / (p + 1) * max(c2 * n, diam0 ** 2)
    A0 = a0_constant(p, 1.0, bg.R_sup(math.inf), allow_c_one=True)
    A1 = (2 * p - 1) * C0
    A2 = (2 * p - 1) * C0 / (2 * c2 * tau_bar0 ** 3)
    return {"A0": A0, "A1": A1, "A2": A2, "C0": C0, "c2": c2, "tau_bar0": tau_bar0,
            "derivation": f"c2 = sup Ric = {c2:g}; diam0 = {diam0:.6g}; "
                          f"C0 = (1-p)/(p+1) max(c2 n, diam0^2); A0 with c = 1"}


def w_exponent(tau_bar, rho, p, consts) -> float:
    A0, A1, A2, c2 = consts["A0"], consts["A1"], consts["A2"], consts["c2"]
    tail = A2 * rho ** (2 * p - 3) * math.exp(2 * c2 * tau_bar * rho) if A2 else 0.0
    return (A0 * rho + A1 * rho ** (2 * p) + tail) * tau_bar


def rescaled_monotonicity_scan(bg: Background, params: FlowParams, rho: float, tau_bar_grid, *,
                               tau_bar0: float = None, c2: float = None, C0: float = None,
                               path: str = "identity", method: str = "direct",
                               quad: Quadrature = None, slack: float = MONO_SLACK,
                               limit_tau: float = 1e-3, weight_sign: float = 1.0) -> VolumeScan:
    """Rows (tau_bar, V^{tb}(rho), e^{-W} V^{tb}(rho)) and the small-tau_bar limit."""
    p, n = params.p, bg.n
    if not isinstance(bg, Sphere):
        raise UnsupportedError("rescaled monotonicity is checked on compact models (round sphere)")
    grid = np.asarray(tau_bar_grid, dtype=float)
    if np.any(np.diff(grid) <= 0) or grid[0] <= 0:
        raise RangeError("tau_bar grid must be positive and strictly increasing")
    if p > 0.5 and rho > rho_cap(p) * (1 + 1e-12):
        raise RangeError(f"rho={rho} exceeds the admissible cap {rho_cap(p):.6g}")
    if p > 0.5 and tau_bar0 is None:
        tau_bar0 = float(grid[0])
    consts = rescaled_constants(bg, params, tau_bar0, c2, C0)
    if grid[0] < consts["tau_bar0"]:
        raise RangeError("grid must start at or after tau_bar0")
    vals = np.array([rescaled_volume(bg, params, float(t), rho, path=path, method=method, quad=quad)
                     for t in grid])
    W = np.array([weight_sign * w_exponent(float(t), rho, p, consts) for t in grid])
    logwv = np.log(vals) - W
    lim_taus = limit_tau / 2.0 ** np.arange(3)
    lim_vals = np.array([rescaled_volume(bg, params, float(t), rho, path=path, method=method,
                                         quad=quad) for t in lim_taus])
    est, _ = richardson(lim_vals, lim_taus, powers=(1, 2))
    target = gaussian_mass(n, p) * rho ** ((1 - p) * n / 2)
    meta = dict(consts)
    meta.update({"rho": rho, "limit": est, "limit_target": target,
                 "limit_error": abs(est - target) / target, "path": path})
    with np.errstate(over="ignore", under="ignore"):
        weights, weighted = np.exp(-W), np.exp(logwv)
    return VolumeScan(taus=grid, values=vals, weights=weights, weighted=weighted,
                      log_weighted=logwv, monotone_ok=_monotone_flags(logwv, slack),
                      A0=consts["A0"], tau0=consts["tau_bar0"], method=method, meta=meta)
