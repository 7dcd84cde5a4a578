"""L_p-geodesics in the regularized variable s = tau^(1-p).

In s the geodesic equation reads, in coordinates,

    x'' = -Gamma(x', x') + a(s) g^{-1} dR - b(s) g^{-1} Ric x'
    a(s) = s^{2p/(1-p)} / (2 (1-p)^2),    b(s) = 2 s^{p/(1-p)} / (1-p)

with x(0) = p0 and x'(0) = v / (1-p).  The state of every member also
carries the two action accumulators and, optionally, the linearization
(M, N) = (dx/dv, dx'/dv).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backgrounds import Background, FlowParams, Sphere
from .errors import CapabilityError, DomainError, EnvelopeViolation, EscapeError, RangeError
from .integrate import hermite, integrate

DEFAULT_TOL = 1e-9


def s_of_tau(tau, p):
    return np.asarray(tau, dtype=float) ** (1.0 - p)


def tau_of_s(s, p):
    return np.asarray(s, dtype=float) ** (1.0 / (1.0 - p))


def envelope_constants(K1: float, p: float):
    """(C1, C2, C3) of the a priori s-speed envelope."""
    A1 = max((1 - p) ** -2, 2.0 / (1 - p))
    C1 = A1 * K1
    C2 = 2 * (1 - p) * C1
    C3 = C2 / (8 * (1 + 2 * p))
    return C1, C2, C3


class GeodesicSystem:
    """Right-hand side and chart bookkeeping for a batch of L_p-geodesics."""

    def __init__(self, bg: Background, p: float, B: int, variational=False,
                 groups=None, envelope=None, monitor=False, s_start=0.0):
        self.bg = bg
        self.p = float(p)
        self.n = n = bg.n
        self.B = B
        self.variational = variational
        self.X = slice(0, n)
        self.U = slice(n, 2 * n)
        self.CURV = 2 * n
        self.KIN = 2 * n + 1
        self.M = slice(2 * n + 2, 2 * n + 2 + n * n)
        self.N = slice(2 * n + 2 + n * n, 2 * n + 2 + 2 * n * n)
        self.dim = 2 * n + 2 + (2 * n * n if variational else 0)
        self.charts = np.zeros(B, dtype=int)
        self.orient = np.ones(B)
        self.groups = groups
        self.envelope = envelope  # (C2, C3, v2) arrays or None
        self.env_ratio = np.zeros(B)
        self.s_start = s_start
        self.monitor = monitor and variational
        if self.monitor:
            self.det_prev = np.zeros(B)
            self.det_max = np.zeros(B)
            self.first_conj = np.full(B, np.inf)

    # -- coefficients -----------------------------------------------------
    def coeffs(self, s):
        p = self.p
        s = max(float(s), 0.0)
        tau = s ** (1.0 / (1.0 - p))
        a = s ** (2 * p / (1 - p)) / (2 * (1 - p) ** 2)
        b = 2 * s ** (p / (1 - p)) / (1 - p)
        return tau, a, b

    def initial_state(self, x0, v, u_scale=None):
        x0 = np.broadcast_to(np.asarray(x0, float), (self.B, self.n))
        v = np.asarray(v, float).reshape(self.B, self.n)
        Y = np.zeros((self.B, self.dim))
        Y[:, self.X] = x0
        Y[:, self.U] = v / (1 - self.p)
        if self.variational:
            Y[:, self.N] = (np.eye(self.n) / (1 - self.p)).ravel()
        return Y

    def rhs(self, s, Y):
        n = self.n
        tau, a, b = self.coeffs(s)
        x = Y[:, self.X]
        u = Y[:, self.U]
        f = self.bg.fields("rhs_lin" if self.variational else "rhs", x, np.full(self.B, tau))
        gam = f["christoffel"]
        ricm = f["ric_mixed"]
        F = np.empty_like(Y)
        F[:, self.X] = u
        gu = np.matmul(gam, u[:, None, :, None])[..., 0]          # Gamma^k_ij u^j
        F[:, self.U] = (
            -np.matmul(gu, u[:, :, None])[..., 0]
            + a * f["grad_R_up"]
            - b * np.matmul(ricm, u[:, :, None])[..., 0]
        )
        w = max(float(s), 0.0) ** (2 * self.p / (1 - self.p))
        F[:, self.CURV] = w * f["scalar_R"] / (1 - self.p)
        gu_ = np.matmul(f["g"], u[:, :, None])[..., 0]
        F[:, self.KIN] = (1 - self.p) * np.sum(u * gu_, axis=1)
        if self.variational:
            M = Y[:, self.M].reshape(self.B, n, n)
            N = Y[:, self.N].reshape(self.B, n, n)
            uc = u[:, None, None, :, None]
            dguu = np.matmul(np.matmul(f["d_christoffel"], uc)[..., 0], u[:, None, :, None])[..., 0]
            dric_u = np.matmul(f["d_ric_mixed"], u[:, None, :, None])[..., 0]
            # all (m, k) arrays are contracted with M over m
            lin_mk = -dguu + a * f["d_grad_R_up"] - b * dric_u
            dN = (np.matmul(lin_mk.transpose(0, 2, 1), M)
                  - 2 * np.matmul(gu, N)
                  - b * np.matmul(ricm, N))
            F[:, self.M] = N.reshape(self.B, -1)
            F[:, self.N] = dN.reshape(self.B, -1)
        return F

    # -- per-step hooks ---------------------------------------------------
    def tag(self):
        return (self.charts.copy(), self.orient.copy())

    def on_step(self, s0, s1, y0, f0, y1, f1):
        if not np.all(np.isfinite(y1)):
            raise EscapeError("non-finite state", s=s0, state=y0)
        if self.envelope is None and not self.monitor:
            return
        tau = self.coeffs(s1)[0]
        x = y1[:, self.X]
        g = self.bg.fields("metric", x, np.full(self.B, tau))["g"]
        if self.envelope is not None:
            C2, C3, v2 = self.envelope
            u = y1[:, self.U]
            speed2 = np.einsum("bi,bij,bj->b", u, g, u)
            sr = max(s1 - self.s_start, 0.0)
            env = np.exp(C2 * sr ** (1 / (1 - self.p))) * (v2 + C3 * sr ** ((1 + 2 * self.p) / (1 - self.p)))
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(env > 0, speed2 / env, np.where(speed2 > 0, np.inf, 0.0))
            self.env_ratio = np.maximum(self.env_ratio, ratio)
            if np.any(ratio > 1e6):
                raise EnvelopeViolation(
                    f"s-speed exceeds 1e3 x the a priori envelope at s={s1} "
                    f"(ratio {math.sqrt(float(np.max(ratio))):.3g})"
                )
        if self.monitor:
            for sm, ym, gm in self._monitor_points(s0, s1, y0, f0, y1, f1, g):
                self._update_det(sm, ym, gm)

    def _monitor_points(self, s0, s1, y0, f0, y1, f1, g1):
        sm = 0.5 * (s0 + s1)
        ym, _ = hermite(s0, s1, y0, f0, y1, f1, sm)
        tau_m = self.coeffs(sm)[0]
        gm = self.bg.fields("metric", ym[:, self.X], np.full(self.B, tau_m))["g"]
        return [(sm, ym, gm), (s1, y1, g1)]

    def invariant_det(self, Y, g):
        M = Y[:, self.M].reshape(-1, self.n, self.n)
        return self.orient * np.sqrt(np.linalg.det(g)) * np.linalg.det(M)

    def _update_det(self, s, Y, g):
        D = self.invariant_det(Y, g)
        flip = (self.det_prev * D < 0)
        small = (np.abs(D) < 1e-10 * self.det_max) & (self.det_max > 0)
        hit = (flip | small) & ~np.isfinite(self.first_conj)
        self.first_conj[hit] = s
        self.det_max = np.maximum(self.det_max, np.abs(D))
        self.det_prev = D

    def after_step(self, s, Y):
        if not self.bg.has_charts:
            return Y, None
        need = self.bg.needs_switch(Y[:, self.X])
        if self.groups is not None:
            lead = np.zeros(self.groups.max() + 1, dtype=bool)
            first = np.unique(self.groups, return_index=True)[1]
            lead[self.groups[first]] = need[first]
            need = lead[self.groups]
        if not np.any(need):
            return Y, need
        Y = Y.copy()
        idx = np.nonzero(need)[0]
        x = Y[idx, self.X]
        u = Y[idx, self.U]
        J = Sphere.inversion_jacobian(x)
        Y[idx, self.X] = Sphere.invert(x)
        Y[idx, self.U] = np.einsum("bij,bj->bi", J, u)
        if self.variational:
            n = self.n
            M = Y[idx, self.M].reshape(-1, n, n)
            N = Y[idx, self.N].reshape(-1, n, n)
            Mn = np.einsum("bij,bjc->bic", J, M)
            Nn = np.einsum("bij,bjc->bic", J, N)
            for c in range(n):
                Nn[:, :, c] += Sphere.inversion_second(x, M[:, :, c], u)
            Y[idx, self.M] = Mn.reshape(len(idx), -1)
            Y[idx, self.N] = Nn.reshape(len(idx), -1)
        self.charts[idx] ^= 1
        self.orient[idx] *= -1
        return Y, need


def to_base_chart(bg, x, chart):
    """Coordinates of a point in the base chart."""
    x = np.asarray(x, dtype=float)
    chart = np.asarray(chart)
    if not bg.has_charts or not np.any(chart):
        return x
    out = x.copy()
    sel = chart.astype(bool)
    out[sel] = Sphere.invert(x[sel])
    return out


def vector_to_base(bg, x, w, chart):
    """Push a tangent vector at x (given in ``chart``) to base-chart components."""
    if not bg.has_charts or not chart:
        return np.asarray(w, float)
    return Sphere.inversion_jacobian(np.asarray(x, float)) @ np.asarray(w, float)


@dataclass
class GeodesicCurve:
    """An s-parametrized L_p-geodesic with cubic-Hermite dense output.

    ``positions`` and ``s_velocities`` are node values expressed in the
    chart that was active on the adjacent segment (``charts``); use
    ``point_at`` for base-chart coordinates.
    """

    bg: Background
    params: FlowParams
    s_nodes: np.ndarray
    positions: np.ndarray
    s_velocities: np.ndarray
    charts: np.ndarray
    v0: np.ndarray
    interpolant: object
    system: GeodesicSystem
    s_start: float
    s_end: float
    final_state: np.ndarray
    final_chart: int
    final_orient: float
    env_ratio: float = 0.0
    tol: float = DEFAULT_TOL
    extra: dict = field(default_factory=dict)

    @property
    def p(self):
        return self.params.p

    @property
    def tau_bar(self):
        return float(tau_of_s(self.s_end, self.p))

    @property
    def tau_start(self):
        return float(tau_of_s(self.s_start, self.p))

    @property
    def variational(self):
        return self.system.variational

    def state(self, s):
        """(state, derivative, chart, orient) of member 0 at s."""
        y, dy, tag = self.interpolant(s)
        return y[0], dy[0], int(tag[0][0]), float(tag[1][0])

    def eval_many(self, s):
        """Vectorized (states, derivatives, charts) of member 0 at an array of s."""
        d = self.interpolant
        if not hasattr(d, "_stack"):
            d._stack = (np.array([y[0] for y in d.y0]), np.array([f[0] for f in d.f0]),
                        np.array([y[0] for y in d.y1]), np.array([f[0] for f in d.f1]),
                        np.array([t[0][0] for t in d.tags]))
        y0, f0, y1, f1, ch = d._stack
        s = np.asarray(s, dtype=float)
        k = np.minimum(np.searchsorted(d.s1, s, side="left"), len(d.s1) - 1)
        y, dy = hermite(d.s0[k][:, None], d.s1[k][:, None], y0[k], f0[k], y1[k], f1[k], s[:, None])
        return y, dy, ch[k]

    def stop_states(self):
        """(taus, states, charts, orients) recorded at the requested stop times."""
        return self.extra.get("stops")

    def point_at(self, s):
        y, _, chart, _ = self.state(s)
        return to_base_chart(self.bg, y[None, :self.bg.n], np.array([chart]))[0]

    def endpoint(self):
        x = self.final_state[: self.bg.n]
        return to_base_chart(self.bg, x[None], np.array([self.final_chart]))[0]

    def segments(self):
        d = self.interpolant
        return d.s0, d.s1


def _envelope(bg, params, v, x0, tau_hi, s_start):
    K1 = bg.K1(tau_hi)
    _, C2, C3 = envelope_constants(K1, params.p)
    tau0 = float(tau_of_s(s_start, params.p))
    g0 = bg.fields("metric", x0, np.full(len(x0), tau0))["g"]
    u0 = v / (1 - params.p)
    v2 = np.einsum("bi,bij,bj->b", u0, g0, u0)
    return (C2, C3, v2)


def _check_inputs(bg, params, tau_bar, tau_start):
    if tau_bar > params.tau_max * (1 + 1e-12) or tau_bar > bg.tau_max * (1 + 1e-12):
        raise RangeError(f"tau_bar={tau_bar} exceeds the time window")
    if tau_start < 0 or tau_start > tau_bar:
        raise RangeError("need 0 <= tau_start <= tau_bar")


def shoot(bg: Background, params: FlowParams, v, tau_bar: float, tau_start: float = 0.0,
          q_start=None, tol: float = DEFAULT_TOL, variational: bool = False,
          stop_taus=()) -> GeodesicCurve:
    """Integrate the L_p-geodesic with tau^p gamma' = v at tau_start.

    ``stop_taus`` are times at which the integrator lands exactly; the states
    there are kept in ``curve.extra["stops"]``.
    """
    _check_inputs(bg, params, tau_bar, tau_start)
    n = bg.n
    v = np.asarray(v, dtype=float).reshape(1, n)
    x0 = params.base_point(bg) if q_start is None else np.asarray(q_start, float)
    bg.check_point(x0)
    s0 = float(s_of_tau(tau_start, params.p))
    s1 = float(s_of_tau(tau_bar, params.p))
    env = _envelope(bg, params, v, x0[None], tau_bar, s0)
    sysm = GeodesicSystem(bg, params.p, 1, variational=variational, envelope=env, s_start=s0)
    Y0 = sysm.initial_state(x0[None], v)
    stop_taus = np.atleast_1d(np.asarray(stop_taus, dtype=float))
    stops = s_of_tau(stop_taus, params.p) if stop_taus.size else ()
    Y, st, tags, dense, _ = integrate(sysm, s0, s1, Y0, rtol=tol, atol=tol, dense=True,
                                      stops=stops)
    extra = {}
    if stop_taus.size:
        extra["stops"] = (stop_taus, np.array([y[0] for y in st]),
                          np.array([t[0][0] for t in tags]), np.array([t[1][0] for t in tags]))
    if dense.s0.size == 0:
        nodes = np.array([s0])
        pos = Y0[:, :n]
        vel = Y0[:, n:2 * n]
        charts = np.zeros(1, dtype=int)
        from .integrate import Dense
        dense = Dense()
        dense.add(s0, s0 + 1e-300, Y0, sysm.rhs(s0, Y0), Y0, sysm.rhs(s0, Y0), sysm.tag())
        dense.finalize()
    else:
        nodes = np.concatenate([dense.s0, dense.s1[-1:]])
        ys = [y[0] for y in dense.y0] + [dense.y1[-1][0]]
        ys = np.array(ys)
        pos = ys[:, :n]
        vel = ys[:, n:2 * n]
        charts = np.array([t[0][0] for t in dense.tags] + [dense.tags[-1][0][0]])
    return GeodesicCurve(
        bg=bg, params=params, s_nodes=nodes, positions=pos, s_velocities=vel, charts=charts,
        v0=v[0] / (1 - params.p), interpolant=dense, system=sysm, s_start=s0, s_end=s1,
        final_state=Y[0], final_chart=int(sysm.charts[0]), final_orient=float(sysm.orient[0]),
        env_ratio=float(sysm.env_ratio[0]), tol=tol, extra=extra,
    )


def lp_exp(bg: Background, params: FlowParams, v, tau_bar: float, tol: float = DEFAULT_TOL):
    """Endpoint of the L_p-geodesic with initial datum v, in base-chart coordinates."""
    return shoot(bg, params, v, tau_bar, tol=tol).endpoint()


@dataclass
class BatchResult:
    """States of a batch of geodesics at requested stop values of tau."""

    taus: np.ndarray
    x: np.ndarray          # (T, B, n) in the active chart
    u: np.ndarray          # (T, B, n) s-velocities
    curv: np.ndarray       # (T, B) curvature part of the action
    kin: np.ndarray        # (T, B) kinetic part
    M: Optional[np.ndarray]
    N: Optional[np.ndarray]
    charts: np.ndarray     # (T, B)
    orient: np.ndarray     # (T, B)
    first_conj_s: Optional[np.ndarray]
    env_ratio: np.ndarray

    def base_x(self, bg, k):
        return to_base_chart(bg, self.x[k], self.charts[k])


def shoot_batch(bg: Background, params: FlowParams, V, taus, *, x0=None, variational=False,
                tol: float = DEFAULT_TOL, monitor=False, groups=None, check_envelope=True,
                tau_start: float = 0.0):
    """Integrate many geodesics from the base point (or ``x0`` at ``tau_start``)
    and sample them at ``taus``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    B, n = V.shape
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if np.any(np.diff(taus) < 0):
        raise ValueError("taus must be nondecreasing")
    _check_inputs(bg, params, float(taus[-1]), tau_start)
    p = params.p
    x0 = params.base_point(bg) if x0 is None else np.asarray(x0, float)
    X0 = np.broadcast_to(x0, (B, n))
    s0 = float(s_of_tau(tau_start, p))
    env = _envelope(bg, params, V, X0, float(taus[-1]), s0) if check_envelope else None
    sysm = GeodesicSystem(bg, p, B, variational=variational, envelope=env,
                          monitor=monitor, groups=groups, s_start=s0)
    Y0 = sysm.initial_state(X0, V)
    stops = s_of_tau(taus, p)
    _, states, tags, _, _ = integrate(sysm, s0, float(stops[-1]), Y0, rtol=tol, atol=tol,
                                      stops=stops)
    S = np.array(states)
    T = len(states)
    return BatchResult(
        taus=taus,
        x=S[:, :, sysm.X], u=S[:, :, sysm.U], curv=S[:, :, sysm.CURV], kin=S[:, :, sysm.KIN],
        M=S[:, :, sysm.M].reshape(T, B, n, n) if variational else None,
        N=S[:, :, sysm.N].reshape(T, B, n, n) if variational else None,
        charts=np.array([t[0] for t in tags]), orient=np.array([t[1] for t in tags]),
        first_conj_s=sysm.first_conj.copy() if sysm.monitor else None,
        env_ratio=sysm.env_ratio.copy(),
    )


# ---------------------------------------------------------------------------
@dataclass
class JacobianRecord:
    """d(exp)/dv at tau and the normalized Jacobian J_p.

    ``matrix`` is expressed in base-chart coordinates when the endpoint lies
    in the base chart (otherwise in the active chart, see ``chart``).  ``jp``
    uses the g(p0, 0) volume on the tangent space, which makes it
    chart-independent.
    """

    matrix: np.ndarray
    jp: float
    conjugate_times: list
    chart: int = 0
    mode: str = "variational"


def _jp_from(bg, params, x, M, chart, orient, tau):
    n = bg.n
    g = bg.fields("metric", x[None], np.array([tau]))["g"][0]
    x0 = params.base_point(bg)
    g0 = bg.fields("metric", x0[None], np.array([0.0]))["g"][0]
    return float(orient * math.sqrt(np.linalg.det(g) / np.linalg.det(g0)) * np.linalg.det(M.reshape(n, n)))


def conjugate_times_dense(curve: GeodesicCurve, samples: int = 8) -> list:
    """Conjugate times (tau values) along a variational curve.

    A conjugate time is a sign change of the chart-invariant determinant
    sqrt(det g) det(dx/dv), or a point where |det| drops below 1e-10 of its
    running maximum; both are refined to 1e-8 in s.
    """
    if not curve.variational:
        raise CapabilityError("conjugate scan needs a variational curve")
    sysm = curve.system
    bg = curve.bg
    dn = curve.interpolant
    n = bg.n
    p = curve.p

    def D_at(s_arr, k):
        s_arr = np.atleast_1d(s_arr)
        y, _ = hermite(dn.s0[k], dn.s1[k], dn.y0[k][0], dn.f0[k][0], dn.y1[k][0], dn.f1[k][0],
                       s_arr[:, None])
        tau = tau_of_s(s_arr, p)
        g = bg.fields("metric", y[:, :n], tau)["g"]
        M = y[:, sysm.M].reshape(-1, n, n)
        orient = dn.tags[k][1][0]
        return orient * np.sqrt(np.linalg.det(g)) * np.linalg.det(M)

    found = []
    runmax = 0.0
    prev = None
    for k in range(len(dn.s1)):
        a, b = dn.s0[k], dn.s1[k]
        ss = np.linspace(a, b, samples + 1)
        if k == 0:
            ss = ss[1:]
        D = D_at(ss, k)
        if k == 0:
            prev_s, prev_D = a, 0.0
        else:
            prev_s, prev_D = prev
        all_s = np.concatenate([[prev_s], ss])
        all_D = np.concatenate([[prev_D], D])
        for i in range(1, len(all_s)):
            s_lo, s_hi = all_s[i - 1], all_s[i]
            D_lo, D_hi = all_D[i - 1], all_D[i]
            runmax = max(runmax, abs(D_lo))
            if D_lo * D_hi < 0:
                lo, hi = s_lo, s_hi
                while hi - lo > 1e-8 * max(1.0, hi):
                    mid = 0.5 * (lo + hi)
                    if D_at(mid, k)[0] * D_lo < 0:
                        hi = mid
                    else:
                        lo = mid
                found.append(0.5 * (lo + hi))
            elif runmax > 0 and abs(D_hi) < 1e-10 * runmax:
                found.append(s_hi)
        # interior local minima of |D| that may hide an even-order zero
        absD = np.abs(all_D)
        for i in range(1, len(all_s) - 1):
            if absD[i] <= absD[i - 1] and absD[i] <= absD[i + 1] and runmax > 0 \
                    and absD[i] < 1e-2 * runmax and all_D[i - 1] * all_D[i + 1] > 0:
                lo, hi = all_s[i - 1], all_s[i + 1]
                gr = (math.sqrt(5) - 1) / 2
                c1, c2 = hi - gr * (hi - lo), lo + gr * (hi - lo)
                f1, f2 = abs(D_at(c1, k)[0]), abs(D_at(c2, k)[0])
                while hi - lo > 1e-9 * max(1.0, hi):
                    if f1 < f2:
                        hi, c2, f2 = c2, c1, f1
                        c1 = hi - gr * (hi - lo)
                        f1 = abs(D_at(c1, k)[0])
                    else:
                        lo, c1, f1 = c1, c2, f2
                        c2 = lo + gr * (hi - lo)
                        f2 = abs(D_at(c2, k)[0])
                if min(f1, f2) < 1e-10 * runmax:
                    found.append(0.5 * (lo + hi))
        prev = (ss[-1], D[-1])
    # merge duplicates
    found = sorted(found)
    merged = []
    for s in found:
        if not merged or s - merged[-1] > 1e-6 * max(1.0, s):
            merged.append(s)
    return [float(tau_of_s(s, p)) for s in merged]


def exp_jacobian(bg: Background, params: FlowParams, v, tau_bar: float,
                 mode: str = "fd_bundle", tol: float = DEFAULT_TOL) -> JacobianRecord:
    """Jacobian of the L_p-exponential map at v, and J_p(v, tau_bar)."""
    n = bg.n
    v = np.asarray(v, dtype=float)
    if mode == "variational":
        curve = shoot(bg, params, v, tau_bar, tol=tol, variational=True)
        sysm = curve.system
        Y = curve.final_state
        x = Y[:n]
        M = Y[sysm.M].reshape(n, n)
        jp = _jp_from(bg, params, x, M, curve.final_chart, curve.final_orient, tau_bar)
        if curve.final_chart:
            M = Sphere.inversion_jacobian(x) @ M
            chart = 0 if np.linalg.norm(x) > 0 else 1
        else:
            chart = 0
        conj = conjugate_times_dense(curve)
        return JacobianRecord(matrix=M, jp=jp, conjugate_times=conj, chart=chart, mode=mode)
    if mode != "fd_bundle":
        raise ValueError(f"unknown Jacobian mode {mode!r}")
    h = 1e-5 * max(1.0, float(np.linalg.norm(v)))
    V = np.repeat(v[None], 2 * n + 1, axis=0)
    for j in range(n):
        V[1 + 2 * j, j] += h
        V[2 + 2 * j, j] -= h
    groups = np.zeros(2 * n + 1, dtype=int)
    x0 = params.base_point(bg)
    sysm = GeodesicSystem(bg, params.p, 2 * n + 1, groups=groups)
    Y0 = sysm.initial_state(np.broadcast_to(x0, (2 * n + 1, n)), V)
    s1 = float(s_of_tau(tau_bar, params.p))
    Y, _, _, dense, _ = integrate(sysm, 0.0, s1, Y0, rtol=tol, atol=tol, dense=True)
    X = Y[:, :n]
    M = np.column_stack([(X[1 + 2 * j] - X[2 + 2 * j]) / (2 * h) for j in range(n)])
    chart = int(sysm.charts[0])
    jp = _jp_from(bg, params, X[0], M, chart, sysm.orient[0], tau_bar)
    if chart:
        M = Sphere.inversion_jacobian(X[0]) @ M
    # conjugate scan on the bundle's shared step grid
    def D_at(s, k):
        y, _ = hermite(dense.s0[k], dense.s1[k], dense.y0[k], dense.f0[k], dense.y1[k],
                       dense.f1[k], s)
        Mk = np.column_stack([(y[1 + 2 * j, :n] - y[2 + 2 * j, :n]) / (2 * h) for j in range(n)])
        g = bg.fields("metric", y[:1, :n], np.array([float(tau_of_s(s, params.p))]))["g"][0]
        return dense.tags[k][1][0] * math.sqrt(np.linalg.det(g)) * np.linalg.det(Mk)

    conj = []
    prev = None
    runmax = 0.0
    for k in range(len(dense.s1)):
        for s in (0.5 * (dense.s0[k] + dense.s1[k]), dense.s1[k]):
            D = D_at(s, k)
            if prev is not None and prev[1] * D < 0:
                lo, hi, D_lo = (prev[0] if prev[2] == k else dense.s0[k]), s, prev[1]
                while hi - lo > 1e-8 * max(1.0, hi):
                    mid = 0.5 * (lo + hi)
                    if D_at(mid, k) * D_lo < 0:
                        hi = mid
                    else:
                        lo = mid
                conj.append(float(tau_of_s(0.5 * (lo + hi), params.p)))
            elif prev is not None and runmax > 0 and abs(D) < 1e-10 * runmax:
                conj.append(float(tau_of_s(s, params.p)))
            runmax = max(runmax, abs(D))
            prev = (s, D, k)
    return JacobianRecord(matrix=M, jp=jp, conjugate_times=conj, chart=chart, mode=mode)


# ---------------------------------------------------------------------------
def jacobi_residual(curve: GeodesicCurve, Y_nodes, s_nodes=None) -> float:
    """Sup-norm (in g(tau)) of the Jacobi-equation residual of a field along ``curve``.

    ``Y_nodes`` has shape (N, 3, n) holding Y, dY/ds and d^2Y/ds^2 in the
    chart active on the curve at each of ``s_nodes`` (default: curve nodes),
    or shape (N, n) with values only, in which case s-derivatives come from
    a cubic spline.  The operator is

        nabla_s nabla_s Y + Rm(Y, X) X - a(s) Hess R(Y)
            + b(s) [(nabla_Y Ric)(X) + Ric(nabla_s Y)] - (dtau/ds) (d_tau Gamma)(X, Y)

    The last term is the contribution of the moving connection; it vanishes
    for backgrounds whose Levi-Civita connection is constant in tau.
    """
    bg = curve.bg
    n = bg.n
    p = curve.p
    if not bg.supports("riemann"):
        raise CapabilityError("jacobi_residual needs the riemann jet field")
    s_nodes = curve.s_nodes if s_nodes is None else np.asarray(s_nodes, float)
    Yn = np.asarray(Y_nodes, dtype=float)
    if Yn.ndim == 2:
        from scipy.interpolate import CubicSpline
        cs = CubicSpline(s_nodes, Yn, axis=0)
        Yn = np.stack([Yn, cs(s_nodes, 1), cs(s_nodes, 2)], axis=1)
    worst = 0.0
    sysm = curve.system
    for i, s in enumerate(s_nodes):
        y, dy, chart, _ = curve.state(s)
        x, u = y[:n], y[n:2 * n]
        du = dy[n:2 * n]
        tau, a, b = sysm.coeffs(s)
        dtau = max(s, 0.0) ** (p / (1 - p)) / (1 - p)
        f = bg.fields("curv", x[None], np.array([tau]))
        lin = bg.fields("lin", x[None], np.array([tau]))
        f = {k: v[0] for k, v in f.items()}
        gam = f["christoffel"]
        dgam = lin["d_christoffel"][0]
        gamt = f["christoffel_dtau"]
        Y, Yp, Ypp = Yn[i]
        nsY = Yp + np.einsum("kij,i,j->k", gam, u, Y)
        d_nsY = (Ypp + np.einsum("mkij,m,i,j->k", dgam, u, u, Y) * 1.0
                 + dtau * np.einsum("kij,i,j->k", gamt, u, Y)
                 + np.einsum("kij,i,j->k", gam, du, Y) + np.einsum("kij,i,j->k", gam, u, Yp))
        nnY = d_nsY + np.einsum("kij,i,j->k", gam, u, nsY)
        RYX = np.einsum("lijk,i,j,k->l", f["riemann"], Y, u, u)
        ginv = f["g_inv"]
        hess = ginv @ (f["hess_R"] @ Y)
        dric = ginv @ (np.einsum("mij,m,i->j", f["nabla_ric"], Y, u) + f["ric"] @ nsY)
        corr = dtau * np.einsum("kij,i,j->k", gamt, u, Y)
        res = nnY + RYX - a * hess + b * dric - corr
        worst = max(worst, float(math.sqrt(max(res @ f["g"] @ res, 0.0))))
    return worst


def variational_columns(curve: GeodesicCurve):
    """(s_nodes, fields) with fields[c] of shape (N, 3, n) for each column of dx/dv."""
    if not curve.variational:
        raise CapabilityError("curve was not integrated in variational mode")
    n = curve.bg.n
    sysm = curve.system
    s_nodes = curve.s_nodes
    cols = []
    for c in range(n):
        rows = []
        for s in s_nodes:
            y, dy, _, _ = curve.state(s)
            M = y[sysm.M].reshape(n, n)
            N = y[sysm.N].reshape(n, n)
            dN = dy[sysm.N].reshape(n, n)
            rows.append(np.stack([M[:, c], N[:, c], dN[:, c]]))
        cols.append(np.array(rows))
    return s_nodes, cols


def speed_envelope(curve: GeodesicCurve, s):
    """Upper envelope for |x'(s)|^2_g along ``curve``."""
    p = curve.p
    K1 = curve.bg.K1(curve.tau_bar)
    _, C2, C3 = envelope_constants(K1, p)
    v2 = float(curve.system.envelope[2][0]) if curve.system.envelope is not None else 0.0
    sr = np.maximum(np.asarray(s, float) - curve.s_start, 0.0)
    return np.exp(C2 * sr ** (1 / (1 - p))) * (v2 + C3 * sr ** ((1 + 2 * p) / (1 - p)))


def richardson(values, h, powers):
    """Extrapolate values(h) to h -> 0 eliminating the listed powers of h.

    ``h`` must halve from one entry to the next.
    """
    T = [np.asarray(values, dtype=float)]
    h = np.asarray(h, dtype=float)
    for k, q in enumerate(powers):
        prev = T[-1]
        if prev.size < 2:
            break
        f = 2.0 ** q
        T.append((f * prev[1:] - prev[:-1]) / (f - 1.0))
    return float(T[-1][-1]), T


def jacobian_limit(bg: Background, params: FlowParams, v, s_max: float = 0.02, levels: int = 5,
                   tol: float = 1e-12) -> dict:
    """tau^{-(1-p)n} J_p(v, tau) as tau -> 0, by Richardson extrapolation in s.

    In s the normalized Jacobian expands in integer powers of s near 0, so
    samples at s_max / 2^k are combined to cancel s, s^2, ... terms.
    """
    p, n = params.p, bg.n
    v = np.atleast_2d(np.asarray(v, dtype=float))
    s = s_max / 2.0 ** np.arange(levels)
    taus = np.sort(tau_of_s(s, p))
    br = shoot_batch(bg, params, v, taus, variational=True, tol=tol, check_envelope=False)
    x0 = params.base_point(bg)
    g0 = bg.fields("metric", x0[None], np.array([0.0]))["g"][0]
    out = []
    for b in range(v.shape[0]):
        vals = []
        for k, t in enumerate(taus):
            g = bg.fields("metric", br.x[k, b][None], np.array([t]))["g"][0]
            J = br.orient[k, b] * math.sqrt(np.linalg.det(g) / np.linalg.det(g0)) * np.linalg.det(br.M[k, b])
            vals.append(t ** (-(1 - p) * n) * J)
        vals = np.array(vals[::-1])       # largest s first
        est, _ = richardson(vals, s, powers=range(1, levels))
        out.append((est, vals))
    target = (1 - p) ** (-n)
    est = np.array([o[0] for o in out])
    return {"limit": est, "raw": np.array([o[1] for o in out]), "s": s, "target": target,
            "error": np.abs(est - target) / target}
