"""Two-point problem for the L_p-length: multi-start shooting and derived fields.

The solver runs Levenberg-Marquardt on F(v) = exp(v) - q for a whole batch of
starts at once; every residual evaluation is one batched integration of the
geodesic and its linearization.  A coarse pass at a loose integrator
tolerance finds the basins, a polish pass refines one representative per
basin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as sint
from scipy.stats import norm, qmc

from .action import ActionValue, curve_H_integrals, lp_bounds, lp_length
from .backgrounds import Background, FlowParams, Sphere
from .errors import DomainError, InternalBoundError, NonConvergenceError, UnsupportedError
from .geodesics import (DEFAULT_TOL, GeodesicCurve, conjugate_times_dense, envelope_constants,
                        s_of_tau, shoot, shoot_batch, vector_to_base)

CLUSTER_TOL = 1e-6
TIE_TOL = 1e-8


# ---------------------------------------------------------------------------
# great-circle oracle for the round sphere
def _sphere_parts(bg: Sphere, p: float, tau: float):
    """(int_0^tau rho^p R, int_0^tau rho^-p / c) by adaptive quadrature in s."""
    if tau == 0:
        return 0.0, 0.0
    s1 = tau ** (1 - p)
    n, a = bg.n, bg.a

    def rho(s):
        return s ** (1 / (1 - p))

    # rho^p R drho = s^{2p/(1-p)} R / (1-p) ds ; rho^-p / c drho = ds / ((1-p) c)
    f_curv = lambda s: s ** (2 * p / (1 - p)) * n / (2 * (rho(s) + a)) / (1 - p)
    f_inv = lambda s: 1.0 / ((1 - p) * 2 * (n - 1) * (rho(s) + a))
    curv = sint.quad(f_curv, 0.0, s1, epsabs=0, epsrel=1e-13, limit=200)[0]
    inv = sint.quad(f_inv, 0.0, s1, epsabs=0, epsrel=1e-13, limit=200)[0]
    return curv, inv


def great_circle_oracle(bg: Sphere, p: float, theta, tau: float) -> dict:
    """L_p and l_p to a point at polar angle theta, from the 1-D reduction.

    R is constant in space, so along a great circle the action splits into
    int rho^p R plus the kinetic term, whose minimum over angle profiles with
    phi(0) = 0, phi(tau) = theta is theta^2 / I with I = int rho^-p / c.
    """
    if not isinstance(bg, Sphere):
        raise UnsupportedError("the great-circle oracle needs a round sphere")
    theta = np.asarray(theta, dtype=float)
    curv, inv = _sphere_parts(bg, p, tau)
    L = curv + theta ** 2 / inv
    c0 = float(bg.c(0.0))
    return {"L_p": L, "l_p": (1 - p) * L / tau ** (1 - p), "curvature_part": curv, "I": inv,
            "speed0": theta / (inv * math.sqrt(c0))}


def great_circle_datum(bg: Sphere, p: float, theta: float, direction, tau: float) -> np.ndarray:
    """Chart components of the initial datum whose geodesic sweeps angle theta along direction."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    _, inv = _sphere_parts(bg, p, tau)
    c0 = float(bg.c(0.0))
    # |v|_{g(p0,0)} = theta / (I sqrt(c0)); the chart metric at the origin is 4 c0 delta
    return theta / (2 * c0 * inv) * d


# ---------------------------------------------------------------------------
@dataclass
class ReducedSolution:
    """Minimizing initial datum and action for the two-point problem."""

    q: np.ndarray
    tau_bar: float
    v_star: np.ndarray
    value: ActionValue
    basin_count: int
    conjugate_free: bool
    in_omega: bool
    curve: GeodesicCurve = None
    clusters: list = field(default_factory=list)
    residual: float = 0.0
    tau_start: float = 0.0
    conjugate_times: list = field(default_factory=list)
    separations: list = field(default_factory=list)
    v_max: float = 0.0
    v_max_capped: bool = False

    def row(self) -> dict:
        return {"q": list(map(float, self.q)), "tau_bar": self.tau_bar,
                "v_star": list(map(float, self.v_star)), "L_p": self.value.L_p,
                "l_p": self.value.l_p, "basin_count": self.basin_count,
                "conjugate_free": self.conjugate_free, "in_omega": self.in_omega}


class _Shooter:
    """Residual and Jacobian of v -> exp(v) - q for per-member targets."""

    def __init__(self, bg, params, tau_bar, tol, tau_start=0.0, x0=None):
        self.bg = bg
        self.params = params
        self.tau_bar = tau_bar
        self.tol = tol
        self.tau_start = tau_start
        self.x0 = x0
        self.evals = 0

    def target(self, Q):
        """Comparison chart and target coordinates per member."""
        Q = np.atleast_2d(np.asarray(Q, float))
        if not self.bg.has_charts:
            return np.zeros(len(Q), dtype=int), Q
        far = np.einsum("bi,bi->b", Q, Q) > 1.0
        Qc = Q.copy()
        Qc[far] = Sphere.invert(Q[far])
        return far.astype(int), Qc

    def _run(self, V):
        br = shoot_batch(self.bg, self.params, V, [self.tau_bar], variational=True, tol=self.tol,
                         check_envelope=False, tau_start=self.tau_start, x0=self.x0)
        return br.x[0], br.M[0], br.charts[0], br.curv[0] + br.kin[0]

    def _safe(self, V):
        try:
            return self._run(V)
        except Exception:
            if len(V) == 1:
                n = V.shape[1]
                return (np.full((1, n), np.nan), np.full((1, n, n), np.nan), np.zeros(1, int),
                        np.full(1, np.nan))
            h = len(V) // 2
            a, b = self._safe(V[:h]), self._safe(V[h:])
            return tuple(np.concatenate([u, w]) for u, w in zip(a, b))

    def __call__(self, V, cc, Qc):
        self.evals += 1
        x, M, ch, L = self._safe(np.asarray(V, float))
        if self.bg.has_charts:
            swap = ch != cc
            if np.any(swap):
                x = x.copy()
                M = M.copy()
                Jinv = Sphere.inversion_jacobian(x[swap])
                M[swap] = np.einsum("bij,bjk->bik", Jinv, M[swap])
                x[swap] = Sphere.invert(x[swap])
        r = x - Qc
        bad = ~np.all(np.isfinite(r), axis=1) | ~np.all(np.isfinite(M), axis=(1, 2))
        r[bad] = np.inf
        return r, M, L


def _lm(shooter, V0, cc, Qc, ftol, max_iter=40, vnorm=None, vlim=np.inf):
    """Batched Levenberg-Marquardt; returns (V, |r|, L, converged).

    Trial points with vnorm(v) > vlim count as rejected steps, which keeps
    starts from wandering off to high windings.
    """
    V = np.array(V0, dtype=float)
    S, n = V.shape
    r, J, L = shooter(V, cc, Qc)
    res = np.linalg.norm(r, axis=1)
    lam = np.full(S, 1e-3)
    active = np.isfinite(res) & (res > ftol)
    stall = np.zeros(S, dtype=int)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        Ji, ri = J[idx], r[idx]
        A = np.einsum("bki,bkj->bij", Ji, Ji)
        g = np.einsum("bki,bk->bi", Ji, ri)
        D = np.einsum("bii->bi", A) + 1e-14
        lhs = A + lam[idx, None, None] * np.einsum("bi,ij->bij", D, np.eye(n))
        try:
            step = -np.linalg.solve(lhs, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([-np.linalg.lstsq(m, gg, rcond=None)[0] for m, gg in zip(lhs, g)])
        Vt = V[idx] + step
        inside = np.ones(len(idx), dtype=bool) if vnorm is None else vnorm(Vt) <= vlim
        rest = np.full(len(idx), np.inf)
        rt = np.full_like(Vt, np.inf)
        Jt = np.full((len(idx), n, n), np.nan)
        Lt = np.full(len(idx), np.nan)
        if np.any(inside):
            rt[inside], Jt[inside], Lt[inside] = shooter(Vt[inside], cc[idx][inside], Qc[idx][inside])
            rest[inside] = np.linalg.norm(rt[inside], axis=1)
        better = rest < res[idx]
        acc = idx[better]
        V[acc], r[acc], J[acc], L[acc], res[acc] = Vt[better], rt[better], Jt[better], Lt[better], rest[better]
        lam[acc] = np.maximum(lam[acc] / 5, 1e-12)
        rej = idx[~better]
        lam[rej] *= 8
        small_step = np.linalg.norm(step, axis=1) <= 1e-13 * (1 + np.linalg.norm(Vt, axis=1))
        stall[idx] = np.where(better & ~small_step, 0, stall[idx] + 1)
        active = active & (res > ftol) & (lam < 1e12) & (stall < 6)
    return V, res, L, res <= ftol


def _cluster(V, L, tol):
    """Greedy clustering of converged roots in v; returns [(v, L, count)] sorted by L."""
    order = np.argsort(L, kind="stable")
    reps = []
    for i in order:
        for rep in reps:
            if np.linalg.norm(V[i] - rep[0]) <= tol * (1 + np.linalg.norm(rep[0])):
                rep[2] += 1
                break
        else:
            reps.append([V[i].copy(), float(L[i]), 1])
    return reps


def _frame(bg, params, tau_start=0.0, x0=None):
    """Coordinate components of a g(x0, tau_start)-orthonormal frame."""
    x0 = params.base_point(bg) if x0 is None else np.asarray(x0, float)
    g0 = bg.fields("metric", x0[None], np.array([tau_start]))["g"][0]
    w, U = np.linalg.eigh(g0)
    return U @ np.diag(w ** -0.5) @ U.T


def v_max_estimate(bg, params, q, tau_bar):
    """Radius of the start ball in the g(p0,0)-norm and whether it was capped.

    A minimizer has L_p <= upper, so its kinetic part is at most upper plus the
    negative part of the curvature integral; the lower speed estimate then
    bounds |v|^2 by e^{C2 tau} ((1-p) kin / tau^{1-p} + C3' (1-p) tau^{1+2p} / (2+p)).
    """
    p, n = params.p, bg.n
    c1, c2 = bg.ricci_bounds(tau_bar)
    lower, upper = lp_bounds(bg, params, q, tau_bar, c1, c2)
    if upper < lower - 1e-12 * max(1.0, abs(upper)):
        raise InternalBoundError(f"action bounds are inconsistent: upper {upper} < lower {lower}")
    _, C2, C3 = envelope_constants(bg.K1(tau_bar), p)
    C3p = (1 - p) ** 2 * C3
    kin = upper + c1 * n * tau_bar ** (p + 1) / (p + 1)
    with np.errstate(over="ignore"):
        v2 = math.exp(min(C2 * tau_bar, 700.0)) * (
            (1 - p) * kin / tau_bar ** (1 - p) + C3p * (1 - p) / (2 + p) * tau_bar ** (1 + 2 * p))
    bound = math.sqrt(max(v2, 0.0))
    l_up = max((1 - p) * upper / tau_bar ** (1 - p), 0.0)
    cap = 2.0 * math.sqrt(l_up) + 1.0
    if bound > cap:
        return cap, True
    return max(bound, 1e-12), False


def _starts(bg, params, q, tau_bar, count, seed, v_max, tau_start, x0):
    n = bg.n
    p = params.p
    x0v = params.base_point(bg) if x0 is None else np.asarray(x0, float)
    s0, s1 = float(s_of_tau(tau_start, p)), float(s_of_tau(tau_bar, p))
    out = [(1 - p) * (np.asarray(q, float) - x0v) / (s1 - s0)]
    if isinstance(bg, Sphere) and tau_start == 0 and np.linalg.norm(x0v) == 0:
        # the m = 0 great-circle datum replaces the straight-chart guess, which
        # is far too fast for targets near the antipode (|q| large in the chart)
        out = []
        qn = np.linalg.norm(q)
        d = q / qn if qn > 0 else np.eye(n)[0]
        th = float(Sphere.polar_angle(q))
        for m in (0, -1, 1):
            alpha = th + 2 * math.pi * m
            out.append(great_circle_datum(bg, p, abs(alpha), d if alpha >= 0 else -d, tau_bar))
    k = max(count - len(out), 0)
    if k:
        E = _frame(bg, params, tau_start, x0v)
        sob = qmc.Sobol(d=n + 1, scramble=True, seed=seed)
        u = sob.random_base2(max(1, math.ceil(math.log2(k))))[:k]
        z = norm.ppf(np.clip(u[:, :n], 1e-12, 1 - 1e-12))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        w = z * (v_max * u[:, n:] ** (1.0 / n))
        out.extend(w @ E.T)
    return np.array(out)


def solve_lp(bg: Background, params: FlowParams, q, tau_bar: float, tau_start: float = 0.0,
             starts: int = 32, *, q_start=None, seed: int = 0, tol: float = DEFAULT_TOL,
             coarse_tol: float = 1e-7) -> ReducedSolution:
    """L_p(q, tau_bar) by multi-start shooting.

    Starts: the straight-chart guess, great-circle windings on the sphere, and
    a scrambled Sobol sample of the ball |v| <= V_max.  Converged roots are
    clustered at 1e-6 in v; the least-action cluster is the minimizer.
    """
    q = np.asarray(q, dtype=float)
    bg.check_point(q)
    n = bg.n
    p = params.p
    x0 = None if q_start is None else np.asarray(q_start, float)
    if tau_start == 0 and x0 is None:
        v_max, capped = v_max_estimate(bg, params, q, tau_bar)
    else:
        xs = params.base_point(bg) if x0 is None else x0
        s0, s1 = float(s_of_tau(tau_start, p)), float(s_of_tau(tau_bar, p))
        v_max, capped = 2.0 * (1 - p) * float(np.linalg.norm(q - xs)) / (s1 - s0) + 1.0, True
    V0 = _starts(bg, params, q, tau_bar, starts, seed, v_max, tau_start, x0)
    S = len(V0)
    Q = np.broadcast_to(q, (S, n))

    Einv = np.linalg.inv(_frame(bg, params, tau_start, x0))
    vnorm = lambda V: np.linalg.norm(V @ Einv.T, axis=1)
    vlim = 2.0 * max(v_max, float(np.max(vnorm(V0))))

    coarse = _Shooter(bg, params, tau_bar, coarse_tol, tau_start, x0)
    cc, Qc = coarse.target(Q)
    scale = 1 + float(np.linalg.norm(Qc[0]))
    V, res, L, ok = _lm(coarse, V0, cc, Qc, ftol=100 * coarse_tol * scale, vnorm=vnorm, vlim=vlim)
    if not np.any(ok):
        raise NonConvergenceError("no start converged in the coarse pass",
                                  best_residual=float(np.nanmin(res)))
    reps = _cluster(V[ok], L[ok], 1e-4)

    fine = _Shooter(bg, params, tau_bar, tol * 0.1, tau_start, x0)
    Vr = np.array([r[0] for r in reps])
    k = len(Vr)
    ccr, Qcr = fine.target(Q[:k])
    Vf, resf, Lf, okf = _lm(fine, Vr, ccr, Qcr, ftol=10 * tol * scale)
    if not np.any(okf):
        raise NonConvergenceError("no basin polished to the shooting tolerance",
                                  best_residual=float(np.nanmin(resf)))
    counts = np.array([r[2] for r in reps])
    final = _cluster(Vf[okf], Lf[okf], CLUSTER_TOL)
    # carry basin sizes through the polish step
    clusters = []
    for v, Lv, _ in final:
        members = [i for i in np.nonzero(okf)[0]
                   if np.linalg.norm(Vf[i] - v) <= CLUSTER_TOL * (1 + np.linalg.norm(v))]
        clusters.append({"v": v, "L_p": Lv, "starts": int(counts[members].sum())})
    best = clusters[0]
    Lmin = best["L_p"]
    separations = [c["L_p"] - Lmin for c in clusters[1:]]
    unique = all(sep > TIE_TOL * max(1.0, abs(Lmin)) for sep in separations)

    curve = shoot(bg, params, best["v"], tau_bar, tau_start=tau_start, q_start=x0, tol=tol,
                  variational=True)
    conj = conjugate_times_dense(curve)
    conj_free = not any(t <= tau_bar * (1 + 1e-12) for t in conj)
    # the integrator's action accumulators; lp_length re-integrates the dense output,
    # whose cubic interpolant loses accuracy where s^{p/(1-p)} is not smooth at s = 0
    fs = curve.final_state
    value = ActionValue.from_parts(fs[curve.system.CURV], fs[curve.system.KIN], tau_bar, p)
    resid = float(np.linalg.norm(curve.endpoint() - q))
    return ReducedSolution(
        q=q, tau_bar=float(tau_bar), v_star=best["v"], value=value, basin_count=len(clusters),
        conjugate_free=conj_free, in_omega=bool(unique and conj_free), curve=curve,
        clusters=clusters, residual=resid, tau_start=float(tau_start), conjugate_times=conj,
        separations=separations, v_max=v_max, v_max_capped=capped,
    )


def local_solve(bg: Background, params: FlowParams, Q, tau_bar: float, V_guess, *,
                tol: float = 1e-11, max_iter: int = 40):
    """Continue a known minimizer to nearby targets (one LM start per target).

    Returns (V, L_p) arrays.  Used for finite-difference stencils and scans,
    where each target lies in the basin of the guess.
    """
    Q = np.atleast_2d(np.asarray(Q, float))
    V_guess = np.atleast_2d(np.asarray(V_guess, float))
    if len(V_guess) == 1 and len(Q) > 1:
        V_guess = np.repeat(V_guess, len(Q), axis=0)
    sh = _Shooter(bg, params, tau_bar, tol)
    cc, Qc = sh.target(Q)
    scale = 1 + np.max(np.linalg.norm(Qc, axis=1))
    V, res, L, ok = _lm(sh, V_guess, cc, Qc, ftol=10 * tol * scale, max_iter=max_iter)
    if not np.all(ok):
        raise NonConvergenceError("continuation lost a stencil target",
                                  best_residual=float(np.max(res)))
    return V, L


# ---------------------------------------------------------------------------
def _endpoint_data(sol: ReducedSolution):
    """(q, u, g) at the endpoint, with the s-velocity in base-chart components."""
    curve = sol.curve
    bg = curve.bg
    n = bg.n
    x = curve.final_state[:n]
    u = curve.final_state[n:2 * n]
    u = vector_to_base(bg, x, u, curve.final_chart)
    q = sol.q
    f = bg.fields("curv", q[None], np.array([sol.tau_bar]))
    return q, u, {k: v[0] for k, v in f.items()}


def _require_omega(sol):
    if not sol.in_omega:
        raise DomainError("the endpoint is not in the injectivity domain")
    if sol.tau_start != 0:
        raise DomainError("derived fields are defined for solutions starting at the base point")


def grad_L_check(sol: ReducedSolution, h: float = None) -> dict:
    """Compare dL_p = 2 tau^p g(X, .) at the endpoint with central differences over q.

    In s-components 2 tau^p g(X, .) = 2 (1-p) g(u, .).
    """
    _require_omega(sol)
    bg = sol.curve.bg
    params = sol.curve.params
    p, n = params.p, bg.n
    q, u, f = _endpoint_data(sol)
    analytic = 2 * (1 - p) * f["g"] @ u
    h = 1e-3 * (1 + float(np.linalg.norm(q))) if h is None else h
    Q = np.concatenate([q + h * np.eye(n), q - h * np.eye(n)])
    Vg = sol.v_star + np.zeros((2 * n, n))
    _, L = local_solve(bg, params, Q, sol.tau_bar, Vg)
    fd = (L[:n] - L[n:]) / (2 * h)
    err = float(np.linalg.norm(fd - analytic))
    scale = float(np.linalg.norm(analytic))
    return {"analytic": analytic, "fd": fd, "abs_error": err,
            "rel_error": err / scale if scale > 0 else err, "h": h}


def laplacian_L_check(sol: ReducedSolution, b: float = 0.5, h: float = None) -> dict:
    """Delta L_p by a second-order stencil against the b = 1/2 upper bound.

    RHS = -2 tau^p R + n / (2 p tau^{1-p}) + (2p-1)/tau int rho^p R
          - 1/tau int rho^{p+1} H(X).
    """
    _require_omega(sol)
    bg = sol.curve.bg
    params = sol.curve.params
    p, n = params.p, bg.n
    if abs(b - 0.5) > 1e-15:
        raise UnsupportedError("only the b = 1/2 form of the Laplacian bound is implemented")
    if p + 2 * b - 1 <= 0:
        raise DomainError("need p + 2b - 1 > 0")
    tau = sol.tau_bar
    q, u, f = _endpoint_data(sol)
    h = 1e-2 * (1 + float(np.linalg.norm(q))) if h is None else h
    E = np.eye(n)
    pts = [q]
    for i in range(n):
        pts += [q + h * E[i], q - h * E[i]]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for i, j in pairs:
        pts += [q + h * (E[i] + E[j]), q + h * (E[i] - E[j]), q - h * (E[i] - E[j]),
                q - h * (E[i] + E[j])]
    Q = np.array(pts)
    # first-order continuation guess through the exponential-map Jacobian
    sysm = sol.curve.system
    M = sol.curve.final_state[sysm.M].reshape(n, n)
    if sol.curve.final_chart:
        M = Sphere.inversion_jacobian(sol.curve.final_state[:n]) @ M
    Vg = sol.v_star + np.linalg.solve(M, (Q - q).T).T
    _, L = local_solve(bg, params, Q, tau, Vg)
    L0 = L[0]
    H = np.zeros((n, n))
    grad = np.zeros(n)
    for i in range(n):
        Lp_, Lm_ = L[1 + 2 * i], L[2 + 2 * i]
        H[i, i] = (Lp_ - 2 * L0 + Lm_) / h ** 2
        grad[i] = (Lp_ - Lm_) / (2 * h)
    base = 1 + 2 * n
    for k, (i, j) in enumerate(pairs):
        a, b_, c, d = L[base + 4 * k: base + 4 * k + 4]
        H[i, j] = H[j, i] = (a - b_ - c + d) / (4 * h ** 2)
    gam = f["christoffel"]
    lap = float(np.einsum("ij,ij->", f["g_inv"], H - np.einsum("kij,k->ij", gam, grad)))
    R = float(f["scalar_R"])
    _, _, iR, iH = curve_H_integrals(sol.curve, tau)
    rhs = -2 * tau ** p * R + n / (2 * p * tau ** (1 - p)) + (2 * p - 1) / tau * iR - iH / tau
    return {"lhs": lap, "rhs": rhs, "slack": rhs - lap, "h": h}


def lp_values(bg: Background, params: FlowParams, Q, tau: float, tol: float = DEFAULT_TOL):
    """L_p at many targets from single straight (or great-circle) starts.

    Intended for scans over small neighbourhoods of the base point, where the
    minimizer is the continuation of the straight guess.
    """
    Q = np.atleast_2d(np.asarray(Q, float))
    p = params.p
    x0 = params.base_point(bg)
    if isinstance(bg, Sphere):
        V = []
        for q in Q:
            qn = np.linalg.norm(q)
            d = q / qn if qn > 0 else np.eye(bg.n)[0]
            V.append(great_circle_datum(bg, p, float(Sphere.polar_angle(q)), d, tau))
        V = np.array(V)
    else:
        V = (1 - p) * (Q - x0) / tau ** (1 - p)
    _, L = local_solve(bg, params, Q, tau, V, tol=tol)
    return L


def g_p_scan(bg: Background, params: FlowParams, tau_grid, grid_q, slack: float = 1e-6) -> dict:
    """G_p(tau) = min_q tau^{1-p} L_p(q, tau) - n tau / (2p) over grid_q, with a monotonicity test."""
    p, n = params.p, bg.n
    taus = np.asarray(tau_grid, float)
    rows = []
    for t in taus:
        L = lp_values(bg, params, grid_q, float(t))
        G = float(np.min(t ** (1 - p) * L) - n * t / (2 * p))
        rows.append({"tau": float(t), "G_p": G, "argmin": int(np.argmin(L))})
    ok = all(b["G_p"] <= a["G_p"] + slack * (1 + abs(a["G_p"])) for a, b in zip(rows, rows[1:]))
    return {"rows": rows, "decreasing": ok}


def min_lp_bound_check(bg: Background, params: FlowParams, tau: float, grid_q,
                       slack: float = 1e-6) -> dict:
    """min over grid_q of l_p(q, tau) against n(1-p) / (2p tau^{1-2p})."""
    p, n = params.p, bg.n
    L = lp_values(bg, params, grid_q, tau)
    lmin = float(np.min((1 - p) * L / tau ** (1 - p)))
    bound = n * (1 - p) / (2 * p * tau ** (1 - 2 * p))
    return {"min_l": lmin, "bound": bound, "slack": bound - lmin, "ok": lmin <= bound + slack}


def speed_bound_check(sol: ReducedSolution, samples: int = 10) -> dict:
    """R + |X|^2 <= (C1 + 2) L_p(gamma(tau), tau) / tau^{p+1} at interior times, C1 = max(1-p, p).

    L_p(gamma(tau), tau) is the action of the restriction, which is minimizing
    by the restriction principle.
    """
    curve = sol.curve
    bg, p = curve.bg, curve.p
    n = bg.n
    C1 = max(1 - p, p)
    rows = []
    for t in sol.tau_bar * (np.arange(1, samples + 1) / (samples + 1)):
        s = float(s_of_tau(t, p))
        y, _, _, _ = curve.state(s)
        x, u = y[:n], y[n:2 * n]
        f = bg.fields("rhs", x[None], np.array([t]))
        X2 = (1 - p) ** 2 * t ** (-2 * p) * float(u @ f["g"][0] @ u)
        lhs = float(f["scalar_R"][0]) + X2
        L = lp_length(curve, tau_hi=t).L_p
        rhs = (C1 + 2) * L / t ** (p + 1)
        rows.append({"tau": float(t), "lhs": lhs, "rhs": rhs, "slack": rhs - lhs})
    return {"rows": rows, "min_slack": min(r["slack"] for r in rows)}


def gradient_bound_check(sol: ReducedSolution) -> dict:
    """|grad l_p|^2 <= 4(1-p)(C1+2) tau^{-2(1-p)} l_p - 4(1-p)^2 tau^{-2(1-2p)} R at the endpoint."""
    _require_omega(sol)
    bg = sol.curve.bg
    p = sol.curve.p
    tau = sol.tau_bar
    q, u, f = _endpoint_data(sol)
    C1 = max(1 - p, p)
    # grad L = 2 tau^p X, |X|^2 = (1-p)^2 tau^{-2p} |u|^2
    gradL2 = 4 * (1 - p) ** 2 * float(u @ f["g"] @ u)
    gradl2 = (1 - p) ** 2 / tau ** (2 * (1 - p)) * gradL2
    l = sol.value.l_p
    R = float(f["scalar_R"])
    rhs = 4 * (1 - p) * (C1 + 2) / tau ** (2 * (1 - p)) * l - 4 * (1 - p) ** 2 / tau ** (2 * (1 - 2 * p)) * R
    return {"lhs": gradl2, "rhs": rhs, "slack": rhs - gradl2}


def small_time_limit(bg: Background, params: FlowParams, v, tau: float = 1e-4,
                     tol: float = 1e-12) -> dict:
    """l_p(gamma_v(tau), tau) from the action accumulators, against |v|^2_{g(p0,0)}."""
    v = np.atleast_2d(np.asarray(v, float))
    p = params.p
    br = shoot_batch(bg, params, v, [tau], tol=tol, check_envelope=False)
    l = (1 - p) * (br.curv[0] + br.kin[0]) / tau ** (1 - p)
    x0 = params.base_point(bg)
    g0 = bg.fields("metric", x0[None], np.array([0.0]))["g"][0]
    v2 = np.einsum("bi,ij,bj->b", v, g0, v)
    return {"l_p": l, "v2": v2, "error": np.abs(l - v2)}
