"""Closed-form backward Ricci flows g(tau) with pointwise jets.

Every background uses the convention d/dtau g = 2 Ric.  Three models are
provided: static Euclidean space, the shrinking round sphere and Hamilton's
cigar soliton.  ``rescale`` produces the parabolically rescaled flow
g(tau_bar * tau) / tau_bar.

Batched evaluation goes through ``Background.fields(group, x, tau)`` with
``x`` of shape (B, n) and ``tau`` of shape (B,); see ``symbolic.GROUPS`` for
the group names.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import sympy as sp
from scipy import optimize

from .errors import CapabilityError, DomainError, RangeError
from .symbolic import GROUPS, SHAPES, SymbolicJets

OPTIONAL_FIELDS = ("ric_dtau", "riemann", "hess_R")


@dataclass(frozen=True)
class FlowParams:
    """Run parameters shared by every computation on a background.

    ``tau_max`` is the length of the backward-time window; ``t0`` is kept for
    bookkeeping only (the models carry their own time origin).
    """

    p: float
    tau_max: float
    p0: Optional[tuple] = None
    t0: Optional[float] = None

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise RangeError(f"p must lie in (0,1), got {self.p}")
        if not self.tau_max > 0:
            raise RangeError(f"tau_max must be positive, got {self.tau_max}")
        if self.t0 is not None and self.t0 == 0:
            raise RangeError("t0 must be nonzero")
        if self.p0 is not None:
            object.__setattr__(self, "p0", tuple(float(c) for c in self.p0))

    def base_point(self, bg) -> np.ndarray:
        if self.p0 is None:
            return np.zeros(bg.n)
        x = np.asarray(self.p0, dtype=float)
        if x.shape != (bg.n,):
            raise DomainError(f"p0 has dimension {x.size}, background has n={bg.n}")
        bg.check_point(x)
        return x

    def with_p(self, p: float) -> "FlowParams":
        return FlowParams(p, self.tau_max, self.p0, self.t0)


@dataclass
class MetricJet:
    """Pointwise geometric data at one (x, tau).

    Optional fields are ``None`` when the background cannot supply them;
    ``require`` raises instead of handing back zeros.
    """

    g: np.ndarray
    g_inv: np.ndarray
    christoffel: np.ndarray
    ric: np.ndarray
    scalar_R: float
    grad_R: np.ndarray
    dR_dtau: float
    ric_dtau: Optional[np.ndarray] = None
    riemann: Optional[np.ndarray] = None
    hess_R: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def require(self, name: str):
        val = getattr(self, name, None)
        if val is None:
            raise CapabilityError(f"jet field '{name}' is not available")
        return val


class Background:
    """Abstract closed-form flow.  Subclasses fill ``_fields``."""

    kind = "abstract"
    has_charts = False

    def __init__(self, n: int, tau_max: float = math.inf):
        self.n = int(n)
        self.tau_max = float(tau_max)

    # -- evaluation -------------------------------------------------------
    def fields(self, group: str, x, tau) -> dict:
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        tau = np.broadcast_to(tau, x.shape[:-1])
        return self._fields(group, x, tau)

    def _fields(self, group, x, tau):
        raise NotImplementedError

    def supports(self, name: str) -> bool:
        return True

    def check_point(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n or not np.all(np.isfinite(x)):
            raise DomainError(f"point {x} is not in the {self.chart_name} chart")

    def check_tau(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < 0) or np.any(tau > self.tau_max * (1 + 1e-12)):
            raise RangeError(f"tau={tau} outside [0, {self.tau_max}] for {self.describe()}")

    chart_name = "global"

    def describe(self) -> str:
        return self.kind

    # -- chart fallback (only the sphere overrides) -----------------------
    def needs_switch(self, x):
        return np.zeros(x.shape[:-1], dtype=bool)

    # -- model constants ---------------------------------------------------
    def R_sup(self, tau_hi: float) -> float:
        raise NotImplementedError

    def ricci_bounds(self, tau_hi: float) -> tuple:
        """(c1, c2) with -c1 g <= Ric <= c2 g on M x [0, tau_hi]."""
        raise NotImplementedError

    def K1(self, tau_hi: float) -> float:
        """Upper bound for |R| + |grad R| + |Ric| on M x [0, tau_hi]."""
        raise NotImplementedError

    def distance0(self, p0, q) -> float:
        """Riemannian distance in g(0)."""
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError

    def __eq__(self, other):
        return isinstance(other, Background) and self.spec() == other.spec()

    def __hash__(self):
        return hash(repr(sorted(self.spec().items())))

    def __repr__(self):
        return f"{type(self).__name__}({self.spec()})"


# ---------------------------------------------------------------------------
class Flat(Background):
    """Static Euclidean R^n."""

    kind = "flat"

    def _fields(self, group, x, tau):
        n = self.n
        bshape = tau.shape
        out = {}
        for name in GROUPS[group]:
            rank = SHAPES[name][0]
            out[name] = np.zeros(bshape + (n,) * rank)
        eye = np.broadcast_to(np.eye(n), bshape + (n, n))
        for name in ("g", "g_inv"):
            if name in out:
                out[name] = eye.copy()
        return out

    def R_sup(self, tau_hi):
        return 0.0

    def ricci_bounds(self, tau_hi):
        return 0.0, 0.0

    def K1(self, tau_hi):
        return 0.0

    def distance0(self, p0, q):
        return float(np.linalg.norm(np.asarray(q, float) - np.asarray(p0, float)))

    def spec(self):
        return {"kind": "flat", "n": self.n}


# ---------------------------------------------------------------------------
@functools.lru_cache(maxsize=None)
def _sphere_jets(n):
    xs = sp.symbols(f"x0:{n}", real=True)
    tau, a = sp.symbols("tau a", positive=True)
    r2 = sum(c ** 2 for c in xs)
    phi = 8 * (n - 1) * (tau + a) / (1 + r2) ** 2
    return SymbolicJets(xs, tau, sp.eye(n) * phi, (a,))


class Sphere(Background):
    """Shrinking round sphere g(tau) = 2(n-1)(tau+a) g_round.

    Chart: stereographic projection from the antipode of the base point, so
    the base point sits at the origin.  The inversion x -> x/|x|^2 maps this
    chart to the one centred at the antipode and is an isometry of the same
    coordinate form, so both charts share one set of formulas.  Integrators
    switch charts when |x| exceeds ``SWITCH_RADIUS``.
    """

    kind = "sphere"
    has_charts = True
    chart_name = "stereographic"
    SWITCH_RADIUS = 2.0

    def __init__(self, n: int, a: float, tau_max: float = math.inf):
        if n < 2:
            raise DomainError("sphere needs n >= 2")
        if not a > 0:
            raise RangeError("sphere needs a > 0")
        super().__init__(n, tau_max)
        self.a = float(a)
        self._jets = _sphere_jets(self.n)

    def c(self, tau):
        return 2.0 * (self.n - 1) * (np.asarray(tau) + self.a)

    def _fields(self, group, x, tau):
        return self._jets.evaluate(group, x, tau, (self.a,))

    def needs_switch(self, x):
        return np.einsum("...i,...i->...", x, x) > self.SWITCH_RADIUS ** 2

    @staticmethod
    def invert(x):
        x = np.asarray(x, dtype=float)
        r2 = np.einsum("...i,...i->...", x, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            return x / r2[..., None]

    @staticmethod
    def inversion_jacobian(x):
        """D(x/|x|^2) as an (..., n, n) array."""
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        r2 = np.einsum("...i,...i->...", x, x)[..., None, None]
        return np.eye(n) / r2 - 2.0 * x[..., :, None] * x[..., None, :] / r2 ** 2

    @staticmethod
    def inversion_second(x, d, u):
        """Directional derivative (D^2 inv)[d] applied to u."""
        x = np.asarray(x, dtype=float)
        r2 = np.einsum("...i,...i->...", x, x)[..., None]
        xd = np.einsum("...i,...i->...", x, d)[..., None]
        xu = np.einsum("...i,...i->...", x, u)[..., None]
        du = np.einsum("...i,...i->...", d, u)[..., None]
        return (-2.0 * xd * u - 2.0 * (d * xu + x * du)) / r2 ** 2 + 8.0 * xd * xu * x / r2 ** 3

    @staticmethod
    def polar_angle(x, chart=0):
        r = np.sqrt(np.einsum("...i,...i->...", np.asarray(x, float), np.asarray(x, float)))
        th = 2.0 * np.arctan(r)
        return np.pi - th if chart else th

    @staticmethod
    def point_at_angle(theta, direction):
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        return math.tan(theta / 2.0) * d

    @staticmethod
    def embed(x, chart=0):
        """Unit-sphere embedding; the base point maps to the last axis pole."""
        x = np.asarray(x, dtype=float)
        r2 = np.einsum("...i,...i->...", x, x)[..., None]
        last = (1.0 - r2) if not chart else (r2 - 1.0)
        return np.concatenate([2.0 * x, last], axis=-1) / (1.0 + r2)

    def R_sup(self, tau_hi):
        return self.n / (2.0 * self.a)

    def ricci_bounds(self, tau_hi):
        return 0.0, 1.0 / (2.0 * self.a)

    def K1(self, tau_hi):
        return (self.n + math.sqrt(self.n)) / (2.0 * self.a)

    def distance0(self, p0, q):
        if np.linalg.norm(np.asarray(p0, float)) > 0:
            raise DomainError("the sphere chart is centred at the base point; p0 must be 0")
        return float(math.sqrt(self.c(0.0)) * self.polar_angle(q))

    def spec(self):
        d = {"kind": "sphere", "n": self.n, "a": self.a}
        if math.isfinite(self.tau_max):
            d["tau_max"] = self.tau_max
        return d

    def describe(self):
        return f"sphere(n={self.n}, a={self.a:g})"


# ---------------------------------------------------------------------------
@functools.lru_cache(maxsize=None)
def _cigar_jets():
    xs = sp.symbols("x0:2", real=True)
    tau = sp.symbols("tau", positive=True)
    t0 = sp.symbols("t0", real=True)
    A = sp.exp(4 * (t0 - tau))
    phi = 1 / (A + xs[0] ** 2 + xs[1] ** 2)
    return SymbolicJets(xs, tau, sp.eye(2) * phi, (t0,))


def _cigar_k1_profile():
    # R + |grad R| + |Ric| in units where A = 1, as a function of t = r / sqrt(A)
    t = np.linspace(0.0, 20.0, 200001)
    val = 4.0 / (1 + t ** 2) * (1 + 1 / math.sqrt(2.0)) + 8.0 * t / (1 + t ** 2) ** 1.5
    return float(val.max()) * (1 + 1e-6)


class Cigar(Background):
    """Hamilton's cigar soliton, g_ij = delta_ij / (e^{4(t0-tau)} + |x|^2)."""

    kind = "cigar"

    def __init__(self, t0: float = -1.0, tau_max: float = math.inf):
        super().__init__(2, tau_max)
        self.t0 = float(t0)
        self._jets = _cigar_jets()

    def A(self, tau):
        return np.exp(4.0 * (self.t0 - np.asarray(tau, float)))

    def _fields(self, group, x, tau):
        return self._jets.evaluate(group, x, tau, (self.t0,))

    def R_sup(self, tau_hi):
        return 4.0

    def ricci_bounds(self, tau_hi):
        return 0.0, 2.0

    def K1(self, tau_hi):
        return _cigar_k1_profile()

    def distance0(self, p0, q):
        p0 = np.asarray(p0, float)
        q = np.asarray(q, float)
        sqA = math.sqrt(float(self.A(0.0)))
        if np.linalg.norm(p0) == 0:
            return float(np.arcsinh(np.linalg.norm(q) / sqA))
        return _polyline_distance(lambda z: 1.0 / (float(self.A(0.0)) + np.sum(z * z, -1)), p0, q)

    def spec(self):
        d = {"kind": "cigar", "t0": self.t0}
        if math.isfinite(self.tau_max):
            d["tau_max"] = self.tau_max
        return d

    def describe(self):
        return f"cigar(t0={self.t0:g})"


def _polyline_distance(conf, a, b, segments=64):
    """Length-minimizing polyline for a conformal metric conf(x) * delta."""
    ts = np.linspace(0, 1, segments + 1)[1:-1, None]

    def length(flat):
        pts = np.vstack([a, flat.reshape(-1, a.size), b])
        mid = 0.5 * (pts[1:] + pts[:-1])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        return float(np.sum(np.sqrt(conf(mid)) * seg))

    x0 = (a + ts * (b - a)).ravel()
    res = optimize.minimize(length, x0, method="L-BFGS-B")
    return res.fun


# ---------------------------------------------------------------------------
# Scale weights w such that field^{tb}(x, tau) = tb**w * field(x, tb*tau).
_SCALE = {
    "g": -1, "g_inv": 1, "christoffel": 0, "grad_R_up": 2, "ric_mixed": 1,
    "scalar_R": 1, "d_christoffel": 0, "d_grad_R_up": 2, "d_ric_mixed": 1,
    "ric": 0, "grad_R": 1, "dR_dtau": 2, "ric_dtau": 1, "riemann": 0,
    "hess_R": 1, "nabla_ric": 0, "christoffel_dtau": 1,
}


class Rescaled(Background):
    """g^{tb}(tau) = g(tb * tau) / tb for a background without a closed-form rescale."""

    def __init__(self, base: Background, tau_bar: float):
        super().__init__(base.n, base.tau_max / tau_bar)
        self.base = base
        self.tau_bar = float(tau_bar)
        self.kind = f"rescaled-{base.kind}"
        self.has_charts = base.has_charts
        self.chart_name = base.chart_name

    def _fields(self, group, x, tau):
        raw = self.base._fields(group, x, self.tau_bar * tau)
        return {k: v * self.tau_bar ** _SCALE[k] for k, v in raw.items()}

    def needs_switch(self, x):
        return self.base.needs_switch(x)

    def check_point(self, x):
        self.base.check_point(x)

    def R_sup(self, tau_hi):
        return self.tau_bar * self.base.R_sup(self.tau_bar * tau_hi)

    def ricci_bounds(self, tau_hi):
        c1, c2 = self.base.ricci_bounds(self.tau_bar * tau_hi)
        return self.tau_bar * c1, self.tau_bar * c2

    def K1(self, tau_hi):
        return max(1.0, self.tau_bar) ** 1.5 * self.base.K1(self.tau_bar * tau_hi)

    def distance0(self, p0, q):
        return self.base.distance0(p0, q) / math.sqrt(self.tau_bar)

    def spec(self):
        return {"kind": "rescaled", "base": self.base.spec(), "tau_bar": self.tau_bar}

    def describe(self):
        return f"rescale({self.base.describe()}, {self.tau_bar:g})"


def rescale(bg: Background, tau_bar: float) -> Background:
    """Parabolic rescaling g^{tb}(tau) = g(tb * tau) / tb.

    The flat model maps to itself in the chart y = x / sqrt(tb); every other
    model keeps its coordinates (see ``rescale_point``).
    """
    if not tau_bar > 0:
        raise RangeError("tau_bar must be positive")
    if isinstance(bg, Flat):
        return Flat(bg.n)
    if isinstance(bg, Sphere):
        return Sphere(bg.n, bg.a / tau_bar, bg.tau_max / tau_bar)
    if isinstance(bg, Rescaled):
        return Rescaled(bg.base, bg.tau_bar * tau_bar)
    return Rescaled(bg, tau_bar)


def rescale_point(bg: Background, tau_bar: float, x) -> np.ndarray:
    """Coordinates on rescale(bg, tau_bar) of the point x of bg."""
    x = np.asarray(x, dtype=float)
    if isinstance(bg, Flat):
        return x / math.sqrt(tau_bar)
    return x


def make_background(spec: dict) -> Background:
    """Build a background from its run-config dictionary."""
    kind = spec.get("kind")
    tmax = spec.get("tau_max", math.inf)
    if kind == "flat":
        return Flat(int(spec.get("n", 2)))
    if kind == "sphere":
        return Sphere(int(spec.get("n", 2)), float(spec.get("a", 1.0)), tmax)
    if kind == "cigar":
        return Cigar(float(spec.get("t0", -1.0)), tmax)
    if kind == "rescaled":
        return rescale(make_background(spec["base"]), float(spec["tau_bar"]))
    raise DomainError(f"unknown background kind {kind!r}")


def sample_jet(bg: Background, x, tau: float) -> MetricJet:
    """All jet fields at a single point."""
    x = np.asarray(x, dtype=float)
    bg.check_point(x)
    bg.check_tau(tau)
    f = bg.fields("curv", x[None, :], np.array([float(tau)]))
    f = {k: v[0] for k, v in f.items()}
    jet = MetricJet(
        g=f["g"], g_inv=f["g_inv"], christoffel=f["christoffel"], ric=f["ric"],
        scalar_R=float(f["scalar_R"]), grad_R=f["grad_R"], dR_dtau=float(f["dR_dtau"]),
        ric_dtau=f["ric_dtau"], riemann=f["riemann"], hess_R=f["hess_R"],
        extra={"nabla_ric": f["nabla_ric"], "christoffel_dtau": f["christoffel_dtau"]},
    )
    return jet


def flow_consistency_check(bg: Background, samples) -> dict:
    """Max |d/dtau g - 2 Ric| over samples, by 4th-order central differences."""
    errs = []
    for x, tau in samples:
        x = np.asarray(x, dtype=float)
        h = 1e-4 * max(tau, 1.0)
        taus = np.array([tau - 2 * h, tau - h, tau + h, tau + 2 * h])
        g = bg.fields("metric", np.repeat(x[None], 4, 0), taus)["g"]
        dg = (g[0] - 8 * g[1] + 8 * g[2] - g[3]) / (12 * h)
        ric = bg.fields("curv", x[None], np.array([tau]))["ric"][0]
        errs.append(float(np.max(np.abs(dg - 2 * ric))))
    return {"max_error": max(errs) if errs else 0.0, "errors": errs}


def sectional_curvatures(bg: Background, x, tau, planes=None) -> np.ndarray:
    """Sectional curvatures on coordinate 2-planes (or supplied vector pairs)."""
    f = bg.fields("curv", np.asarray(x, float)[None], np.array([tau]))
    riem = f["riemann"][0]
    g = f["g"][0]
    n = bg.n
    if planes is None:
        planes = [(np.eye(n)[i], np.eye(n)[j]) for i in range(n) for j in range(i + 1, n)]
    out = []
    for X, Y in planes:
        rxy = np.einsum("lijk,i,j,k->l", riem, X, Y, Y)
        num = rxy @ g @ X
        den = (X @ g @ X) * (Y @ g @ Y) - (X @ g @ Y) ** 2
        out.append(num / den)
    return np.array(out)


def curvature_operator_eigs(bg: Background, x, tau) -> np.ndarray:
    """Eigenvalues of the curvature operator on 2-forms, in a g-orthonormal frame."""
    f = bg.fields("curv", np.asarray(x, float)[None], np.array([tau]))
    riem = f["riemann"][0]
    g = f["g"][0]
    n = bg.n
    # orthonormal frame E (columns): E^T g E = I
    L = np.linalg.cholesky(g)
    E = np.linalg.inv(L).T
    R_low = np.einsum("ml,lijk->mijk", g, riem)  # R_{mijk} = <R(d_i,d_j)d_k, d_m>
    Rf = np.einsum("mijk,ia,jb,kc,md->abcd", R_low, E, E, E, E)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    Q = np.empty((len(pairs), len(pairs)))
    for A, (i, j) in enumerate(pairs):
        for B, (k, l) in enumerate(pairs):
            Q[A, B] = Rf[i, j, l, k]
    return np.linalg.eigvalsh(0.5 * (Q + Q.T))
