"""Symbolic derivation of metric jets.

A background is described by a sympy metric ``g(x, tau)`` in a single chart.
Everything the integrators and checks need (Christoffel symbols, curvature,
their spatial and time derivatives) is derived here once and turned into
vectorized numpy callables.  Evaluation is batched: coordinates have shape
``(B, n)`` and tau has shape ``(B,)``.
"""

from __future__ import annotations

import itertools

import numpy as np
import sympy as sp

# Field groups evaluated together so that common subexpressions are shared.
GROUPS = {
    "metric": ("g", "g_inv"),
    "rhs": ("g", "christoffel", "grad_R_up", "ric_mixed", "scalar_R"),
    "lin": ("d_christoffel", "d_grad_R_up", "d_ric_mixed"),
    "rhs_lin": ("g", "christoffel", "grad_R_up", "ric_mixed", "scalar_R",
                "d_christoffel", "d_grad_R_up", "d_ric_mixed"),
    "curv": (
        "g", "g_inv", "christoffel", "ric", "scalar_R", "grad_R", "dR_dtau",
        "ric_dtau", "riemann", "hess_R", "nabla_ric", "christoffel_dtau",
    ),
}


def _derive(coords, tau, g):
    n = len(coords)
    rng = range(n)
    g = sp.Matrix(g)
    if g.is_diagonal():
        g_inv = sp.diag(*[sp.cancel(1 / g[i, i]) for i in rng])
    else:
        g_inv = sp.simplify(g.inv())

    dg = [[[sp.diff(g[i, j], coords[k]) for k in rng] for j in rng] for i in rng]
    gam = [[[0] * n for _ in rng] for _ in rng]
    for k, i, j in itertools.product(rng, rng, rng):
        gam[k][i][j] = sp.cancel(sum(
            g_inv[k, l] * (dg[l][i][j] + dg[l][j][i] - dg[i][j][l]) for l in rng
        ) / 2)

    # R^l_{ijk} with R(d_i, d_j) d_k = R^l_{ijk} d_l
    riem = [[[[0] * n for _ in rng] for _ in rng] for _ in rng]
    for l, i, j, k in itertools.product(rng, rng, rng, rng):
        e = sp.diff(gam[l][j][k], coords[i]) - sp.diff(gam[l][i][k], coords[j])
        e += sum(gam[l][i][m] * gam[m][j][k] - gam[l][j][m] * gam[m][i][k] for m in rng)
        riem[l][i][j][k] = sp.cancel(e)

    ric = sp.Matrix(n, n, lambda j, k: sp.cancel(sum(riem[i][i][j][k] for i in rng)))
    R = sp.cancel(sum(g_inv[j, k] * ric[j, k] for j in rng for k in rng))
    grad_R = [sp.diff(R, c) for c in coords]
    grad_R_up = [sp.cancel(sum(g_inv[k, l] * grad_R[l] for l in rng)) for k in rng]
    ric_mixed = [[sp.cancel(sum(g_inv[k, l] * ric[l, j] for l in rng)) for j in rng] for k in rng]

    fields = {
        "g": [g[i, j] for i in rng for j in rng],
        "g_inv": [g_inv[i, j] for i in rng for j in rng],
        "christoffel": [gam[k][i][j] for k in rng for i in rng for j in rng],
        "scalar_R": [R],
        "grad_R": grad_R,
        "grad_R_up": grad_R_up,
        "ric": [ric[i, j] for i in rng for j in rng],
        "ric_mixed": [ric_mixed[k][j] for k in rng for j in rng],
        "dR_dtau": [sp.diff(R, tau)],
        "ric_dtau": [sp.diff(ric[i, j], tau) for i in rng for j in rng],
        "riemann": [riem[l][i][j][k] for l in rng for i in rng for j in rng for k in rng],
        "christoffel_dtau": [sp.diff(gam[k][i][j], tau) for k in rng for i in rng for j in rng],
        "d_christoffel": [
            sp.diff(gam[k][i][j], coords[m]) for m in rng for k in rng for i in rng for j in rng
        ],
        "d_grad_R_up": [sp.diff(grad_R_up[k], coords[m]) for m in rng for k in rng],
        "d_ric_mixed": [
            sp.diff(ric_mixed[k][j], coords[m]) for m in rng for k in rng for j in rng
        ],
    }
    fields["hess_R"] = [
        sp.diff(R, coords[i], coords[j]) - sum(gam[k][i][j] * grad_R[k] for k in rng)
        for i in rng for j in rng
    ]
    fields["nabla_ric"] = [
        sp.diff(ric[i, j], coords[m])
        - sum(gam[k][m][i] * ric[k, j] + gam[k][m][j] * ric[i, k] for k in rng)
        for m in rng for i in rng for j in rng
    ]
    return fields


SHAPES = {
    "g": (2,), "g_inv": (2,), "christoffel": (3,), "scalar_R": (0,), "grad_R": (1,),
    "grad_R_up": (1,), "ric": (2,), "ric_mixed": (2,), "dR_dtau": (0,), "ric_dtau": (2,),
    "riemann": (4,), "christoffel_dtau": (3,), "d_christoffel": (4,), "d_grad_R_up": (2,),
    "d_ric_mixed": (3,), "hess_R": (2,), "nabla_ric": (3,),
}


class SymbolicJets:
    """Vectorized evaluators for the jet fields of a symbolic metric.

    ``params`` are extra sympy symbols (model constants) passed positionally
    after the coordinates and tau at evaluation time.
    """

    def __init__(self, coords, tau, g, params=()):
        self.n = len(coords)
        fields = _derive(coords, tau, g)
        args = list(coords) + [tau] + list(params)
        self._fns = {}
        for group, names in GROUPS.items():
            exprs = [e for name in names for e in fields[name]]
            self._fns[group] = sp.lambdify(args, exprs, modules="numpy", cse=True)

    def evaluate(self, group, x, tau, params=()):
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        bshape = tau.shape
        n = self.n
        raw = self._fns[group](*[x[..., i] for i in range(n)], tau, *params)
        flat = np.empty(bshape + (len(raw),))
        for k, v in enumerate(raw):
            flat[..., k] = v
        out = {}
        pos = 0
        for name in GROUPS[group]:
            rank = SHAPES[name][0]
            size = n ** rank
            out[name] = flat[..., pos:pos + size].reshape(bshape + (n,) * rank)
            pos += size
        return out
