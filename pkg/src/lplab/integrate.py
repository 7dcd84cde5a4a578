"""Batched embedded Runge-Kutta 5(4) integration (Dormand-Prince).

All members of a batch share one step sequence; the step is accepted when the
worst member passes the error test.  This keeps dense output on a common grid
and lets quadrature and conjugate scans vectorize across members.
"""

from __future__ import annotations

import numpy as np

from .errors import StiffnessError

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B5 - B4


def hermite(s0, s1, y0, f0, y1, f1, s):
    """Cubic Hermite interpolant on [s0, s1] and its derivative at s."""
    h = s1 - s0
    t = (s - s0) / h
    h00 = 2 * t ** 3 - 3 * t ** 2 + 1
    h10 = t ** 3 - 2 * t ** 2 + t
    h01 = -2 * t ** 3 + 3 * t ** 2
    h11 = t ** 3 - t ** 2
    y = h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
    d00 = (6 * t ** 2 - 6 * t) / h
    d10 = 3 * t ** 2 - 4 * t + 1
    d01 = (-6 * t ** 2 + 6 * t) / h
    d11 = 3 * t ** 2 - 2 * t
    dy = d00 * y0 + d10 * f0 + d01 * y1 + d11 * f1
    return y, dy


class Dense:
    """Piecewise cubic-Hermite dense output over the accepted steps."""

    def __init__(self):
        self.s0 = []
        self.s1 = []
        self.y0 = []
        self.f0 = []
        self.y1 = []
        self.f1 = []
        self.tags = []

    def add(self, s0, s1, y0, f0, y1, f1, tag):
        self.s0.append(s0)
        self.s1.append(s1)
        self.y0.append(y0.copy())
        self.f0.append(f0.copy())
        self.y1.append(y1.copy())
        self.f1.append(f1.copy())
        self.tags.append(tag)

    def finalize(self):
        self.s0 = np.array(self.s0)
        self.s1 = np.array(self.s1)
        return self

    def segment(self, s):
        k = int(np.searchsorted(self.s1, s, side="left"))
        return min(k, len(self.s1) - 1)

    def __call__(self, s):
        """State and derivative at scalar s, plus the segment tag."""
        k = self.segment(s)
        y, dy = hermite(self.s0[k], self.s1[k], self.y0[k], self.f0[k], self.y1[k], self.f1[k], s)
        return y, dy, self.tags[k]


def integrate(system, s_start, s_end, y0, *, rtol=1e-9, atol=1e-9, stops=(),
              dense=False, h0=None, max_steps=200000):
    """Integrate ``system.rhs`` from s_start to s_end.

    ``system`` supplies ``rhs(s, Y)``, ``after_step(s, Y) -> (Y, changed)``
    (chart maintenance; ``changed`` flags members whose state jumped),
    ``on_step(s0, s1, y0, f0, y1, f1)`` and ``tag()`` (per-step bookkeeping
    snapshot stored with dense segments), and ``error_slice`` (components
    entering the error norm).

    Returns (Y_end, stop_states, stop_tags, dense_or_None, nsteps).
    """
    Y = np.array(y0, dtype=float)
    s = float(s_start)
    stops = [float(t) for t in stops]
    for a, b in zip(stops, stops[1:]):
        if b < a:
            raise ValueError("stops must be nondecreasing")
    stop_states = []
    stop_tags = []
    pending = [t for t in stops]
    while pending and pending[0] <= s:
        stop_states.append(Y.copy())
        stop_tags.append(system.tag())
        pending.pop(0)
    dn = Dense() if dense else None
    span = s_end - s_start
    if span <= 0:
        return Y, stop_states, stop_tags, (dn.finalize() if dn else None), 0
    sl = getattr(system, "error_slice", slice(None))
    F = system.rhs(s, Y)
    if h0 is None:
        h = min(span, 1e-3 * max(span, 1e-3))
        d0 = np.max(np.abs(Y[:, sl])) + 1e-12
        d1 = np.max(np.abs(F[:, sl])) + 1e-12
        h = min(span, max(1e-6 * span, 0.01 * d0 / d1), 0.05 * span)
    else:
        h = h0
    nsteps = 0
    K = [None] * 7
    while s < s_end:
        if nsteps >= max_steps:
            raise StiffnessError(f"maximum step count reached at s={s}")
        target = pending[0] if pending else s_end
        last = False
        if s + h >= target - 1e-14 * max(1.0, abs(target)):
            h = target - s
            last = True
        K[0] = F
        for i in range(1, 7):
            acc = Y.copy()
            for j, aij in enumerate(A[i]):
                if aij != 0.0:
                    acc += (h * aij) * K[j]
            K[i] = system.rhs(s + C[i] * h, acc)
        Ynew = acc  # stage 7 argument equals the 5th-order solution
        err = h * sum(E[i] * K[i] for i in range(7) if E[i] != 0.0)
        scale = atol + rtol * np.maximum(np.abs(Y[:, sl]), np.abs(Ynew[:, sl]))
        ratio = err[:, sl] / scale
        per_member = np.sqrt(np.mean(ratio ** 2, axis=1))
        enorm = float(np.max(per_member)) if per_member.size else 0.0
        if not np.isfinite(enorm):
            enorm = np.inf
        if enorm <= 1.0:
            s_new = target if last else s + h
            Fnew = K[6]
            system.on_step(s, s_new, Y, F, Ynew, Fnew)
            if dn is not None:
                dn.add(s, s_new, Y, F, Ynew, Fnew, system.tag())
            Y, changed = system.after_step(s_new, Ynew)
            F = Fnew
            if changed is not None and np.any(changed):
                F = system.rhs(s_new, Y)
            s = s_new
            nsteps += 1
            while pending and pending[0] <= s + 1e-14 * max(1.0, abs(s)):
                stop_states.append(Y.copy())
                stop_tags.append(system.tag())
                pending.pop(0)
            fac = 5.0 if enorm == 0 else min(5.0, max(0.2, 0.9 * enorm ** -0.2))
            h = h * fac
        else:
            fac = 0.2 if not np.isfinite(enorm) else max(0.1, 0.9 * enorm ** -0.2)
            h = h * fac
        if h < 1e-14 * max(1.0, abs(s)):
            raise StiffnessError(f"step size underflow at s={s}")
    return Y, stop_states, stop_tags, (dn.finalize() if dn else None), nsteps
