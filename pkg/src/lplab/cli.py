"""Command-line experiment runner.

    lplab <command> --config run.json [--out dir] [--threads k]

Exit status: 0 on success, 2 when a mathematical check fails, 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import re
import sys
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from . import action, bvp, geodesics, volume
from .backgrounds import Flat, FlowParams, Sphere, flow_consistency_check, make_background
from .errors import DomainError, FormulaViolation, LplabError, NonConvergenceError, SchemaError

log = logging.getLogger("lplab")

COMMANDS = ("geodesic", "reduced-distance", "volume", "monotonicity", "rescaled", "verify", "plot")
SUITES = ("flow", "small_time", "jacobian_limit", "dlogJ", "harnack", "bvp", "sphere_oracle",
          "volume", "zp", "g_p", "pde", "scaling")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1}
_grid = {"type": "array", "items": _pos, "minItems": 1}
_quad = {"type": "object", "additionalProperties": False, "properties": {
    "order": {"type": "integer", "minimum": 2}, "angular": {"type": "integer", "minimum": 1},
    "panel": _pos}}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "background": {
            "type": "object", "required": ["kind"],
            "properties": {
                "kind": {"enum": ["flat", "sphere", "cigar", "rescaled"]},
                "n": {"type": "integer", "minimum": 1, "maximum": 3},
                "a": _pos, "t0": _num, "tau_max": _pos, "tau_bar": _pos, "base": {"type": "object"},
            },
            "additionalProperties": False,
        },
        "p": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "p0": _vec,
        "tau_max": _pos,
        "seed": {"type": "integer", "minimum": 0},
        "threads": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "tolerances": {"type": "object", "additionalProperties": False, "properties": {
            "tol": _pos, "slack": _pos, "limit": _pos}},
        "constants": {"type": "object", "additionalProperties": False, "properties": {
            "R_sup": {"type": "number", "minimum": 0}, "c2": _pos, "C0": _pos, "tau_bar0": _pos}},
        "geodesic": {"type": "object", "required": ["v", "tau_bar"], "additionalProperties": False,
                     "properties": {"v": _vec, "tau_bar": _pos,
                                    "samples": {"type": "integer", "minimum": 2}}},
        "reduced_distance": {"type": "object", "required": ["q", "tau"], "additionalProperties": False,
                             "properties": {"q": {"type": "array", "items": _vec, "minItems": 1},
                                            "tau": _grid,
                                            "starts": {"type": "integer", "minimum": 1}}},
        "volume": {"type": "object", "required": ["tau"], "additionalProperties": False,
                   "properties": {"tau": _grid, "method": {"enum": ["auto", "direct", "pushforward"]},
                                  "quad": _quad}},
        "monotonicity": {"type": "object", "required": ["grid"], "additionalProperties": False,
                         "properties": {"grid": _grid, "c": _pos,
                                        "method": {"enum": ["auto", "direct", "pushforward"]},
                                        "quad": _quad, "weight_sign": {"enum": [1, -1]}}},
        "rescaled": {"type": "object", "required": ["rho", "tau_bar_grid"], "additionalProperties": False,
                     "properties": {"rho": _pos, "tau_bar_grid": _grid,
                                    "path": {"enum": ["identity", "recompute"]},
                                    "method": {"enum": ["auto", "direct", "pushforward"]},
                                    "quad": _quad, "weight_sign": {"enum": [1, -1]}}},
        "verify": {"type": "object", "additionalProperties": False, "properties": {
            "suites": {"type": "array", "items": {"enum": list(SUITES)}},
            "samples": {"type": "integer", "minimum": 1},
            "tau": _pos, "c": _pos, "grid": _grid, "quad": _quad}},
        "plot": {"type": "object", "required": ["csv", "y"], "additionalProperties": False,
                 "properties": {"csv": {"oneOf": [{"type": "string"},
                                                  {"type": "array", "items": {"type": "string"}}]},
                                "x": {"type": "string"},
                                "y": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                                "logx": {"type": "boolean"}, "title": {"type": "string"},
                                "output": {"type": "string"}}},
    },
}


# ---------------------------------------------------------------------------
def _path(parts) -> str:
    out = "config"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def validate_config(cfg) -> None:
    """Raise SchemaError listing every violation with its field path."""
    errs = sorted(Draft202012Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    msgs = [f"{_path(e.absolute_path)}: {e.message}" for e in errs]
    if not msgs:
        for key, sub in (("volume", "tau"), ("monotonicity", "grid"), ("reduced_distance", "tau"),
                         ("rescaled", "tau_bar_grid"), ("verify", "grid")):
            g = cfg.get(key, {}).get(sub)
            if g is not None and any(b <= a for a, b in zip(g, g[1:])):
                msgs.append(f"{_path([key, sub])}: grid must be strictly increasing")
            tmax = cfg.get("tau_max", cfg.get("background", {}).get("tau_max", math.inf))
            if g is not None and key != "rescaled" and g and g[-1] > tmax:
                msgs.append(f"{_path([key, sub])}: grid leaves the time window (0, {tmax}]")
    if msgs:
        raise SchemaError("; ".join(msgs))


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config: not valid JSON ({exc})") from exc
    validate_config(cfg)
    return cfg


def _setup(cfg):
    bg = make_background(cfg["background"])
    tmax = cfg.get("tau_max", bg.tau_max)
    params = FlowParams(cfg["p"], tmax, tuple(cfg["p0"]) if "p0" in cfg else None)
    params.base_point(bg)
    return bg, params


def _quad(block):
    q = (block or {}).get("quad")
    return volume.Quadrature(**q) if q else None


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    """RFC 4180 output (CRLF, minimal quoting) with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def _loc(**kw) -> str:
    parts = []
    for k, v in kw.items():
        if isinstance(v, (list, tuple, np.ndarray)):
            v = "(" + " ".join("%.6g" % float(x) for x in np.ravel(v)) + ")"
        elif isinstance(v, float):
            v = "%.6g" % v
        parts.append(f"{k}={v}")
    return ";".join(parts)


# ---------------------------------------------------------------------------
def cmd_geodesic(cfg, bg, params, out, threads):
    g = cfg["geodesic"]
    v = np.asarray(g["v"], float)
    tol = cfg.get("tolerances", {}).get("tol", geodesics.DEFAULT_TOL)
    curve = geodesics.shoot(bg, params, v, g["tau_bar"], tol=tol)
    s = np.linspace(curve.s_start, curve.s_end, g.get("samples", 65))
    sysm = curve.system
    rows = []
    for si in s:
        y, _, chart, _ = curve.state(float(si))
        x = geodesics.to_base_chart(bg, y[None, :bg.n], np.array([chart]))[0]
        r = {"s": si, "tau": float(geodesics.tau_of_s(si, params.p)),
             "L_p": float(y[sysm.CURV] + y[sysm.KIN])}
        r.update({f"x{i}": x[i] for i in range(bg.n)})
        rows.append(r)
    write_csv(out / "geodesic.csv", ["s", "tau"] + [f"x{i}" for i in range(bg.n)] + ["L_p"], rows)
    return 0


def cmd_reduced_distance(cfg, bg, params, out, threads):
    rd = cfg["reduced_distance"]
    seed = cfg.get("seed", 0)
    tol = cfg.get("tolerances", {}).get("tol", geodesics.DEFAULT_TOL)
    rows = []
    for q in rd["q"]:
        for t in rd["tau"]:
            sol = bvp.solve_lp(bg, params, q, t, starts=rd.get("starts", 32), seed=seed, tol=tol)
            r = {"tau": t, "L_p": sol.value.L_p, "l_p": sol.value.l_p,
                 "basin_count": sol.basin_count, "in_omega": sol.in_omega}
            r.update({f"q{i}": float(q[i]) for i in range(bg.n)})
            rows.append(r)
    cols = [f"q{i}" for i in range(bg.n)] + ["tau", "L_p", "l_p", "basin_count", "in_omega"]
    write_csv(out / "reduced_distance.csv", cols, rows)
    return 0


def cmd_volume(cfg, bg, params, out, threads):
    vb = cfg["volume"]
    method = vb.get("method", "auto")
    quad = _quad(vb)
    rows = []
    for t in vb["tau"]:
        if method == "direct" or (method == "auto" and isinstance(bg, Sphere)):
            val = volume.reduced_volume_direct(bg, params, t)
            rows.append({"tau": t, "value": val, "method": "direct", "nodes": 0, "excluded": 0,
                         "truncation": "none"})
        else:
            r = volume.reduced_volume_pushforward(bg, params, t, quad, threads=threads)
            rows.append({"tau": t, "value": r.value, "method": "pushforward", "nodes": r.nodes,
                         "excluded": r.excluded, "truncation": r.truncation})
    write_csv(out / "volume.csv", ["tau", "value", "method", "nodes", "excluded", "truncation"], rows)
    return 0


def _write_meta(path, meta):
    clean = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in meta.items()}
    with open(path, "w") as fh:
        json.dump(clean, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def cmd_monotonicity(cfg, bg, params, out, threads):
    m = cfg["monotonicity"]
    consts = cfg.get("constants", {})
    sc = volume.monotonicity_scan(bg, params, m["grid"], m.get("c"), method=m.get("method", "auto"),
                                  quad=_quad(m), R_sup=consts.get("R_sup"), threads=threads,
                                  slack=cfg.get("tolerances", {}).get("slack", volume.MONO_SLACK),
                                  weight_sign=m.get("weight_sign", 1))
    rows = [dict(r, bound_ok=bool(b)) for r, b in zip(sc.rows(), sc.bound_ok)]
    write_csv(out / "monotonicity.csv", ["tau", "value", "weight", "weighted", "monotone_ok", "bound_ok"],
              rows)
    meta = dict(sc.meta, A0=sc.A0, tau0=sc.tau0, method=sc.method, ok=sc.ok)
    log.info("A0=%.17g from R_sup=%.17g over %s", sc.A0, sc.meta["R_sup"], sc.meta["R_sup_region"])
    _write_meta(out / "monotonicity_meta.json", meta)
    return 0 if sc.ok else 2


def cmd_rescaled(cfg, bg, params, out, threads):
    r = cfg["rescaled"]
    consts = cfg.get("constants", {})
    sc = volume.rescaled_monotonicity_scan(
        bg, params, r["rho"], r["tau_bar_grid"], tau_bar0=consts.get("tau_bar0"), c2=consts.get("c2"),
        C0=consts.get("C0"), path=r.get("path", "identity"), method=r.get("method", "direct"),
        quad=_quad(r), slack=cfg.get("tolerances", {}).get("slack", volume.MONO_SLACK),
        weight_sign=r.get("weight_sign", 1))
    rows = sc.rows()
    for row in rows:
        row["tau_bar"] = row.pop("tau")
    write_csv(out / "rescaled.csv", ["tau_bar", "value", "weight", "weighted", "monotone_ok"], rows)
    log.info("W constants: %s", sc.meta.get("derivation"))
    _write_meta(out / "rescaled_meta.json", dict(sc.meta, ok=sc.ok))
    limit_ok = sc.meta["limit_error"] <= cfg.get("tolerances", {}).get("limit", 1e-3)
    return 0 if (sc.ok and limit_ok) else 2


# ---------------------------------------------------------------------------
def _row(quantity, location, lhs, rhs, tol=1e-6, sense="<="):
    """lhs <= rhs (or >=) up to tol, absolute plus relative to |rhs|; slack > 0 means satisfied."""
    slack = float(rhs) - float(lhs) if sense == "<=" else float(lhs) - float(rhs)
    return {"quantity": quantity, "location": location, "lhs": float(lhs), "rhs": float(rhs),
            "slack": slack, "ok": bool(slack >= -tol * (1 + abs(float(rhs))))}


def _g0_frame(bg, params):
    x0 = params.base_point(bg)
    g0 = bg.fields("metric", x0[None], np.array([0.0]))["g"][0]
    return np.linalg.inv(np.linalg.cholesky(g0)).T


def _sample_v(rng, bg, scale, params):
    """Initial datum with g(p0, 0)-length of order ``scale``."""
    return _g0_frame(bg, params) @ (rng.normal(size=bg.n) * scale)


def _sample_q(rng, bg, params, scale):
    return params.base_point(bg) + rng.uniform(-scale, scale, size=bg.n)


def verify_rows(cfg, bg, params, threads=1) -> list:
    """Every applicable invariant as (quantity, location, lhs, rhs, slack, ok)."""
    vb = cfg.get("verify", {})
    p, n = params.p, bg.n
    seed = cfg.get("seed", 0)
    k = vb.get("samples", 3)
    T = vb.get("tau", 0.5)
    wanted = vb.get("suites", list(SUITES))
    rows = []

    def rng(name):
        return np.random.default_rng([seed, SUITES.index(name)])

    if "flow" in wanted:
        r = rng("flow")
        pts = [(_sample_q(r, bg, params, 1.0), float(r.uniform(0.1, 1.0))) for _ in range(k)]
        res = flow_consistency_check(bg, pts)
        for (x, t), e in zip(pts, res["errors"]):
            rows.append(_row("flow_dg_minus_2ric", _loc(x=x, tau=t), e, 1e-6, 0.0))
    if "small_time" in wanted:
        r = rng("small_time")
        V = np.array([_sample_v(r, bg, 0.5, params) for _ in range(k)])
        res = bvp.small_time_limit(bg, params, V)
        for v, e in zip(V, res["error"]):
            rows.append(_row("small_time_l_minus_v2", _loc(v=v, tau=1e-4), e, 1e-3, 0.0))
    if "jacobian_limit" in wanted:
        r = rng("jacobian_limit")
        V = np.array([_sample_v(r, bg, 0.5, params) for _ in range(k)])
        res = geodesics.jacobian_limit(bg, params, V)
        for v, e in zip(V, res["error"]):
            rows.append(_row("jacobian_limit_rel_error", _loc(v=v), e, 1e-4, 0.0))
    if "dlogJ" in wanted:
        r = rng("dlogJ")
        for _ in range(k):
            v = _sample_v(r, bg, 0.3, params)
            try:
                res = action.dlogJ_inequality_check(bg, params, v, [0.25 * T, 0.5 * T, T])
            except DomainError:
                continue
            for row in res["rows"]:
                rows.append(_row("dlogJ_upper_bound", _loc(v=v, tau=row["tau"]), row["lhs"], row["rhs"], 1e-8))
    if "harnack" in wanted:
        r = rng("harnack")
        for _ in range(k):
            x, X, t = _sample_q(r, bg, params, 1.0), _sample_v(r, bg, 1.0, params), float(r.uniform(0.1, 1.0))
            for row in action.harnack_bound_check(bg, params, x, t, X)["rows"]:
                rows.append(_row(row["quantity"], _loc(x=x, X=X, tau=t), row["lhs"], row["rhs"], 1e-10,
                                 sense=">="))
    sols = []
    if "bvp" in wanted or "sphere_oracle" in wanted:
        r = rng("bvp")
        for _ in range(k):
            q = _sample_q(r, bg, params, 0.6)
            try:
                sols.append(bvp.solve_lp(bg, params, q, T, seed=seed))
            except NonConvergenceError as exc:
                rows.append({"quantity": "solve_lp_converged", "location": _loc(q=q, tau=T), "lhs": 1.0,
                             "rhs": 0.0, "slack": -1.0, "ok": False})
                log.warning("solve_lp failed at %s: %s", q, exc)
    if "bvp" in wanted:
        for sol in sols:
            if not sol.in_omega:
                continue
            loc = _loc(q=sol.q, tau=T)
            rows.append(_row("grad_L_rel_error", loc, bvp.grad_L_check(sol)["rel_error"], 1e-4, 0.0))
            lap = bvp.laplacian_L_check(sol)
            rows.append(_row("laplacian_L_upper_bound", loc, lap["lhs"], lap["rhs"], 1e-6))
            gb = bvp.gradient_bound_check(sol)
            rows.append(_row("gradient_l_bound", loc, gb["lhs"], gb["rhs"], 1e-8))
            for row in bvp.speed_bound_check(sol, samples=10)["rows"]:
                rows.append(_row("speed_bound", _loc(q=sol.q, tau=row["tau"]), row["lhs"], row["rhs"], 1e-8))
    if "sphere_oracle" in wanted and isinstance(bg, Sphere) and not np.any(params.base_point(bg)):
        for sol in sols:
            ref = float(bvp.great_circle_oracle(bg, p, Sphere.polar_angle(sol.q), T)["L_p"])
            err = abs(sol.value.L_p - ref) / max(abs(ref), 1e-300)
            rows.append(_row("sphere_oracle_rel_error", _loc(q=sol.q, tau=T), err, 1e-6, 0.0))
    if "volume" in wanted:
        c = vb.get("c", 0.5 if p > 0.5 else None)
        if "grid" in vb:
            grid = vb["grid"]
        else:
            t1 = volume.tau_bar1(p, c, min(params.tau_max, bg.tau_max))
            hi = min(2.0, 0.9 * t1)
            grid = list(np.geomspace(0.05 * hi, hi, 5))
        sc = volume.monotonicity_scan(bg, params, grid, c, quad=_quad(vb), threads=threads)
        lw = sc.log_weighted
        for i in range(1, len(grid)):
            rows.append(_row("volume_log_weighted_increment", _loc(tau=grid[i]), lw[i] - lw[i - 1],
                             math.log1p(volume.MONO_SLACK), 0.0))
        for t, wv in zip(grid, sc.weighted):
            rows.append(_row("volume_gaussian_bound", _loc(tau=t), wv, sc.meta["bound"]))
    if "zp" in wanted:
        r = rng("zp")
        c = vb.get("c", 0.5 if p > 0.5 else None)
        for _ in range(k):
            v = _sample_v(r, bg, 0.3, params)
            try:
                res = volume.zp_monotone_check(bg, params, v, [0.25 * T, 0.5 * T, T], c=c)
            except DomainError:
                continue
            for row in res["rows"]:
                rows.append(_row("zp_log_derivative", _loc(v=v, tau=row["tau"]), row["dlogZ_fd"], 1e-7, 0.0))
    if "g_p" in wanted:
        ax = np.linspace(-0.3, 0.3, 5)
        Q = params.base_point(bg) + np.array(np.meshgrid(*([ax] * n), indexing="ij")).reshape(n, -1).T
        taus = list(np.geomspace(0.1, 1.0, 4))
        res = bvp.g_p_scan(bg, params, taus, Q)
        G = [row["G_p"] for row in res["rows"]]
        for i in range(1, len(G)):
            rows.append(_row("G_p_increment", _loc(tau=taus[i]), G[i] - G[i - 1], 0.0))
        mb = bvp.min_lp_bound_check(bg, params, T, Q)
        rows.append(_row("min_l_p_bound", _loc(tau=T), mb["min_l"], mb["bound"]))
    if "pde" in wanted and isinstance(bg, Flat) and n == 2 and p == 0.5:
        res = action.lp_pde_residual(bg, params, T)
        rows.append(_row("lp_pde_residual_sup", _loc(tau=T, grid=64), res["sup"], 1e-6, 0.0))
    if "scaling" in wanted and isinstance(bg, (Flat, Sphere)):
        r = rng("scaling")
        for _ in range(min(k, 2)):
            tb, rho = float(r.uniform(0.2, 2.0)), float(r.uniform(0.2, 1.5))
            a = volume.rescaled_volume(bg, params, tb, rho, path="identity", quad=_quad(vb), threads=threads)
            b = volume.rescaled_volume(bg, params, tb, rho, path="recompute", quad=_quad(vb), threads=threads)
            rows.append(_row("rescaled_volume_paths_rel_diff", _loc(tau_bar=tb, rho=rho),
                             abs(a - b) / abs(a), 1e-6, 0.0))
    return rows


def cmd_verify(cfg, bg, params, out, threads):
    rows = verify_rows(cfg, bg, params, threads)
    write_csv(out / "verify.csv", ["quantity", "location", "lhs", "rhs", "slack", "ok"], rows)
    bad = [r for r in rows if not r["ok"]]
    for r in bad:
        log.error("violated: %s at %s (slack %.3g)", r["quantity"], r["location"], r["slack"])
    return 2 if bad else 0


# ---------------------------------------------------------------------------
def _read_csv(path):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        cols = {h: [] for h in header}
        for row in rd:
            for h, v in zip(header, row):
                cols[h].append(v)
    return cols


def plot(csv_path, spec, output) -> Path:
    """Static SVG line plot of spec['y'] against spec['x'] for one or more CSV files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = [csv_path] if isinstance(csv_path, (str, Path)) else list(csv_path)
    x = spec.get("x", "tau")
    data = []
    for pth in paths:
        cols = _read_csv(pth)
        missing = [c for c in [x] + list(spec["y"]) if c not in cols]
        if missing:
            raise SchemaError(f"config.plot.y: columns {missing} not in {os.path.basename(pth)}")
        data.append((pth, cols))
    with matplotlib.rc_context({"svg.hashsalt": "lplab", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for pth, cols in data:
            xs = np.array(cols[x], float)
            for y in spec["y"]:
                label = y if len(data) == 1 else f"{Path(pth).stem}:{y}"
                ax.plot(xs, np.array(cols[y], float), marker="o", ms=3, label=label)
        if spec.get("logx"):
            ax.set_xscale("log")
        ax.set_xlabel(x)
        if "title" in spec:
            ax.set_title(spec["title"])
        ax.legend()
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    # drop the DTD reference and RDF block so the file is self-contained
    svg = re.sub(r"<!DOCTYPE[^>]*>\s*", "", buf.getvalue())
    svg = re.sub(r"\s*<metadata>.*?</metadata>", "", svg, flags=re.S)
    Path(output).write_text(svg)
    return Path(output)


def cmd_plot(cfg, bg, params, out, threads):
    spec = cfg["plot"]
    plot(spec["csv"], spec, out / spec.get("output", "plot.svg"))
    return 0


HANDLERS = {"geodesic": cmd_geodesic, "reduced-distance": cmd_reduced_distance, "volume": cmd_volume,
            "monotonicity": cmd_monotonicity, "rescaled": cmd_rescaled, "verify": cmd_verify,
            "plot": cmd_plot}
BLOCKS = {"reduced-distance": "reduced_distance"}


def run(command, config_path, out=None, threads=None) -> int:
    """Execute one command; returns the exit status."""
    try:
        cfg = load_config(config_path)
        block = BLOCKS.get(command, command)
        if block not in ("verify",) and block not in cfg:
            raise SchemaError(f"config.{block}: required for the {command} command")
        outdir = Path(out or cfg.get("out", "."))
        outdir.mkdir(parents=True, exist_ok=True)
        k = threads or cfg.get("threads", 1)
        bg = params = None
        if command != "plot":
            for key in ("background", "p"):
                if key not in cfg:
                    raise SchemaError(f"config.{key}: required for the {command} command")
            bg, params = _setup(cfg)
        return HANDLERS[command](cfg, bg, params, outdir, k)
    except FormulaViolation as exc:
        log.error("check failed: %s", exc)
        return 2
    except (LplabError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lplab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out")
    ap.add_argument("--threads", type=int)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    return run(args.command, args.config, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
