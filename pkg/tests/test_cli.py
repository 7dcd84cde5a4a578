import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from lplab.cli import main, run, validate_config
from lplab.errors import SchemaError

FLAT = {"kind": "flat", "n": 2}
SPHERE = {"kind": "sphere", "n": 2, "a": 1.0}


def _cfg(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_verify_flat_ok_and_thread_invariant(tmp_path):
    cfg = _cfg(tmp_path, {"background": FLAT, "p": 0.5, "seed": 7, "verify": {"samples": 3}})
    assert run("verify", cfg, tmp_path / "a", 1) == 0
    assert run("verify", cfg, tmp_path / "b", 4) == 0
    a = (tmp_path / "a" / "verify.csv").read_bytes()
    assert a == (tmp_path / "b" / "verify.csv").read_bytes()
    rows = _rows(tmp_path / "a" / "verify.csv")
    assert {r["ok"] for r in rows} == {"true"}
    assert "lp_pde_residual_sup" in {r["quantity"] for r in rows}
    assert a.count(b"\r\n") == len(rows) + 1


def test_verify_subset_of_suites(tmp_path):
    cfg = _cfg(tmp_path, {"background": SPHERE, "p": 0.6, "seed": 1,
                          "verify": {"suites": ["sphere_oracle", "zp"], "samples": 2}})
    assert run("verify", cfg, tmp_path) == 0
    qs = {r["quantity"] for r in _rows(tmp_path / "verify.csv")}
    assert qs == {"sphere_oracle_rel_error", "zp_log_derivative"}


def test_sphere_monotonicity(tmp_path):
    cfg = _cfg(tmp_path, {"background": SPHERE, "p": 0.75,
                          "monotonicity": {"grid": [0.1, 0.4, 0.9, 1.6], "c": 0.5}})
    assert run("monotonicity", cfg, tmp_path) == 0
    rows = _rows(tmp_path / "monotonicity.csv")
    w = [float(r["weighted"]) for r in rows]
    assert all(b <= a * (1 + 1e-8) for a, b in zip(w, w[1:]))
    meta = json.loads((tmp_path / "monotonicity_meta.json").read_text())
    assert meta["A0"] == pytest.approx(1.0)


def test_corrupted_weight_exits_2(tmp_path):
    cfg = _cfg(tmp_path, {"background": SPHERE, "p": 0.75,
                          "monotonicity": {"grid": list(np.geomspace(0.05, 1.9, 10)), "c": 0.5,
                                           "weight_sign": -1}})
    assert run("monotonicity", cfg, tmp_path) == 2


def test_schema_errors_have_paths(tmp_path, caplog):
    cfg = _cfg(tmp_path, {"background": FLAT, "p": 1.5, "verify": {}})
    assert run("verify", cfg, tmp_path) == 1
    assert "config.p" in caplog.text
    with pytest.raises(SchemaError, match=r"config\.volume\.tau"):
        validate_config({"background": FLAT, "p": 0.5, "volume": {"tau": [0.5, 0.2]}})
    with pytest.raises(SchemaError, match=r"config\.background\.kind"):
        validate_config({"background": {"kind": "torus"}, "p": 0.5})
    with pytest.raises(SchemaError, match=r"config\.geodesic"):
        validate_config({"background": FLAT, "p": 0.5, "geodesic": {"v": [1, 0]}})


def test_missing_block_and_file(tmp_path):
    cfg = _cfg(tmp_path, {"background": FLAT, "p": 0.5})
    assert run("volume", cfg, tmp_path) == 1
    assert run("verify", str(tmp_path / "absent.json"), tmp_path) == 1


def test_geodesic_csv(tmp_path):
    cfg = _cfg(tmp_path, {"background": FLAT, "p": 0.5,
                          "geodesic": {"v": [0.3, -0.2], "tau_bar": 2.0, "samples": 9}})
    assert run("geodesic", cfg, tmp_path) == 0
    rows = _rows(tmp_path / "geodesic.csv")
    assert len(rows) == 9
    last = rows[-1]
    assert float(last["tau"]) == pytest.approx(2.0)
    # straight chart line x = tau^{1-p} v / (1-p)
    assert float(last["x0"]) == pytest.approx(0.6 * math.sqrt(2.0), rel=1e-9)
    for r in rows:
        for k in ("s", "tau", "x0", "x1", "L_p"):
            digits = r[k].lstrip("-").split("e")[0].replace(".", "").lstrip("0")
            assert len(digits) <= 17


def test_reduced_distance_csv(tmp_path):
    cfg = _cfg(tmp_path, {"background": FLAT, "p": 0.5,
                          "reduced_distance": {"q": [[1.0, 0.0], [0.0, 2.0]], "tau": [0.5, 1.0]}})
    assert run("reduced-distance", cfg, tmp_path) == 0
    rows = _rows(tmp_path / "reduced_distance.csv")
    assert len(rows) == 4
    for r in rows:
        q = np.array([float(r["q0"]), float(r["q1"])])
        tau = float(r["tau"])
        assert float(r["l_p"]) == pytest.approx(q @ q / (4 * tau), rel=1e-9)


def test_volume_csv(tmp_path):
    cfg = _cfg(tmp_path, {"background": FLAT, "p": 0.5,
                          "volume": {"tau": [0.3, 1.0], "quad": {"order": 12, "angular": 4}}})
    assert run("volume", cfg, tmp_path) == 0
    for r in _rows(tmp_path / "volume.csv"):
        assert float(r["value"]) == pytest.approx(4 * math.pi, rel=1e-10)


def test_rescaled_csv(tmp_path):
    cfg = _cfg(tmp_path, {"background": SPHERE, "p": 0.6,
                          "rescaled": {"rho": 1.0, "tau_bar_grid": [0.1, 0.5, 1.0, 2.0]}})
    assert run("rescaled", cfg, tmp_path) == 0
    rows = _rows(tmp_path / "rescaled.csv")
    assert {r["monotone_ok"] for r in rows} == {"true"}
    meta = json.loads((tmp_path / "rescaled_meta.json").read_text())
    assert meta["ok"] and meta["limit_error"] < 1e-3


def test_plot_deterministic(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("tau,value\r\n0.1,1\r\n0.2,0.5\r\n")
    spec = {"csv": str(data), "y": ["value"], "logx": True, "title": "t"}
    cfg = _cfg(tmp_path, {"plot": dict(spec, output="a.svg")})
    assert run("plot", cfg, tmp_path) == 0
    cfg = _cfg(tmp_path, {"plot": dict(spec, output="b.svg")})
    assert run("plot", cfg, tmp_path) == 0
    a = (tmp_path / "a.svg").read_text()
    assert a == (tmp_path / "b.svg").read_text()
    assert "<!DOCTYPE" not in a and "http://www.w3.org/Graphics" not in a
    assert "<metadata>" not in a and "xlink:href=\"http" not in a


def test_plot_missing_column(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("tau,value\r\n0.1,1\r\n")
    cfg = _cfg(tmp_path, {"plot": {"csv": str(data), "y": ["nope"]}})
    assert run("plot", cfg, tmp_path) == 1


def test_entry_point(tmp_path):
    cfg = _cfg(tmp_path, {"background": FLAT, "p": 0.5, "verify": {"suites": ["flow"], "samples": 1}})
    assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == 0
    res = subprocess.run([sys.executable, "-m", "lplab.cli", "bogus", "--config", cfg],
                         capture_output=True)
    assert res.returncode == 2
