import json
import math
import subprocess
import sys

import numpy as np
import pytest

from mode_sleuth import cli, estimator
from mode_sleuth.data import read_csv
from mode_sleuth.errors import NoConvergence
from mode_sleuth.model import ModeModel, ModeSpec, pin_shapes


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def test_simulate_ou(tmp_path):
    out = tmp_path / "ou.csv"
    assert run("simulate", "--model", "ou", "--mu", 1, "--sigma", 1.4142, "--dt", 0.1, "--n", 20000, "--seed", 7, "--out", out) == 0
    data = read_csv(out)
    assert len(data) == 20000
    meta = json.loads((tmp_path / "ou.csv.meta.json").read_text())
    assert meta["seed"] == 7 and meta["model"]["kind"] == "ou"


def test_simulate_reproducible(tmp_path):
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    for path, seed in ((a, 3), (b, 3), (c, 4)):
        assert run("simulate", "--model", "fou", "--dt", 0.01, "--n", 500, "--noise", 0.01, "--missing", 0.1,
                   "--seed", seed, "--out", path) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()
    assert (tmp_path / "a.csv.meta.json").read_bytes() == (tmp_path / "b.csv.meta.json").read_bytes()


def test_simulate_grid(tmp_path):
    cfg = {
        "format": "grid-model/1",
        "nodes": [{"name": str(i + 1), "M": 1.0, "gamma": 1.0, "p": 0.0} for i in range(3)],
        "edges": [{"from": "1", "to": "2", "B": 1.0}, {"from": "2", "to": "3", "B": 1.0}],
        "J": [2.0, 3.0, 4.0],
        "K": [1.0, 1.0, 1.0],
    }
    (tmp_path / "grid.json").write_text(json.dumps(cfg))
    out = tmp_path / "g.csv"
    assert run("simulate", "--grid", tmp_path / "grid.json", "--pmus", "1,3", "--dt", 0.1, "--n", 100, "--out", out) == 0
    assert read_csv(out).channels == ("f_1", "f_3", "dphi_3_1")


def test_usage_errors(tmp_path, capsys):
    assert run("fit", "--data", tmp_path / "missing.csv", "--real", 1, "--complex", 0) == 2
    assert run("simulate", "--model", "ou", "--dt", 0.1, "--n", 0, "--out", tmp_path / "x.csv") == 2
    assert run("simulate", "--model", "grid", "--dt", 0.1, "--n", 10, "--out", tmp_path / "x.csv") == 2
    with pytest.raises(SystemExit) as exc:
        run("fit", "--data", "x.csv")
    assert exc.value.code == 2


def test_no_convergence_exit(tmp_path, monkeypatch):
    run("simulate", "--model", "ou", "--dt", 0.1, "--n", 100, "--out", tmp_path / "d.csv")

    def boom(*a, **k):
        raise NoConvergence("all starts failed", {"starts": 0})

    monkeypatch.setattr(estimator, "fit_mle", boom)
    diag = tmp_path / "diag.json"
    assert run("fit", "--data", tmp_path / "d.csv", "--real", 1, "--complex", 0, "--diagnostics", diag) == 1
    assert json.loads(diag.read_text())["diagnostics"] == {"starts": 0}


def test_simulate_fit_round_trip(tmp_path):
    data = tmp_path / "ou.csv"
    run("simulate", "--model", "ou", "--mu", 1, "--sigma", math.sqrt(2), "--dt", 0.1, "--n", 2000, "--noise", 1e-4,
        "--seed", 11, "--out", data)
    rep = tmp_path / "fit.json"
    assert run("fit", "--data", data, "--real", 1, "--complex", 0, "--starts", 3, "--out", rep) == 0
    doc = json.loads(rep.read_text())
    assert doc["seed"] == 0
    model = ModeModel.from_dict(doc["model"])
    assert 0.85 <= model.spec.real_rates[0] <= 1.15
    assert 0.9 <= model.S[0, 0] <= 1.1
    again = tmp_path / "fit2.json"
    run("fit", "--data", data, "--real", 1, "--complex", 0, "--starts", 3, "--out", again)
    assert rep.read_bytes() == again.read_bytes()


def test_compare_csv(tmp_path, capsys):
    data = tmp_path / "ou.csv"
    run("simulate", "--model", "ou", "--dt", 0.1, "--n", 300, "--noise", 0.0025, "--seed", 2, "--out", data)
    assert run("compare", "--data", data, "--candidates", "1,0", "--starts", 2, "--format", "csv") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "n_real,n_complex,log_z,method,bic,posterior"
    assert lines[1].startswith("1,0,") and lines[1].endswith(",1")


def test_spectrum(tmp_path, capsys):
    data = tmp_path / "w.csv"
    run("simulate", "--model", "ou", "--mu", 0.1, "--dt", 0.1, "--n", 100000, "--seed", 3, "--out", data)
    pg = tmp_path / "pg.csv"
    assert run("spectrum", "--data", data, "--band", "0.16,1.25", "--out", pg) == 0
    rep = json.loads(capsys.readouterr().out)
    assert abs(rep["slopes"][0]["slope"] + 2) < 0.3
    assert pg.read_text().startswith("freq_hz,power\n")


def test_spectrum_nonuniform(tmp_path):
    bad = tmp_path / "bad.csv"
    t = np.cumsum(np.random.default_rng(0).uniform(0.05, 0.15, 100))
    bad.write_text("t,x\n" + "".join(f"{a},{b}\n" for a, b in zip(t, np.zeros(100))))
    assert run("spectrum", "--data", bad) == 2


def _stream_model(path):
    spec = ModeSpec((1.0,), ())
    B, pins, _ = pin_shapes(np.array([[1.0], [0.5]]), spec)
    from mode_sleuth.model import ModeShapes

    m = ModeModel(spec, ModeShapes(B, pins), np.array([[1.0]]), np.zeros(2), 0.01 * np.eye(2), ("a", "b"))
    path.write_text(m.to_json())


def test_stream_skips_malformed(tmp_path, capsys):
    _stream_model(tmp_path / "m.json")
    lines = ["0.0,a=0.1,b=0.05", "garbage", "0.1,a=0.2", "0.1,a=0.3", "0.2,c=1.0", "0.3,b=nan", "0.4,a=0.0,b=0.1"]
    (tmp_path / "s.txt").write_text("\n".join(lines) + "\n")
    assert run("stream", "--forget", 0.5, "--model", tmp_path / "m.json", "--input", tmp_path / "s.txt") == 0
    cap = capsys.readouterr()
    out = [json.loads(l) for l in cap.out.splitlines()]
    assert [o["t"] for o in out] == [0.0, 0.1, 0.4]
    assert "4 malformed line(s) skipped" in cap.err


def test_stream_requires_positive_forget(tmp_path):
    _stream_model(tmp_path / "m.json")
    assert run("stream", "--forget", 0, "--model", tmp_path / "m.json", "--input", tmp_path / "m.json") == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mode_sleuth", "simulate", "--model", "langevin", "--dt", "0.1",
                          "--n", "10", "--out", str(tmp_path / "l.csv")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert len(read_csv(tmp_path / "l.csv")) == 10
