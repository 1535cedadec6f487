import json
import os

import numpy as np
import pytest

from cscklab import cli


def write_cfg(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


VERIFY_FLAT = """\
[lattice]
n = 1
N = 16

[background]

[checks]
phi = zero
"""

SOLVE_CURVED = """\
[lattice]
n = 1
N = 32

[background]
seed = 3
band = 2
amplitude = 0.03
decay = 3.0

[solver]
tol_residual = 1e-8
max_iters = 30
"""

IDENTITIES_SMALL = """\
[lattice]
n = 1
N = 16

[background]
seed = 3
band = 2
amplitude = 0.02

[checks]
phi = random
phi_seed = 7
phi_amplitude = 0.02
samples = 500
"""


def test_verify_flat_zero_exit_zero(tmp_path):
    cfg = write_cfg(tmp_path, VERIFY_FLAT)
    out = str(tmp_path / "out")
    assert cli.run(cfg, mode="verify", outdir=out) == 0
    rep = json.load(open(os.path.join(out, "report.json")))
    assert rep["schema"] == 1
    assert all(c["pass"] for c in rep["checks"])
    assert all("anchor" in c for c in rep["checks"])
    assert os.path.exists(os.path.join(out, "fields.csv"))
    assert os.path.exists(os.path.join(out, "residual_history.csv"))


def test_malformed_key_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, VERIFY_FLAT + "bogus_key = 1\n")
    assert cli.run(cfg, mode="verify", outdir=str(tmp_path / "o")) == 2
    err = capsys.readouterr().err
    assert "line" in err and "bogus_key" in err


def test_bad_value_exit_2_with_line(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[lattice]\nn = 1\nN = seventeen\n")
    assert cli.run(cfg, mode="verify", outdir=str(tmp_path / "o")) == 2
    err = capsys.readouterr().err
    assert "line 3" in err


def test_missing_config_exit_2(tmp_path):
    assert cli.run(str(tmp_path / "nope.ini"), mode="verify",
                   outdir=str(tmp_path / "o")) == 2


def test_unparseable_config_exit_2(tmp_path):
    cfg = write_cfg(tmp_path, "not an ini file at all\n")
    assert cli.run(cfg, mode="verify", outdir=str(tmp_path / "o")) == 2


def test_solve_mode_report_contents(tmp_path):
    cfg = write_cfg(tmp_path, SOLVE_CURVED)
    out = str(tmp_path / "out")
    assert cli.run(cfg, mode="solve", outdir=out) == 0
    rep = json.load(open(os.path.join(out, "report.json")))
    names = {c["name"]: c for c in rep["checks"]}
    assert names["residual_ma"]["value"] <= 1e-8
    assert names["residual_scal"]["value"] <= 1e-8
    assert names["flat_recovery"]["value"] <= 1e-6
    hist = open(os.path.join(out, "residual_history.csv")).read().splitlines()
    assert hist[0] == "iteration,residual_ma,residual_scal"
    assert len(hist) > 2


def test_identities_mode(tmp_path):
    cfg = write_cfg(tmp_path, IDENTITIES_SMALL)
    out = str(tmp_path / "out")
    assert cli.run(cfg, mode="identities", outdir=out) == 0
    rep = json.load(open(os.path.join(out, "report.json")))
    names = {c["name"] for c in rep["checks"]}
    assert {"gradF", "bochner", "yau2nd", "localG",
            "square220", "cancel222"} <= names
    anchors = {c["name"]: c["anchor"] for c in rep["checks"]}
    assert anchors["square220"] == "Eq2.20"


def test_local_mode(tmp_path):
    cfg = write_cfg(tmp_path,
                    "[lattice]\nn = 1\nN = 8\n[checks]\nradius = 1.0\n"
                    "h = 0.03125\n")
    out = str(tmp_path / "out")
    assert cli.run(cfg, mode="local", outdir=out) == 0
    rep = json.load(open(os.path.join(out, "report.json")))
    names = {c["name"] for c in rep["checks"]}
    assert {"abp", "moser"} <= names
    first = open(os.path.join(out, "fields.csv")).readline().strip()
    assert first == "domain,d,h"


def test_determinism_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, IDENTITIES_SMALL)
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.run(cfg, mode="identities", outdir=out1) == 0
    assert cli.run(cfg, mode="identities", outdir=out2) == 0
    b1 = open(os.path.join(out1, "report.json"), "rb").read()
    b2 = open(os.path.join(out2, "report.json"), "rb").read()
    assert b1 == b2


def test_seed_override_changes_report(tmp_path):
    cfg = write_cfg(tmp_path, IDENTITIES_SMALL)
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.run(cfg, mode="identities", outdir=out1, seed=1) == 0
    assert cli.run(cfg, mode="identities", outdir=out2, seed=2) == 0
    r1 = json.load(open(os.path.join(out1, "report.json")))
    r2 = json.load(open(os.path.join(out2, "report.json")))
    assert r1["seed"] != r2["seed"]


def test_report_mode_renders_figures(tmp_path):
    cfg = write_cfg(tmp_path, SOLVE_CURVED)
    out = str(tmp_path / "out")
    assert cli.run(cfg, mode="report", outdir=out) == 0
    for fname in ("phi.png", "F.png", "residuals.png", "checks.png"):
        assert os.path.getsize(os.path.join(out, fname)) > 1000, fname


def test_report_serialization_17g(tmp_path):
    # values are emitted as bare 17-significant-digit numbers
    rep = {"x": 1.0 / 3.0, "flag": True, "none": None, "arr": [1, 2.5]}
    text = cli._emit_json(rep)
    assert "0.33333333333333331" in text
    assert json.loads(text) == {"x": 1.0 / 3.0, "flag": True,
                                "none": None, "arr": [1, 2.5]}


def test_explicit_mode_background(tmp_path):
    cfg = write_cfg(tmp_path, """\
[lattice]
n = 1
N = 16

[background]
modes = 1 0 : 0.01 ; 0 2 : 0.005

[checks]
phi = random
phi_seed = 2
phi_amplitude = 0.01
""")
    out = str(tmp_path / "out")
    assert cli.run(cfg, mode="verify", outdir=out) == 0
    rep = json.load(open(os.path.join(out, "report.json")))
    # a random phi on the explicit-mode background gives a nontrivial F
    assert rep["summary"]["sup_F"] != 0.0


def test_mode_background_positivity_exit_2(tmp_path):
    cfg = write_cfg(tmp_path, """\
[lattice]
n = 1
N = 32

[background]
modes = 3 0 : 0.2
""")
    # amplitude 0.2 at wave number 3 violates metric positivity
    assert cli.run(cfg, mode="verify", outdir=str(tmp_path / "o")) == 2


def test_bad_mode_entry_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, """\
[lattice]
n = 1
N = 16

[background]
modes = 1 : 0.01
""")
    # one wave number for n=1 needs 2 entries (x and y axes)
    assert cli.run(cfg, mode="verify", outdir=str(tmp_path / "o")) == 2
