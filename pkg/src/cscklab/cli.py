"""Command-line harness: config ingestion, experiment runs, report emission.

Config files are INI-style key=value with sections [lattice], [background],
[solver] and [checks]; see README for the documented keys.  Every run writes
report.json, fields.csv and residual_history.csv into the output directory;
report mode additionally renders summary figures as PNG.

All floating-point output is serialized with 17 significant digits so that
identical configurations produce byte-identical reports.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from .lattice import (
    Lattice,
    ScalarField,
    dump_fields_csv,
    integrate,
    random_band_limited,
)
from .kahler import BackgroundGeometry, NotKahler, assemble, grad_norms
from . import estimates
from . import identities
from . import localanalysis
from .solver import (
    LostPositivity,
    NotConverged,
    SolverConfig,
    dump_residual_history,
    residuals,
    solve_csck,
)

SCHEMA = 1

# Anchor strings tying each reported check to its source statement.
ANCHORS = {
    "gradF": "EqGradF",
    "square220": "Eq2.20",
    "cancel222": "Eq2.22",
    "bochner": "Eq4.3",
    "yau2nd": "Eq3.6",
    "localG": "Eq6.6",
    "prop21": "Prop2.1",
    "thm21": "Thm2.1",
    "thm22": "Thm2.2",
    "l1_gradF": "Sec4",
    "thm52": "Thm5.2",
    "entropy": "Thm1.1",
    "volume": "Eq1.1",
    "jensen": "Thm1.1",
    "am_gm": "Sec3",
    "recip_product": "Sec3",
    "trace_lower": "Sec3",
    "iteration_chain": "Sec3",
    "det_identity": "Eq1.1",
    "kenergy": "Eq5.30",
    "w2p": "Sec3Thm",
    "residual_ma": "Eq1.1",
    "residual_scal": "Eq1.2",
    "flat_recovery": "Eq1.1",
    "abp": "LemABP",
    "moser": "Lem4.2",
}


class ConfigError(Exception):
    """Malformed configuration; carries a 1-based line number when known."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = "line %d: %s" % (lineno, message)
        super().__init__(message)
        self.lineno = lineno


# -- deterministic JSON -----------------------------------------------------


def _emit_json(obj):
    """Serialize with fixed 17-significant-digit floats."""
    if isinstance(obj, dict):
        items = ("%s: %s" % (json.dumps(str(k)), _emit_json(v))
                 for k, v in obj.items())
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_emit_json(v) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        return format(float(obj), ".17g")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    return json.dumps(obj)


def write_report(path, report):
    with open(path, "w") as fh:
        fh.write(_emit_json(report))
        fh.write("\n")


# -- config parsing ---------------------------------------------------------

_KNOWN_KEYS = {
    "lattice": {"n", "N"},
    "background": {"modes", "seed", "band", "amplitude", "decay"},
    "solver": {"max_iters", "damping", "tol_residual", "continuation_steps",
               "linear_tol", "linear_max_iters", "seed"},
    "checks": {"phi", "phi_seed", "phi_band", "phi_amplitude", "phi_decay",
               "tol_vol", "tol_id", "max_principle", "pointwise",
               "samples", "radius", "h", "kenergy_directions",
               "identity_names", "B_prime"},
}


def _key_lineno(path, section, key):
    """Best-effort 1-based line number of `key` inside `section`."""
    current = None
    try:
        with open(path) as fh:
            for i, line in enumerate(fh, 1):
                s = line.strip()
                if s.startswith("[") and s.endswith("]"):
                    current = s[1:-1].strip()
                elif current == section and "=" in s:
                    if s.split("=", 1)[0].strip() == key:
                        return i
    except OSError:
        pass
    return None


def load_config(path):
    """Parse and validate the run configuration file."""
    if not os.path.isfile(path):
        raise ConfigError("config file not found: %s" % path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh, source=path)
    except configparser.ParsingError as exc:
        errors = getattr(exc, "errors", None)
        lineno = errors[0][0] if errors else getattr(exc, "lineno", None)
        raise ConfigError("unparseable config: %s" % exc, lineno)
    except configparser.Error as exc:
        raise ConfigError("unparseable config: %s" % exc)

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError("unknown section [%s]" % section)
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(
                    "unknown key '%s' in [%s]" % (key, section),
                    _key_lineno(path, section, key))

    def get(section, key, cast, default):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        try:
            if cast is bool:
                low = raw.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return cast(raw)
        except ValueError:
            raise ConfigError(
                "bad value %r for %s.%s" % (raw, section, key),
                _key_lineno(path, section, key))

    cfg = {
        "n": get("lattice", "n", int, 1),
        "N": get("lattice", "N", int, 32),
        "bg_modes": get("background", "modes", str, ""),
        "bg_seed": get("background", "seed", int, 0),
        "bg_band": get("background", "band", int, 2),
        "bg_amplitude": get("background", "amplitude", float, 0.0),
        "bg_decay": get("background", "decay", float, 3.0),
        "solver": SolverConfig(
            max_iters=get("solver", "max_iters", int, 50),
            damping=get("solver", "damping", float, 1.0),
            tol_residual=get("solver", "tol_residual", float, 1e-10),
            continuation_steps=get("solver", "continuation_steps", int, 1),
            linear_tol=get("solver", "linear_tol", float, 1e-10),
            linear_max_iters=get("solver", "linear_max_iters", int, 400),
            seed=get("solver", "seed", int, 0),
        ),
        "phi": get("checks", "phi", str, "zero"),
        "phi_seed": get("checks", "phi_seed", int, 0),
        "phi_band": get("checks", "phi_band", int, 2),
        "phi_amplitude": get("checks", "phi_amplitude", float, 0.02),
        "phi_decay": get("checks", "phi_decay", float, 3.0),
        "tol_vol": get("checks", "tol_vol", float, estimates.TOL_VOL),
        "max_principle": get("checks", "max_principle", bool, True),
        "pointwise": get("checks", "pointwise", bool, True),
        "samples": get("checks", "samples", int, 10000),
        "radius": get("checks", "radius", float, 1.0),
        "h": get("checks", "h", float, 1.0 / 64),
        "identity_names": get("checks", "identity_names", str,
                              "gradF,bochner,yau2nd,localG"),
        "B_prime": get("checks", "B_prime", float, 0.5),
    }
    if cfg["n"] not in (1, 2):
        raise ConfigError("lattice.n must be 1 or 2",
                          _key_lineno(path, "lattice", "n"))
    if cfg["N"] < 8 or cfg["N"] & (cfg["N"] - 1):
        raise ConfigError("lattice.N must be a power of two >= 8",
                          _key_lineno(path, "lattice", "N"))
    phi_src = cfg["phi"].split(":", 1)[0]
    if phi_src not in ("zero", "file", "random", "solve"):
        raise ConfigError("checks.phi must be zero|file:PATH|random|solve",
                          _key_lineno(path, "checks", "phi"))
    if phi_src == "file":
        fpath = cfg["phi"].split(":", 1)[1]
        if not os.path.isfile(fpath):
            raise ConfigError("phi file not found: %s" % fpath,
                              _key_lineno(path, "checks", "phi"))
    return cfg


def _parse_modes(text, n):
    """Mode list 'k1 .. k2n : amp ; ...' -> list of (kvec, amplitude)."""
    modes = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ":" not in chunk:
            raise ConfigError("mode entry %r lacks ':amplitude'" % chunk)
        kpart, apart = chunk.rsplit(":", 1)
        try:
            kvec = [int(t) for t in kpart.split()]
            amp = float(apart)
        except ValueError:
            raise ConfigError("bad mode entry %r" % chunk)
        if len(kvec) != 2 * n:
            raise ConfigError(
                "mode %r needs %d wave numbers" % (chunk, 2 * n))
        modes.append((kvec, amp))
    return modes


def build_background(cfg):
    """Background geometry from the explicit mode list or a seeded draw."""
    lat = Lattice(cfg["n"], cfg["N"])
    modes = _parse_modes(cfg["bg_modes"], cfg["n"])
    if modes:
        vals = np.zeros(lat.shape)
        for kvec, amp in modes:
            phase = np.zeros(lat.shape)
            for ax, (k, x) in enumerate(zip(kvec, lat.coords())):
                phase = phase + 2.0 * np.pi * k * x
            vals = vals + amp * np.cos(phase)
        rho0 = ScalarField(lat, vals - vals.mean())
    elif cfg["bg_amplitude"] > 0.0:
        rng = np.random.default_rng(cfg["bg_seed"])
        rho0 = random_band_limited(lat, rng, band=cfg["bg_band"],
                                   amplitude=cfg["bg_amplitude"],
                                   decay=cfg["bg_decay"])
    else:
        return BackgroundGeometry.flat(lat)
    try:
        return BackgroundGeometry.from_potential(rho0)
    except NotKahler:
        raise ConfigError("background amplitudes violate positivity")


def build_phi(cfg, background):
    """The phi source named by the config (zero | file:PATH | random)."""
    lat = background.lattice
    src = cfg["phi"].split(":", 1)[0]
    if src == "zero":
        return ScalarField.constant(lat, 0.0)
    if src == "random":
        rng = np.random.default_rng(cfg["phi_seed"])
        return random_band_limited(lat, rng, band=cfg["phi_band"],
                                   amplitude=cfg["phi_amplitude"],
                                   decay=cfg["phi_decay"])
    if src == "file":
        path = cfg["phi"].split(":", 1)[1]
        vals = np.loadtxt(path)
        try:
            vals = vals.reshape(lat.shape)
        except ValueError:
            raise ConfigError("phi file has %d entries, lattice needs %d"
                              % (vals.size, int(np.prod(lat.shape))))
        return ScalarField(lat, vals)
    raise ConfigError("phi source %r not buildable here" % cfg["phi"])


# -- check plumbing ---------------------------------------------------------


def _check_entry(name, site, value, bound, margin, passed):
    return {
        "name": name,
        "anchor": ANCHORS.get(name, "invented"),
        "site": list(site),
        "value": float(value),
        "bound": float(bound),
        "margin": float(margin),
        "pass": bool(passed),
    }


def _from_result(cr):
    return _check_entry(cr.name, cr.site, cr.value, cr.bound, cr.margin,
                        cr.passed)


def _summary(state):
    rep = estimates.build_report(state, with_max_principle=False)
    return {
        "entropy": rep.entropy,
        "sup_F": rep.sup_F,
        "inf_F": rep.inf_F,
        "sup_phi": rep.sup_phi,
        "osc_phi": rep.osc_phi,
        "sup_grad_phi": rep.sup_grad_phi,
        "sup_ratio": rep.sup_ratio,
        "sup_lap": rep.sup_lap,
    }


def _verify_checks(state, cfg):
    """Conservation, Jensen, pointwise, and max-principle check entries."""
    checks = []
    vol_def = estimates.volume_defect(state)
    checks.append(_check_entry("volume", (), vol_def, cfg["tol_vol"],
                               cfg["tol_vol"] - vol_def,
                               vol_def <= cfg["tol_vol"]))
    ent = estimates.entropy(state)
    checks.append(_check_entry("jensen", (), -ent, cfg["tol_vol"],
                               ent + cfg["tol_vol"],
                               ent >= -cfg["tol_vol"]))
    if cfg["pointwise"]:
        for name, viol in estimates.pointwise_inequalities(state).items():
            checks.append(_check_entry(name, (), viol, 1e-12,
                                       1e-12 - viol, viol <= 1e-12))
    if cfg["max_principle"]:
        checks.append(_from_result(estimates.prop21_check(state)))
        try:
            checks.append(_from_result(estimates.thm21_check(state)))
        except estimates.DegenerateInput:
            pass
        checks.append(_from_result(estimates.thm22_check(state)))
    return checks


def _identity_checks(state, cfg, rng):
    checks = []
    derivs = identities.StateDerivs(state)
    for name in [s.strip() for s in cfg["identity_names"].split(",") if s]:
        ic = identities.run_identity(name, state, B_prime=cfg["B_prime"],
                                     derivs=derivs)
        checks.append(_check_entry(ic.name, (), ic.max_residual,
                                   ic.tolerance,
                                   ic.tolerance - ic.max_residual,
                                   ic.passed))
    del derivs
    for name, fn in (("square220", identities.square220_pointwise),
                     ("cancel222", identities.cancel222_pointwise)):
        worst = float(fn(rng, state.lattice.n, cfg["samples"]).max())
        checks.append(_check_entry(name, (), worst, 1e-10,
                                   1e-10 - worst, worst <= 1e-10))
    return checks


def _local_checks(cfg, rng):
    grid = localanalysis.BallGrid(2, cfg["radius"], cfg["h"])
    u = grid.field(lambda x, y: 1.0 - (x ** 2 + y ** 2) / cfg["radius"] ** 2)
    c_abp = localanalysis.abp_check(grid, u, name="abp")
    a = (np.ones_like(u), np.zeros_like(u), np.ones_like(u))
    w = grid.field(lambda x, y: np.cos(np.pi * x / (2 * cfg["radius"]))
                   * np.cos(np.pi * y / (2 * cfg["radius"])))
    lam = (np.pi / (2 * cfg["radius"])) ** 2
    f = np.full_like(u, -2.0 * lam)
    g = np.zeros_like(u)
    c_moser = localanalysis.moser_supbound_check(grid, w, a, f, g,
                                                name="moser")
    checks = [_from_result(c_abp), _from_result(c_moser)]
    fields = {"u_abp": u, "u_moser": w}
    return grid, fields, checks


# -- figure rendering -------------------------------------------------------


def _render_figures(outdir, state, result=None, checks=()):
    """Summary PNGs next to the delimited output (report mode)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lat = state.lattice
    sl = (slice(None), slice(None)) + (0,) * (2 * lat.n - 2)
    for fname, fld, title in (("phi.png", state.phi, "phi"),
                              ("F.png", state.F, "F")):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        im = ax.imshow(fld.values[sl].T, origin="lower",
                       extent=(0, 1, 0, 1), cmap="RdBu_r")
        fig.colorbar(im, ax=ax)
        ax.set_title(title + " (x1-y1 slice)")
        fig.tight_layout()
        fig.savefig(os.path.join(outdir, fname), dpi=110)
        plt.close(fig)

    if result is not None and result.history_scal:
        fig, ax = plt.subplots(figsize=(4.6, 3.4))
        ax.semilogy(result.history_ma, "o-", label="density")
        ax.semilogy(result.history_scal, "s-", label="trace")
        ax.set_xlabel("outer iteration")
        ax.set_ylabel("sup residual")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(outdir, "residuals.png"), dpi=110)
        plt.close(fig)

    if checks:
        names = [c["name"] for c in checks]
        margins = [c["margin"] for c in checks]
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(names)), 3.4))
        colors = ["tab:blue" if c["pass"] else "tab:red" for c in checks]
        ax.bar(range(len(names)), margins, color=colors)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("margin")
        ax.axhline(0.0, color="k", lw=0.8)
        fig.tight_layout()
        fig.savefig(os.path.join(outdir, "checks.png"), dpi=110)
        plt.close(fig)


# -- modes ------------------------------------------------------------------


def _empty_history(path):
    with open(path, "w") as fh:
        fh.write("iteration,residual_ma,residual_scal\n")


def _run_mode(mode, cfg, outdir, render=False):
    os.makedirs(outdir, exist_ok=True)
    rng = np.random.default_rng(cfg["solver"].seed)
    report = {"schema": SCHEMA, "mode": mode, "seed": cfg["solver"].seed,
              "n": cfg["n"], "N": cfg["N"]}
    checks = []
    result = None

    if mode == "local":
        grid, fields, checks = _local_checks(cfg, rng)
        localanalysis.dump_ball_fields_csv(
            os.path.join(outdir, "fields.csv"), grid, fields)
        _empty_history(os.path.join(outdir, "residual_history.csv"))
        report["summary"] = {"d": grid.d, "radius": grid.radius,
                             "h": grid.h}
        report["checks"] = checks
        write_report(os.path.join(outdir, "report.json"), report)
        return report, None

    background = build_background(cfg)
    solve_requested = mode in ("solve", "report") or cfg["phi"] == "solve"
    if solve_requested:
        result = solve_csck(background, cfg["solver"])
        phi = result.phi
    else:
        phi = build_phi(cfg, background)
    state = assemble(background, phi)

    if result is not None:
        dump_residual_history(os.path.join(outdir, "residual_history.csv"),
                              result)
        tol = cfg["solver"].tol_residual
        for nm, val in (("residual_ma", result.residual_ma),
                        ("residual_scal", result.residual_scal)):
            checks.append(_check_entry(nm, (), val, tol, tol - val,
                                       val <= tol))
        if not background.is_flat:
            target = background.rho0.values
            err = np.abs((phi.values - phi.values.mean())
                         + (target - target.mean())).max()
            checks.append(_check_entry("flat_recovery", (), float(err),
                                       1e-6, 1e-6 - float(err),
                                       err <= 1e-6))
    else:
        _empty_history(os.path.join(outdir, "residual_history.csv"))

    if mode in ("verify", "report"):
        checks.extend(_verify_checks(state, cfg))
    if mode in ("identities", "report"):
        checks.extend(_identity_checks(state, cfg, rng))

    g2, _ = grad_norms(state, state.phi)
    dump_fields_csv(os.path.join(outdir, "fields.csv"), state.lattice,
                    {"phi": state.phi, "F": state.F, "grad_phi_sq": g2})
    report["summary"] = _summary(state)
    if result is not None:
        report["summary"]["iterations"] = result.iterations
        report["summary"]["converged"] = result.converged
    report["checks"] = checks
    write_report(os.path.join(outdir, "report.json"), report)
    if render:
        _render_figures(outdir, state, result, checks)
    return report, state


def run(config_path, mode="report", outdir="out", seed=None):
    """Execute one configured run; returns the process exit code."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg["solver"] = SolverConfig(**{
                **cfg["solver"].__dict__, "seed": int(seed)})
        report, _ = _run_mode(mode, cfg, outdir, render=(mode == "report"))
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except (NotConverged, LostPositivity, NotKahler,
            localanalysis.HypothesisViolated) as exc:
        print("run failed: %s" % exc, file=sys.stderr)
        return 1
    failed = [c for c in report["checks"] if not c["pass"]]
    for c in failed:
        print("check %s failed at site %s: value=%.6g bound=%.6g"
              % (c["name"], tuple(c["site"]), c["value"], c["bound"]),
              file=sys.stderr)
    return 1 if failed else 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cscklab",
        description="Torus metric laboratory: solve, verify, report.")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in ("solve", "verify", "identities", "local", "report"):
        p = sub.add_parser(mode)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    return run(args.config, mode=args.mode, outdir=args.out, seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
