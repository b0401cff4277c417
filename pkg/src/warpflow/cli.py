"""Command line entry point: `warpflow <subcommand> [--config FILE] [--key value ...]`.

Exit codes: 0 success, 1 invariant or certification failure, 2 configuration
error, 3 numerical failure.
"""
import os
import sys

# thread count must be fixed before numpy loads its BLAS
_threads = os.environ.get("WARPFLOW_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import configparser  # noqa: E402
from dataclasses import asdict  # noqa: E402
import logging  # noqa: E402

import numpy as np  # noqa: E402

from . import io  # noqa: E402

log = logging.getLogger("warpflow")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SUBCOMMANDS = ("soliton", "barriers", "simulate", "presingularity", "report")
PRESETS = ("round-sphere", "flat-cylinder", "neckpinch", "homogeneous", "pole-pinch", "forward")


class ConfigError(Exception):
    pass


def _bool(x):
    if isinstance(x, bool):
        return x
    s = str(x).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {x!r}")


def _floats(x):
    if isinstance(x, (list, tuple)):
        return [float(v) for v in x]
    return [float(v) for v in str(x).replace(",", " ").split()]


# key: (parser, default); a default of REQUIRED must be supplied
REQUIRED = object()
COMMON = {"output_dir": (str, None), "seed": (int, 0), "format": (str, "json"),
          "log_level": (str, "WARNING")}
SCHEMAS = {
    "soliton": {"q": (int, REQUIRED), "zeta_max": (float, 50.0), "tol": (float, 1e-8)},
    "barriers": {"k": (float, 1.0), "p": (int, 1), "q": (int, 2), "epsilon": (float, 0.05),
                 "delta": (float, 0.05), "n_time": (int, 60), "n_space": (int, 40),
                 "corrupt": (str, ""), "search_n_time": (int, 40), "search_n_space": (int, 30)},
    "simulate": {"preset": (str, ""), "profile": (str, ""), "p": (int, 1), "q": (int, 2),
                 "k": (float, 1.0), "epsilon": (float, 0.05), "delta": (float, 0.05),
                 "omega": (float, 1e-3), "mollify": (str, ""), "gauge": (str, "x"),
                 "cfl": (float, 0.4), "t_end": (float, 1.0), "n": (int, 0),
                 "curvature_ceiling": (float, 1e8), "max_steps": (int, 2_000_000),
                 "save_every": (int, 0), "save_times": (_floats, ()), "strict": (_bool, False),
                 "a": (float, 1.0), "b": (float, 1.0), "length": (float, 0.0),
                 "D": (float, 16.0), "r_star": (float, 0.15), "T_star": (float, 5.0),
                 "R": (float, 0.2), "C3": (float, 16.0), "n_tip": (int, 8)},
    "presingularity": {"preset": (str, "pinch"), "p": (int, 1), "q": (int, 2), "n": (int, 41),
                       "cfl": (float, 0.4), "curvature_ceiling": (float, 1e4),
                       "save_every": (int, 50), "max_steps": (int, 400_000),
                       "check_operators": (_bool, False), "t_end": (float, 1.0)},
    "report": {"input": (str, REQUIRED), "k": (float, 1.0)},
}


def read_config_file(path, sub):
    """Flat key = value text; keys before any [section] apply to every subcommand."""
    with open(path) as fh:
        text = fh.read()
    cp = configparser.ConfigParser(default_section="common", interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[common]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return dict(cp.items(sub)) if cp.has_section(sub) else dict(cp.defaults())


def parse_overrides(tokens):
    """`--key value`, `--key=value` and bare `--flag` (true)."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            val = tokens[i + 1]
            i += 2
        else:
            val = "true"
            i += 1
        out[key.replace("-", "_")] = val
    return out


def effective_config(sub, file_cfg, overrides):
    schema = dict(COMMON, **SCHEMAS[sub])
    raw = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    raw.update(overrides)
    if sub == "simulate" and raw.get("mollify"):
        # `--mollify omega=1e-3` form
        for part in str(raw["mollify"]).replace(",", " ").split():
            if "=" not in part:
                raise ConfigError(f"mollify: expected key=value, got {part!r}")
            k, v = part.split("=", 1)
            if k not in overrides:
                raw[k] = v
        raw.setdefault("preset", "forward")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key: {unknown[0]}")
    cfg = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = conv(raw[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from exc
        elif default is REQUIRED:
            raise ConfigError(f"missing required key: {key}")
        else:
            cfg[key] = list(default) if isinstance(default, tuple) else default
    if cfg["output_dir"] is None:
        cfg["output_dir"] = os.path.join("warpflow_out", sub)
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    validate_physical(cfg)
    return cfg


def validate_physical(cfg):
    if "q" in cfg and cfg["q"] < 2:
        raise ConfigError("q must be >= 2")
    if "p" in cfg and cfg["p"] < 0:
        raise ConfigError("p must be >= 0")
    if "k" in cfg and not cfg["k"] > 0:
        raise ConfigError("k must be positive")
    for key in ("epsilon", "delta"):
        if key in cfg and not 0 < cfg[key] <= 0.2:
            raise ConfigError(f"{key} must lie in (0, 0.2]")


def _write(cfg, name, obj):
    path = os.path.join(cfg["output_dir"], name)
    io.write_json(path, obj)
    return path


# ----------------------------------------------------------------------------
# subcommands

def cmd_soliton(cfg):
    from .solitons import check_tables, soliton_tables
    if cfg["zeta_max"] < 50:
        raise ConfigError("zeta_max must be >= 50")
    T = soliton_tables(cfg["q"], zeta_max=cfg["zeta_max"], tol=cfg["tol"])
    q = cfg["q"]
    T.to_files(os.path.join(cfg["output_dir"], f"soliton_q{q}.csv"),
               os.path.join(cfg["output_dir"], f"soliton_q{q}.json"))
    chk = check_tables(T)
    _write(cfg, "checks.json", chk)
    return EXIT_OK if chk["pass"] else EXIT_FAIL


def _suite_from(cfg, tables):
    from . import barriers as bb
    return bb.build_suite(cfg["k"], cfg["p"], cfg["q"], cfg["epsilon"], cfg["delta"], tables,
                          n=(cfg["search_n_time"], cfg["search_n_space"]))


def _corrupt(suite, spec):
    # "NAME/x" or "NAME*x" scales one parabolic or tip constant
    for op in ("/", "*"):
        if op in spec:
            name, val = spec.split(op, 1)
            base = dict(suite.constants.parabolic, **suite.constants.tip).get(name)
            if base is None:
                raise ConfigError(f"corrupt: unknown constant {name}")
            f = float(val)
            return suite.with_constants(**{name: base / f if op == "/" else base * f})
    raise ConfigError(f"corrupt: expected NAME/x or NAME*x, got {spec!r}")


def cmd_barriers(cfg):
    from . import barriers as bb
    from .solitons import soliton_tables
    tables = soliton_tables(cfg["q"])
    try:
        suite = _suite_from(cfg, tables)
    except RuntimeError as exc:
        _write(cfg, "barriers_report.json", {"passed": False, "error": str(exc)})
        return EXIT_FAIL
    if cfg["corrupt"]:
        suite = _corrupt(suite, cfg["corrupt"])
    suite.to_json(os.path.join(cfg["output_dir"], "suite.json"))
    n = (cfg["n_time"], cfg["n_space"])
    literal = bb.certify_defects(suite, n)
    restricted = bb.certify_defects(suite, n, tip_lower_us=(0.0,))
    glue = bb.certify_gluing(suite)
    name, worst = min(list(literal.entries.items()) + list(glue.entries.items()),
                      key=lambda e: e[1]["min_margin"])
    c = suite.constants
    rep = {"passed": bool(literal.passed and glue.passed),
           "constants": {"rho1": suite.rho1, "zeta1": suite.zeta1, "D": c.parabolic["D"],
                         "T_star": suite.T_star, "log_t_star": suite.log_t_star,
                         "t_star": suite.t_star, "log_r_star": suite.log_r_star,
                         "r_star": suite.r_star},
           "defects": literal.to_dict(), "defects_tip_lower_u0": restricted.to_dict(),
           "gluing": glue.to_dict(), "worst": {"name": name, **worst},
           "corrupt": cfg["corrupt"] or None}
    _write(cfg, "barriers_report.json", rep)
    return EXIT_OK if rep["passed"] else EXIT_FAIL


def _preset_profile(cfg):
    from . import solver as sv
    p, q, n = cfg["p"], cfg["q"], cfg["n"]
    kw = {"n": n} if n else {}
    name = cfg["preset"]
    if name == "round-sphere":
        return sv.round_sphere(p, q, **kw)
    if name == "flat-cylinder":
        return sv.flat_cylinder(p, q, cfg["b"], cfg["length"] or 2.0, **kw)
    if name == "neckpinch":
        return sv.neckpinch(p, q, **kw)
    if name == "pole-pinch":
        return sv.pole_pinch(p, q, **kw)
    if name == "homogeneous":
        return sv.homogeneous_product(p, q, cfg["a"], cfg["b"], cfg["length"] or 1.0, **kw)
    raise ConfigError(f"unknown preset: {name}")


def _desk(cfg, tables):
    from .barriers import desk_suite
    return desk_suite(cfg["k"], cfg["p"], cfg["q"], cfg["epsilon"], cfg["delta"], tables,
                      D=cfg["D"], log_r_star=float(np.log(cfg["r_star"])), T_star=cfg["T_star"])


def cmd_simulate(cfg):
    from . import solver as sv
    from .geometry import read_profile_csv
    out = cfg["output_dir"]
    summary = {"preset": cfg["preset"] or None}
    if cfg["preset"] == "forward":
        from .solitons import soliton_tables
        tables = soliton_tables(cfg["q"])
        suite = _desk(cfg, tables)
        su = sv.forward_setup(cfg["k"], cfg["p"], cfg["q"], cfg["omega"], suite, tables,
                              R=cfg["R"], C3=cfg["C3"], n_tip=cfg["n_tip"])
        t_end = min(cfg["t_end"], suite.t_star - su.t_shift)
        saves = cfg["save_times"] or list(np.geomspace(t_end * 1e-3, t_end, 13)[:-1])
        tr = sv.run_forward(su, suite, t_end, save_times=saves, cfl=cfg["cfl"],
                            n_tip=cfg["n_tip"], max_steps=cfg["max_steps"])
        summary["crossing"] = sv.crossing_time(tr, suite)
        summary["regime"] = sv.regime_report(tr, cfg["k"], tables).to_dict()
        summary["trapped_initially"] = (asdict(su.trapped_initially)
                                        if su.trapped_initially else None)
    else:
        if cfg["profile"]:
            init = read_profile_csv(cfg["profile"])
        elif cfg["preset"]:
            init = _preset_profile(cfg)
        else:
            raise ConfigError("missing required key: preset (or profile)")
        ctl = sv.SolverControls(gauge=cfg["gauge"], cfl=cfg["cfl"], t_end=cfg["t_end"],
                                curvature_ceiling=cfg["curvature_ceiling"],
                                max_steps=cfg["max_steps"], save_every=cfg["save_every"],
                                save_times=tuple(cfg["save_times"]))
        mons = [sv.CurvatureMonitor(cfg["curvature_ceiling"]), sv.GradientMonitor()]
        tr = sv.integrate(init, ctl, mons)
        summary["singularity"] = sv.detect_singularity(tr)
    tr.to_dir(os.path.join(out, "trajectory"))
    summary.update({"status": tr.status, "t_final": tr.t_final, "steps": tr.meta.get("steps"),
                    "events": [e.to_dict() for e in tr.events]})
    _write(cfg, "summary.json", summary)
    if cfg["strict"] and any(e.kind in ("GradientViolation", "MonotonicityLoss")
                             for e in tr.events):
        return EXIT_FAIL
    return EXIT_OK


def cmd_presingularity(cfg):
    from . import solver as sv
    from . import spectral as sp
    rep = {}
    code = EXIT_OK
    if cfg["check_operators"]:
        rep["operators"] = sp.operator_checks()
        if not rep["operators"]["pass"]:
            code = EXIT_FAIL
    p, q = cfg["p"], cfg["q"]
    if cfg["preset"] == "cylinder":
        # the shrinking cylinder is exact: Phi~ vanishes identically
        x = np.linspace(0.0, 2.0, cfg["n"])
        T = 0.5 / (q - 1)
        snaps = []
        for t in T * (1 - np.geomspace(1.0, 1e-3, 8)[1:]):
            from .geometry import WarpedProfile
            snaps.append((float(t), WarpedProfile(p, q, x, x.copy(),
                                                  np.full(len(x), np.sqrt(2 * (q - 1) * (T - t))),
                                                  ends=("closed", None))))
        tr = sv.FlowTrajectory(snaps, [], sv.SolverControls(), meta={"exact": "cylinder"})
        diag = sp.presingular_diagnostics(tr, {"time": T, "location": 0.0})
    elif cfg["preset"] == "pinch":
        init = sv.pole_pinch(p, q, n=cfg["n"])
        ctl = sv.SolverControls(gauge="x", cfl=cfg["cfl"], t_end=cfg["t_end"],
                                curvature_ceiling=cfg["curvature_ceiling"],
                                max_steps=cfg["max_steps"], save_every=cfg["save_every"])
        tr = sv.integrate(init, ctl, [sv.CurvatureMonitor(cfg["curvature_ceiling"])])
        if tr.status != "SingularityDetected":
            _write(cfg, "presingularity.json", dict(rep, error=f"no singularity ({tr.status})"))
            return EXIT_NUMERIC
        diag = sp.presingular_diagnostics(tr)
    else:
        raise ConfigError(f"unknown preset: {cfg['preset']}")
    rep["diagnostics"] = diag
    _write(cfg, "presingularity.json", rep)
    if cfg["format"] == "csv":
        rows = diag["k_series"]
        io.write_csv(os.path.join(cfg["output_dir"], "k_tau.csv"), ["t", "tau", "k_tau"],
                     [[r["t"] for r in rows], [r["tau"] for r in rows],
                      [r["k_tau"] for r in rows]])
    return code


def cmd_report(cfg):
    from . import solver as sv
    path = cfg["input"]
    tdir = os.path.join(path, "trajectory") if os.path.isdir(os.path.join(path, "trajectory")) else path
    if not os.path.exists(os.path.join(tdir, "meta.json")):
        raise ConfigError(f"input: no trajectory found under {path}")
    tr = sv.FlowTrajectory.from_dir(tdir)
    counts = {}
    for e in tr.events:
        counts[e.kind] = counts.get(e.kind, 0) + 1
    rep = {"status": tr.status, "t_final": tr.t_final, "snapshots": len(tr.snapshots),
           "event_counts": counts, "singularity": sv.detect_singularity(tr)}
    if tr.history:
        for key in ("grad_max_1", "grad_max_2", "sup_rm"):
            if key in tr.history:
                rep[f"max_{key}"] = float(np.nanmax(tr.history[key]))
    _write(cfg, "report.json", rep)
    return EXIT_OK


COMMANDS = {"soliton": cmd_soliton, "barriers": cmd_barriers, "simulate": cmd_simulate,
            "presingularity": cmd_presingularity, "report": cmd_report}


def run(argv):
    if not argv or argv[0] in ("-h", "--help"):
        print(__doc__.strip() + "\n\nsubcommands: " + ", ".join(SUBCOMMANDS))
        return EXIT_OK if argv else EXIT_CONFIG
    sub, rest = argv[0], list(argv[1:])
    try:
        if sub not in COMMANDS:
            raise ConfigError(f"unknown subcommand: {sub}")
        file_cfg = {}
        if "--config" in rest:
            i = rest.index("--config")
            if i + 1 >= len(rest):
                raise ConfigError("missing value for --config")
            file_cfg = read_config_file(rest[i + 1], sub)
            del rest[i:i + 2]
        cfg = effective_config(sub, file_cfg, parse_overrides(rest))
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, cfg["log_level"].upper(), logging.WARNING))
    np.random.seed(cfg["seed"])
    io.ensure_dir(cfg["output_dir"])
    io.write_json(os.path.join(cfg["output_dir"], "config.json"), {"subcommand": sub, **cfg})
    try:
        return COMMANDS[sub](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # parameter combinations the modules reject (solver step failures
        # are NumericalFailure, a RuntimeError)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
