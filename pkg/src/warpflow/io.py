"""CSV and JSON helpers shared by the modules and the command line."""
import fnmatch
import json
import math
import os

import numpy as np

FLOAT_FMT = "%.17g"


def write_csv(path, header, columns):
    cols = [np.asarray(c, float) for c in columns]
    n = len(cols[0])
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            fh.write(",".join(FLOAT_FMT % c[i] for c in cols) + "\n")


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return {name: data[:, j].copy() for j, name in enumerate(header)}


def _clean(obj):
    # numpy scalars/arrays to plain python; non-finite floats to strings
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps(obj))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# Output schemas: file name pattern -> required JSON keys or CSV header.
# `*` matches any run of characters; the first matching pattern applies.
JSON_SCHEMAS = {
    "config.json": {"subcommand", "output_dir", "seed", "format", "log_level"},
    "checks.json": {"checks", "pass"},
    "soliton_q*.json": {"q", "zeta_max", "tail_A", "tail_B", "tail_C", "normalization"},
    "suite.json": {"constants", "rho1", "zeta1", "r_star", "t_star", "T_star"},
    "barriers_report.json": {"passed", "constants", "defects", "defects_tip_lower_u0",
                             "gluing", "worst"},
    "summary.json": {"preset", "status", "t_final", "steps", "events"},
    "presingularity.json": {"diagnostics"},
    "report.json": {"status", "t_final", "snapshots", "event_counts", "singularity"},
    "meta.json": {"controls", "grid", "constants", "status", "snapshots", "p", "q"},
    "events.json": None,
}
EVENT_KEYS = {"t", "kind", "location", "payload"}
CSV_SCHEMAS = {
    "soliton_q*.csv": ["zeta", "B", "C", "A"],
    "t=*.csv": (["x", "sprime", "psi", "phi"], ["s", "psi", "phi"], ["r", "v", "h"]),
    "k_tau.csv": ["t", "tau", "k_tau"],
    "history.csv": None,
}


def _match(name, table):
    for pat, spec in table.items():
        if fnmatch.fnmatchcase(name, pat):
            return True, spec
    return False, None


def validate_outputs(root):
    """Check every .json/.csv under `root` against the output schemas.

    Returns a list of problems (empty when everything validates). Files with
    no schema entry are reported too.
    """
    problems = []
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            if name.endswith(".json"):
                known, keys = _match(name, JSON_SCHEMAS)
                try:
                    obj = read_json(path)
                except ValueError as exc:
                    problems.append(f"{path}: invalid JSON ({exc})")
                    continue
                if not known:
                    problems.append(f"{path}: no schema")
                elif name == "events.json":
                    if not isinstance(obj, list) or any(set(e) != EVENT_KEYS for e in obj):
                        problems.append(f"{path}: events must be objects with {sorted(EVENT_KEYS)}")
                elif not isinstance(obj, dict) or not keys <= set(obj):
                    missing = sorted(keys - set(obj)) if isinstance(obj, dict) else "object"
                    problems.append(f"{path}: missing {missing}")
            elif name.endswith(".csv"):
                known, spec = _match(name, CSV_SCHEMAS)
                if not known:
                    problems.append(f"{path}: no schema")
                    continue
                try:
                    data = read_csv(path)
                except ValueError as exc:
                    problems.append(f"{path}: unreadable CSV ({exc})")
                    continue
                if spec is None:
                    continue
                header = list(data)
                allowed = [spec] if isinstance(spec[0], str) else spec
                if header not in [list(a) for a in allowed]:
                    problems.append(f"{path}: header {header}")
                elif not all(np.all(np.isfinite(c)) for c in data.values()):
                    problems.append(f"{path}: non-finite values")
    return problems
