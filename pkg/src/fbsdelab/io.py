"""Config loading and deterministic report writing.

Reports are written with sorted keys and shortest round-trip float
representations, so two runs that produce the same numbers produce the same
bytes.  CSV files hold one column per named array, formatted with ``%.17g``.
"""

import csv
import json
import math
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .exceptions import ConfigInvalid, MissingReports

SUMMARY = "summary.json"


def config_schema():
    return json.loads(resources.files("fbsdelab").joinpath("config_schema.json").read_text())


def validate_config(doc):
    """Validate a parsed config against the bundled JSON schema.

    Raises
    ------
    ConfigInvalid
        With the offending path and the validator message.
    """
    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigInvalid(f"{where}: {exc.message}") from None
    return doc


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    return validate_config(doc)


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def dumps(obj):
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=1) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def write_csv(path, columns):
    """Write equal-length named columns as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    cols = [np.asarray(columns[n]).ravel() for n in names]
    n = {c.size for c in cols}
    if len(n) > 1:
        raise ValueError(f"CSV columns differ in length: {sorted(n)}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow(["%.17g" % v for v in row])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0]
    data = np.array(rows[1:], dtype=float).reshape(-1, len(names))
    return {n: data[:, i] for i, n in enumerate(names)}


def stage_reports(directory):
    """All stage reports in an experiment directory, keyed by stage name.

    Raises
    ------
    MissingReports
        If the directory is absent or holds no stage report.
    """
    d = Path(directory)
    files = sorted(p for p in d.glob("*.json") if p.name != SUMMARY) if d.is_dir() else []
    if not files:
        raise MissingReports(f"no stage reports in {d}")
    return {p.stem: json.loads(p.read_text()) for p in files}
