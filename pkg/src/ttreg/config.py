"""Run configuration documents.

A config is a JSON object whose keys mirror the long command-line flags
(dashes become underscores).  Values in the file act as defaults and
explicit flags win.  Unknown keys and wrongly typed values are rejected
before anything runs.

Keys
----
method : str        ols, tols, apl, apn, apt, ost or host
methods : str       comma list for ``bench``
nu : number|"inf"   degrees of freedom used by the fit (default 4)
nu_data : number|"inf"  degrees of freedom of simulated errors (default 4)
lambda : number     fixed tuning parameter; omit to use CV
lambda_apl : number fixed tuning parameter for the APL stage of OST/HOST
cv : bool           select lambda by cross-validation
folds : int         CV folds (default 5)
seed : int          master seed
jobs : int          worker processes for ``bench``
penalty : str       lasso or group
center : bool       center X and Y before fitting (default true)
split : str         HOST batches: reuse or two-batch
pilot : str         OST penalty weights from "ols" (default) or "apl"
model : str         simulation model (M1, M2, M3, M4-rhombus, M4-bat, M4-cross)
n, reps, index : int
rho, b, s : number
dims : list[int]
data, out, fit : str paths
coef : str          1-based coordinate, comma separated
value : number      hypothesized coefficient value
level : number      confidence level
flavor : str        L, N, T or OST
bonferroni : int    number of simultaneous tests
"""

from __future__ import annotations

import json
import math
from pathlib import Path


def _num(v):
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError
    return float(v)


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError
    return v


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError
    return v


def _str(v):
    if not isinstance(v, str):
        raise TypeError
    return v


def _dims(v):
    if not isinstance(v, list) or not v or not all(isinstance(d, int) and d > 0 for d in v):
        raise TypeError
    return tuple(v)


SCHEMA = {
    "method": _str, "methods": _str, "nu": _num, "nu_data": _num, "lambda": _num, "lambda_apl": _num, "cv": _bool,
    "folds": _int, "seed": _int, "jobs": _int, "penalty": _str, "center": _bool, "split": _str, "pilot": _str,
    "model": _str, "n": _int, "reps": _int, "index": _int, "rho": _num, "b": _num, "s": _num,
    "dims": _dims, "data": _str, "out": _str, "fit": _str, "coef": _str, "value": _num,
    "level": _num, "flavor": _str, "bonferroni": _int,
}


class ConfigError(ValueError):
    pass


def validate(doc: dict) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for k, v in doc.items():
        try:
            out[k] = SCHEMA[k](v)
        except TypeError:
            raise ConfigError(f"config key {k!r} has invalid value {v!r}") from None
    return out


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate(doc)
