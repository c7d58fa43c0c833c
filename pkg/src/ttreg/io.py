"""On-disk formats: binary tensor files, CSV tables, fit bundles and run manifests.

Tensor file layout (all little-endian)::

    bytes 0-3   magic b"TTR1"
    byte  4     format version (1)
    byte  5     order M
    8*M bytes   dims as uint64
    8*prod(dims) bytes of float64, first index fastest
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import platform
import struct
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import Dataset, FitResult
from .tensor import KroneckerScale

MAGIC = b"TTR1"
VERSION = 1
_HEADER = struct.Struct("<4sBB")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# tensor files


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.ndim < 1 or a.ndim > 255:
        raise FormatError(f"tensor order must be between 1 and 255, got {a.ndim}")
    if not np.issubdtype(a.dtype, np.floating) and not np.issubdtype(a.dtype, np.integer):
        raise FormatError(f"cannot store dtype {a.dtype}")
    head = _HEADER.pack(MAGIC, VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = np.asarray(a, dtype="<f8").reshape(-1, order="F").tobytes()
    return head + payload


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("file too short for a tensor header")
    magic, version, order = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    if order < 1:
        raise FormatError("tensor order must be at least 1")
    off = _HEADER.size
    if len(data) < off + 8 * order:
        raise FormatError("file too short for the dimension vector")
    dims = struct.unpack_from(f"<{order}Q", data, off)
    off += 8 * order
    count = math.prod(dims)
    if len(data) - off != 8 * count:
        raise FormatError(f"payload has {len(data) - off} bytes, expected {8 * count}")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=off)
    return flat.astype(np.float64).reshape(dims, order="F")


def write_tensor(path, a: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(a))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# CSV


def format_float(v) -> str:
    """Shortest-safe 17 significant digit text; ``NA`` for missing values."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_float(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, csv_text(header, rows))


def write_matrix_csv(path, mat: np.ndarray) -> None:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2:
        raise FormatError(f"CSV holds matrices only, got order {mat.ndim}")
    header = [f"c{j + 1}" for j in range(mat.shape[1])]
    write_csv(path, header, mat.tolist())


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty CSV file")
    body = rows[1:]
    width = len(rows[0])
    if any(len(r) != width for r in body):
        raise FormatError("ragged CSV rows")
    try:
        return np.array([[float("nan") if c == "NA" else float(c) for c in r] for r in body],
                        dtype=float).reshape(len(body), width)
    except ValueError as exc:
        raise FormatError(f"non-numeric CSV entry: {exc}") from exc


# ---------------------------------------------------------------------------
# bundles


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _num(v):
    if isinstance(v, str) and v in ("inf", "-inf"):
        return float(v)
    return v


def _clean(doc):
    if isinstance(doc, dict):
        return {str(k): _clean(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_clean(v) for v in doc]
    if isinstance(doc, np.ndarray):
        return _clean(doc.tolist())
    if isinstance(doc, (float, np.floating)) and not math.isfinite(doc):
        return None if math.isnan(doc) else ("inf" if doc > 0 else "-inf")
    return _jsonable(doc)


def write_json(path, doc) -> None:
    """Strict JSON (infinities become the strings ``"inf"``/``"-inf"``, NaN becomes null)."""
    atomic_write_text(path, json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_manifest(directory, command: str, config: dict, extra: dict | None = None,
                   name: str = "manifest.json") -> Path:
    """Record what is needed to rerun: command, resolved config, seed and versions."""
    doc = {
        "command": command,
        "config": dict(config),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "argv": sys.argv[1:],
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        doc.update(extra)
    path = Path(directory) / name
    write_json(path, doc)
    return path


def save_dataset(directory, ds: Dataset, b_true: np.ndarray | None = None) -> None:
    d = Path(directory)
    write_tensor(d / "x.ttr", ds.x)
    write_tensor(d / "y.ttr", ds.y)
    if b_true is not None:
        write_tensor(d / "b_true.ttr", b_true)


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    for name in ("x.ttr", "y.ttr"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} not found")
    x = read_tensor(d / "x.ttr")
    return Dataset(x if x.ndim == 2 else x.reshape(1, -1), read_tensor(d / "y.ttr"))


def save_fit(directory, fit: FitResult, extra: dict | None = None) -> None:
    d = Path(directory)
    write_tensor(d / "b_hat.ttr", fit.b_hat)
    meta = {
        "method": fit.method,
        "lambda": fit.lam,
        "nu_used": _jsonable(fit.nu_used) if fit.nu_used is not None else None,
        "iterations": fit.iterations,
        "objective": fit.objective,
        "converged": fit.converged,
        "kkt": fit.kkt,
        "xi_hat": [m.tolist() for m in fit.xi_hat.modes] if fit.xi_hat is not None else None,
        "sample_weights": fit.sample_weights.tolist() if fit.sample_weights is not None else None,
        "penalty_kind": fit.penalty.kind if fit.penalty is not None else None,
        "lambda_apl": fit.info.get("lam_apl"),
    }
    if extra:
        meta.update(extra)
    write_json(d / "fit.json", meta)


def load_fit(directory) -> FitResult:
    d = Path(directory)
    meta = json.loads((d / "fit.json").read_text())
    b = read_tensor(d / "b_hat.ttr")
    xi = KroneckerScale([np.array(m) for m in meta["xi_hat"]], normalized=True) if meta.get("xi_hat") else None
    w = np.array(meta["sample_weights"]) if meta.get("sample_weights") is not None else None
    nu = _num(meta.get("nu_used"))
    return FitResult(b, meta["method"], meta.get("lambda"), nu, xi, w, None, meta.get("iterations", 0),
                     meta.get("objective", math.nan), meta.get("converged", True), meta.get("kkt"))
