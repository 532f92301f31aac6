"""JSON schemas for cocycles, orbits and reports, plus CSV companions.

Floats are written with ``repr`` (shortest string that round-trips exactly),
so write -> read is lossless.  Output is deterministic: keys sorted, fixed
indentation, no timestamps unless asked for.
"""

from __future__ import annotations

import csv
import io
import json
import math

import numpy as np

from .cocycle import Cocycle, NormSequence
from .errors import ConfigurationError, UsageError

__all__ = [
    "SchemaError",
    "dumps",
    "loads",
    "cocycle_to_json",
    "cocycle_from_json",
    "trajectory_to_json",
    "trajectory_from_json",
    "read_json",
    "write_json",
    "write_csv",
]


class SchemaError(UsageError):
    """Malformed input document (parse error or schema violation)."""


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj):
    """Deterministic JSON text; non-finite floats become ``null``."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def loads(text, source="<input>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read: {exc.strerror}") from exc
    return loads(text, str(path))


def write_json(path, obj):
    text = dumps(obj)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def _require(doc, key, source):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(f"{source}: missing field '{key}'")
    return doc[key]


def _matrices(obj, d, count, what, source):
    try:
        arr = np.array(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{source}: {what} must be numeric arrays") from exc
    if arr.shape != (count, d, d):
        raise SchemaError(f"{source}: {what} must have shape ({count}, {d}, {d}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{source}: {what} contain non-finite entries")
    return arr


def _window(doc, source):
    w = _require(doc, "window", source)
    if not (isinstance(w, list) and len(w) == 2 and all(isinstance(v, int) for v in w) and w[0] < w[1]):
        raise SchemaError(f"{source}: window must be [n_min, n_max] integers with n_min < n_max")
    return w


def cocycle_to_json(c, meta=None):
    ns = c.norms
    if ns.kind == "flat":
        norms = {"kind": "flat", "data": None}
    else:
        norms = {"kind": ns.kind, "data": np.asarray(ns.data).tolist()}
    return {
        "dim": c.dim,
        "window": [c.n_min, c.n_max],
        "maps": c.maps.tolist(),
        "norms": norms,
        "meta": meta or {},
    }


def cocycle_from_json(doc, source="<cocycle>"):
    d = _require(doc, "dim", source)
    if not isinstance(d, int) or d < 1:
        raise SchemaError(f"{source}: dim must be a positive integer")
    n_min, n_max = _window(doc, source)
    K = n_max - n_min + 1
    maps = _matrices(_require(doc, "maps", source), d, K - 1, "maps", source)
    nd = doc.get("norms") or {"kind": "flat"}
    kind = nd.get("kind", "flat") if isinstance(nd, dict) else None
    try:
        if kind == "flat":
            ns = NormSequence.flat(n_min, n_max, d)
        elif kind == "scalar":
            g = np.array(nd.get("data"), dtype=float)
            if g.shape != (K,):
                raise SchemaError(f"{source}: scalar norm weights must have length {K}")
            ns = NormSequence.scalar(n_min, n_max, d, g)
        elif kind == "spd":
            ns = NormSequence.spd(n_min, n_max, _matrices(nd.get("data"), d, K, "spd norm weights", source))
        else:
            raise SchemaError(f"{source}: norms.kind must be flat, scalar or spd")
        return Cocycle(n_min, maps, ns)
    except ConfigurationError as exc:
        raise SchemaError(f"{source}: {exc}") from exc


def trajectory_to_json(t, lam=None, mu=None, meta=None):
    inner = "euclidean" if t.inner is None else np.asarray(t.inner).tolist()
    doc = {
        "dim": t.dim,
        "window": [t.n_min, t.n_max],
        "derivs": t.derivs.tolist(),
        "inner": inner,
        "A_bound": t.A_bound,
        "meta": meta or {},
    }
    if lam is not None:
        doc["lambda"] = lam
    if mu is not None:
        doc["mu"] = mu
    return doc


def trajectory_from_json(doc, source="<orbit>"):
    """Returns ``(TrajectoryData, nominal_rates)``; the rates dict may be empty."""
    from .nonuniform import TrajectoryData

    d = _require(doc, "dim", source)
    if not isinstance(d, int) or d < 1:
        raise SchemaError(f"{source}: dim must be a positive integer")
    n_min, n_max = _window(doc, source)
    K = n_max - n_min + 1
    derivs = _matrices(_require(doc, "derivs", source), d, K - 1, "derivs", source)
    inner = doc.get("inner", "euclidean")
    if inner == "euclidean" or inner is None:
        inner = None
    else:
        inner = _matrices(inner, d, K, "inner products", source)
    A = doc.get("A_bound")
    try:
        t = TrajectoryData(n_min, derivs, inner, None if A is None else float(A))
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise SchemaError(f"{source}: {exc}") from exc
    rates = {}
    for key in ("lambda", "mu"):
        if doc.get(key) is not None:
            rates[key] = float(doc[key])
    return t, rates
