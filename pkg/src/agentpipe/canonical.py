"""Canonical JSON rendering and number normalization.

All persisted JSON in this package (pipeline IR, marshaled values, digests)
goes through one renderer so that equal values always produce identical
bytes: object keys sorted lexicographically, no insignificant whitespace,
and numbers rendered without trailing zeros.

Numbers follow IEEE double semantics. On ingestion every number is
normalized: integral values with magnitude <= 2**53 become Python ints
(so ``1.0`` and ``1`` are the same value and render as ``1``); everything
else is a float rendered by the shortest round-trip repr.
"""

from __future__ import annotations

import json
import math
from typing import Any

from .errors import EngineError

MAX_SAFE_INT = 2**53

# Values are plain Python JSON shapes: None, bool, int, float, str, list, dict.
Value = Any


def normalize_number(x: int | float) -> int | float:
    """Collapse a number to its canonical form (int when exactly integral)."""
    if isinstance(x, bool):
        raise EngineError("TYPE_ERROR", "bool is not a number")
    if isinstance(x, int):
        if -MAX_SAFE_INT <= x <= MAX_SAFE_INT:
            return x
        return float(x)
    if math.isnan(x) or math.isinf(x):
        raise EngineError("NUMBER_ERROR", f"non-finite number not representable: {x!r}")
    if x.is_integer() and -MAX_SAFE_INT <= x <= MAX_SAFE_INT:
        return int(x)
    return x


def normalize_value(v: Value) -> Value:
    """Deep-normalize a JSON-like value; rejects non-JSON types."""
    if v is None or isinstance(v, (bool, str)):
        return v
    if isinstance(v, (int, float)):
        return normalize_number(v)
    if isinstance(v, (list, tuple)):
        return [normalize_value(item) for item in v]
    if isinstance(v, dict):
        out = {}
        for k, item in v.items():
            if not isinstance(k, str):
                raise EngineError("TYPE_ERROR", f"map keys must be strings, got {type(k).__name__}")
            out[k] = normalize_value(item)
        return out
    raise EngineError("TYPE_ERROR", f"unsupported value type: {type(v).__name__}")


def render_number(x: int | float) -> str:
    """Canonical text for one number (no trailing zeros, shortest repr)."""
    n = normalize_number(x)
    if isinstance(n, int):
        return str(n)
    return repr(n)


def canonical_json(v: Value) -> str:
    """Serialize a normalized value to canonical JSON text."""
    parts: list[str] = []
    _write(normalize_value(v), parts)
    return "".join(parts)


def _write(v: Value, out: list[str]) -> None:
    if v is None:
        out.append("null")
    elif v is True:
        out.append("true")
    elif v is False:
        out.append("false")
    elif isinstance(v, (int, float)):
        out.append(render_number(v))
    elif isinstance(v, str):
        out.append(json.dumps(v, ensure_ascii=False))
    elif isinstance(v, list):
        out.append("[")
        for i, item in enumerate(v):
            if i:
                out.append(",")
            _write(item, out)
        out.append("]")
    elif isinstance(v, dict):
        out.append("{")
        for i, key in enumerate(sorted(v)):
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _write(v[key], out)
        out.append("}")
    else:  # pragma: no cover - normalize_value already rejects these
        raise EngineError("TYPE_ERROR", f"unsupported value type: {type(v).__name__}")


def parse_json(text: str) -> Value:
    """Parse JSON text to a normalized value, reporting position on failure."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise EngineError("PARSE_ERROR", f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    return normalize_value(raw)
