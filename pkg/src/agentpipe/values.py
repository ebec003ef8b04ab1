"""Dynamic value operations: paths, interpolation, conditions, JSON data ops.

Values are plain JSON shapes (None, bool, number, str, list, dict).  A
distinguished ``ABSENT`` sentinel marks a path that did not resolve; it is
different from an explicit null.  ``resolve_path`` and ``eval_condition``
are total; strictness about missing data is applied by callers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from .canonical import (
    Value,
    canonical_json,
    normalize_number,
    normalize_value,
    parse_json,
    render_number,
)
from .errors import EngineError
from .ir import (
    And,
    Condition,
    Expr,
    ExprEquals,
    Literal,
    Not,
    Or,
    PathExists,
    Template,
    VarContains,
    VarEquals,
    VarRef,
)


class _Absent:
    __slots__ = ()

    def __repr__(self) -> str:
        return "<absent>"

    def __bool__(self) -> bool:
        return False


ABSENT = _Absent()

Segment = Union[str, int]


@dataclass(frozen=True)
class Path:
    segments: tuple[Segment, ...]

    def __str__(self) -> str:
        parts: list[str] = []
        for seg in self.segments:
            if isinstance(seg, int):
                parts.append(f"[{seg}]")
            else:
                parts.append(seg if not parts else f".{seg}")
        return "".join(parts)


_PATH_TOKEN = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def parse_path(text: str) -> Path:
    """Parse ``user.profile.name`` / ``items[0].price`` into segments.

    The first segment is always a field (the variable name). Rejects empty
    segments, negative indexes, and unbalanced brackets.
    """
    if not isinstance(text, str) or not text:
        raise EngineError("PATH_SYNTAX", "empty path")
    segments: list[Segment] = []
    i = 0
    n = len(text)
    expect_field = True
    while i < n:
        ch = text[i]
        if ch == "[":
            if expect_field:
                raise EngineError("PATH_SYNTAX", f"path {text!r}: index before any field")
            end = text.find("]", i)
            if end < 0:
                raise EngineError("PATH_SYNTAX", f"path {text!r}: unbalanced bracket")
            body = text[i + 1:end]
            if not body or not body.isdigit():
                raise EngineError("PATH_SYNTAX", f"path {text!r}: bad index {body!r}")
            segments.append(int(body))
            i = end + 1
        elif ch == ".":
            if expect_field or i + 1 >= n:
                raise EngineError("PATH_SYNTAX", f"path {text!r}: empty segment")
            i += 1
            expect_field = True
        else:
            m = _PATH_TOKEN.match(text, i)
            if not m or not expect_field:
                raise EngineError("PATH_SYNTAX", f"path {text!r}: unexpected {ch!r} at {i}")
            segments.append(m.group(0))
            i = m.end()
            expect_field = False
    if expect_field:
        raise EngineError("PATH_SYNTAX", f"path {text!r}: trailing separator")
    if not segments:
        raise EngineError("PATH_SYNTAX", "empty path")
    if not isinstance(segments[0], str):
        raise EngineError("PATH_SYNTAX", f"path {text!r}: must start with a variable name")
    return Path(tuple(segments))


def resolve_path(root: Value, path: Path) -> Value:
    """Walk fields/indexes; ABSENT on any missing hop or type mismatch."""
    current = root
    for seg in path.segments:
        if isinstance(seg, str):
            if isinstance(current, dict) and seg in current:
                current = current[seg]
            else:
                return ABSENT
        else:
            if isinstance(current, list) and 0 <= seg < len(current):
                current = current[seg]
            else:
                return ABSENT
    return current


def resolve(store: Value, path_text: str) -> Value:
    return resolve_path(store, parse_path(path_text))


# --------------------------------------------------------------------------
# Interpolation

_SEG_NUMBER = re.compile(r"\d+(?:\.\d+)?")


def stringify(v: Value) -> str:
    """Render one value for template concatenation."""
    if isinstance(v, str):
        return v
    if isinstance(v, bool) or v is None:
        return canonical_json(v)
    if isinstance(v, (int, float)):
        return render_number(v)
    return canonical_json(v)


def split_template(text: str) -> list[tuple[str, str]]:
    """Split a template into ('text', raw) and ('expr', inner) parts."""
    parts: list[tuple[str, str]] = []
    i = 0
    n = len(text)
    while i < n:
        start = text.find("${", i)
        if start < 0:
            parts.append(("text", text[i:]))
            break
        if start > i:
            parts.append(("text", text[i:start]))
        end = text.find("}", start + 2)
        if end < 0:
            raise EngineError("TEMPLATE_SYNTAX", f"unterminated ${{ in template {text!r}")
        parts.append(("expr", text[start + 2:end]))
        i = end + 1
    return parts


def interpolate(template: str, store: Value, strict: bool = True) -> Value:
    """Substitute ``${...}`` segments; single-segment templates keep type.

    Segments are paths or binary arithmetic over paths/number literals
    (+ - * /, with * and / binding tighter, left to right). Strict mode
    errors on absent paths; lenient substitutes an empty string.
    """
    parts = split_template(template)
    exprs = [p for p in parts if p[0] == "expr"]
    if len(exprs) == 1 and len(parts) == 1:
        return _eval_segment(exprs[0][1], store, strict)
    out: list[str] = []
    for kind, payload in parts:
        if kind == "text":
            out.append(payload)
        else:
            out.append(stringify(_eval_segment(payload, store, strict)))
    return "".join(out)


def _eval_segment(src: str, store: Value, strict: bool) -> Value:
    tokens = _tokenize_segment(src)
    if len(tokens) == 1 and tokens[0][0] == "path":
        value = resolve(store, tokens[0][1])
        if value is ABSENT:
            if strict:
                raise EngineError("UNDEFINED_VAR", f"path {tokens[0][1]!r} is not defined")
            return ""
        return value
    return _eval_arith(tokens, src, store, strict)


def _tokenize_segment(src: str) -> list[tuple[str, str]]:
    tokens: list[tuple[str, str]] = []
    i = 0
    n = len(src)
    while i < n:
        ch = src[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "+-*/":
            tokens.append(("op", ch))
            i += 1
            continue
        m = _SEG_NUMBER.match(src, i)
        if m and ch.isdigit():
            tokens.append(("number", m.group(0)))
            i = m.end()
            continue
        m = re.compile(r"[A-Za-z_][A-Za-z0-9_.\[\]]*").match(src, i)
        if m:
            tokens.append(("path", m.group(0)))
            i = m.end()
            continue
        raise EngineError("TEMPLATE_SYNTAX", f"bad character {ch!r} in expression {src!r}")
    if not tokens:
        raise EngineError("TEMPLATE_SYNTAX", "empty ${} expression")
    return tokens


def _eval_arith(tokens: list[tuple[str, str]], src: str, store: Value, strict: bool) -> Value:
    pos = 0

    def operand() -> float:
        nonlocal pos
        if pos >= len(tokens) or tokens[pos][0] == "op":
            raise EngineError("TEMPLATE_SYNTAX", f"expected operand in {src!r}")
        kind, payload = tokens[pos]
        pos += 1
        if kind == "number":
            return float(payload)
        value = resolve(store, payload)
        if value is ABSENT:
            raise EngineError("UNDEFINED_VAR" if strict else "NON_NUMERIC_OPERAND",
                              f"path {payload!r} is not defined in arithmetic expression")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise EngineError("NON_NUMERIC_OPERAND",
                              f"operand {payload!r} is not a number in {src!r}")
        return float(value)

    def term() -> float:
        nonlocal pos
        acc = operand()
        while pos < len(tokens) and tokens[pos][0] == "op" and tokens[pos][1] in "*/":
            op = tokens[pos][1]
            pos += 1
            rhs = operand()
            if op == "*":
                acc = acc * rhs
            else:
                if rhs == 0.0:
                    raise EngineError("DIVISION_BY_ZERO", f"division by zero in {src!r}")
                acc = acc / rhs
        return acc

    acc = term()
    while pos < len(tokens):
        kind, op = tokens[pos]
        if kind != "op" or op not in "+-":
            raise EngineError("TEMPLATE_SYNTAX", f"expected + or - in {src!r}")
        pos += 1
        rhs = term()
        acc = acc + rhs if op == "+" else acc - rhs
    return normalize_number(acc)


def eval_expr(expr: Expr, store: Value, strict: bool = True) -> Value:
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, VarRef):
        value = resolve(store, expr.path)
        if value is ABSENT:
            if strict:
                raise EngineError("UNDEFINED_VAR", f"variable path {expr.path!r} is not defined")
            return ""
        return value
    if isinstance(expr, Template):
        return interpolate(expr.text, store, strict)
    raise EngineError("BAD_IR", f"unknown expression type {type(expr).__name__}")


# --------------------------------------------------------------------------
# Conditions

def values_equal(a: Value, b: Value) -> bool:
    """Type-sensitive equality: number 1 != string "1"; 1 == 1.0."""
    if a is ABSENT or b is ABSENT:
        return False
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return float(a) == float(b)
    if type(a) is not type(b):
        return False
    if isinstance(a, list):
        return len(a) == len(b) and all(values_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(values_equal(a[k], b[k]) for k in a)
    return a == b


def eval_condition(cond: Condition, store: Value) -> bool:
    """Total condition evaluation; absent data simply yields False."""
    if isinstance(cond, VarEquals):
        try:
            resolved = resolve(store, cond.var)
        except EngineError:
            return False
        return values_equal(resolved, cond.value)
    if isinstance(cond, PathExists):
        root = store.get(cond.root, ABSENT) if isinstance(store, dict) else ABSENT
        if root is ABSENT:
            return False
        return resolve_path(root, Path(cond.path)) is not ABSENT if cond.path else True
    if isinstance(cond, VarContains):
        try:
            resolved = resolve(store, cond.var)
        except EngineError:
            return False
        return isinstance(resolved, str) and cond.substring in resolved
    if isinstance(cond, ExprEquals):
        try:
            left = eval_expr(cond.left, store, strict=False)
            right = eval_expr(cond.right, store, strict=False)
        except EngineError:
            return False
        return values_equal(left, right)
    if isinstance(cond, And):
        return eval_condition(cond.left, store) and eval_condition(cond.right, store)
    if isinstance(cond, Or):
        return eval_condition(cond.left, store) or eval_condition(cond.right, store)
    if isinstance(cond, Not):
        return not eval_condition(cond.inner, store)
    raise EngineError("BAD_IR", f"unknown condition type {type(cond).__name__}")


# --------------------------------------------------------------------------
# Serialization data ops

def marshal(v: Value) -> str:
    """Canonical JSON string (sorted keys) for any value."""
    return canonical_json(v)


def unmarshal_list(s: str) -> list:
    if not isinstance(s, str):
        raise EngineError("TYPE_ERROR", f"unmarshalList needs a string, got {type(s).__name__}")
    parsed = parse_json(s)
    if not isinstance(parsed, list):
        raise EngineError("SHAPE_ERROR", "unmarshalList: top-level JSON is not an array")
    return parsed


def unmarshal_map(s: str) -> dict:
    if not isinstance(s, str):
        raise EngineError("TYPE_ERROR", f"unmarshalMap needs a string, got {type(s).__name__}")
    parsed = parse_json(s)
    if not isinstance(parsed, dict):
        raise EngineError("SHAPE_ERROR", "unmarshalMap: top-level JSON is not an object")
    return parsed


# --------------------------------------------------------------------------
# JSONPath subset

_FILTER_RE = re.compile(
    r"^\?\(\s*@\.([A-Za-z_][A-Za-z0-9_.]*)\s*(==|!=|<=|>=|<|>)\s*(.+?)\s*\)$"
)


@dataclass(frozen=True)
class _Query:
    selector: object  # "*" | int | (field, op, literal)
    projections: tuple[str, ...]


def _parse_query(query: str) -> _Query:
    if not isinstance(query, str) or not query.startswith("$["):
        raise EngineError("QUERY_SYNTAX", f"unsupported JSONPath query {query!r}")
    end = query.find("]")
    if end < 0:
        raise EngineError("QUERY_SYNTAX", f"unbalanced bracket in query {query!r}")
    inner = query[2:end]
    rest = query[end + 1:]
    selector: object
    if inner == "*":
        selector = "*"
    elif inner.isdigit():
        selector = int(inner)
    else:
        m = _FILTER_RE.match(inner)
        if not m:
            raise EngineError("QUERY_SYNTAX", f"unsupported selector {inner!r} in {query!r}")
        field, op, lit_src = m.groups()
        selector = (field, op, _parse_query_literal(lit_src, query))
    projections: list[str] = []
    while rest:
        if not rest.startswith("."):
            raise EngineError("QUERY_SYNTAX", f"unsupported trailing syntax {rest!r} in {query!r}")
        m2 = _PATH_TOKEN.match(rest, 1)
        if not m2:
            raise EngineError("QUERY_SYNTAX", f"bad projection in {query!r}")
        projections.append(m2.group(0))
        rest = rest[m2.end():]
    return _Query(selector, tuple(projections))


def _parse_query_literal(src: str, query: str) -> Value:
    if len(src) >= 2 and src[0] == src[-1] and src[0] in ("'", '"'):
        return src[1:-1]
    if src == "true":
        return True
    if src == "false":
        return False
    if src == "null":
        return None
    try:
        return normalize_number(float(src)) if "." in src or "e" in src or "E" in src \
            else normalize_number(int(src))
    except ValueError:
        raise EngineError("QUERY_SYNTAX", f"bad literal {src!r} in query {query!r}") from None


def _filter_matches(item: Value, field: str, op: str, lit: Value) -> bool:
    actual = resolve(item, field) if isinstance(item, dict) else ABSENT
    if actual is ABSENT:
        return False
    if op == "==":
        return values_equal(actual, lit)
    if op == "!=":
        return not values_equal(actual, lit)
    # Ordering: numbers with numbers, strings with strings; bools excluded.
    if isinstance(actual, bool) or isinstance(lit, bool):
        return False
    if isinstance(actual, (int, float)) and isinstance(lit, (int, float)):
        a, b = float(actual), float(lit)
    elif isinstance(actual, str) and isinstance(lit, str):
        a, b = actual, lit
    else:
        return False
    return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]


def find_matching_item(collection: list, query: str) -> list:
    """Evaluate the supported JSONPath subset over a list.

    Supported: ``$[*]``, ``$[i]``, ``$[?(@.field OP literal)]`` with OP in
    {==, !=, <, <=, >, >=}, plus trailing ``.field`` projections. Matches
    come back in input order; items missing a projected field are dropped.
    """
    if not isinstance(collection, list):
        raise EngineError("TYPE_ERROR",
                          f"findMatchingItem needs a list, got {type(collection).__name__}")
    q = _parse_query(query)
    if q.selector == "*":
        matched = list(collection)
    elif isinstance(q.selector, int):
        matched = [collection[q.selector]] if q.selector < len(collection) else []
    else:
        field, op, lit = q.selector
        matched = [item for item in collection if _filter_matches(item, field, op, lit)]
    for proj in q.projections:
        projected = []
        for item in matched:
            if isinstance(item, dict) and proj in item:
                projected.append(item[proj])
        matched = projected
    return matched


# --------------------------------------------------------------------------
# Nested map updates

def set_map_value(target: Value, path: Path, v: Value) -> Value:
    """Return an updated copy; auto-creates maps for missing field segments.

    Never creates list elements: an index segment must land on an existing
    list slot. Writing through an existing scalar is an error.
    """
    if not path.segments:
        raise EngineError("PATH_SYNTAX", "setMapValue needs a non-empty path")
    return _set_at(target, path.segments, v, str(path))


def _set_at(current: Value, segs: tuple[Segment, ...], v: Value, full: str) -> Value:
    seg = segs[0]
    rest = segs[1:]
    if isinstance(seg, str):
        if current is ABSENT or current is None:
            current = {}
        if not isinstance(current, dict):
            raise EngineError("PATH_TYPE_ERROR",
                              f"cannot set {full!r}: segment {seg!r} lands on a non-map")
        updated = dict(current)
        if rest:
            child = current.get(seg, ABSENT)
            updated[seg] = _set_at(child, rest, v, full)
        else:
            updated[seg] = v
        return updated
    if not isinstance(current, list):
        raise EngineError("PATH_TYPE_ERROR",
                          f"cannot set {full!r}: index {seg} lands on a non-list")
    if seg >= len(current):
        raise EngineError("INDEX_RANGE", f"cannot set {full!r}: index {seg} out of range")
    updated_list = list(current)
    if rest:
        updated_list[seg] = _set_at(current[seg], rest, v, full)
    else:
        updated_list[seg] = v
    return updated_list


def get_map_value(source: Value, path: Path) -> Value:
    """resolve_path restricted to the given root; ABSENT when missing."""
    return resolve_path(source, path)


# --------------------------------------------------------------------------
# Coercion

COERCION_TARGETS = ("string", "number", "boolean", "list", "map")


def coerce(v: Value, target: str) -> Value:
    """Convert between compatible scalar types; no list/map conversions."""
    if target == "string":
        if isinstance(v, str):
            return v
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return render_number(v)
        raise EngineError("COERCION_FAILED", f"cannot coerce {type(v).__name__} to string")
    if target == "number":
        if isinstance(v, bool):
            raise EngineError("COERCION_FAILED", "cannot coerce boolean to number")
        if isinstance(v, (int, float)):
            return normalize_number(v)
        if isinstance(v, str):
            try:
                parsed = float(v) if _is_floatish(v) else int(v)
                return normalize_number(parsed)
            except (ValueError, EngineError):
                raise EngineError("COERCION_FAILED", f"cannot coerce {v!r} to number") from None
        raise EngineError("COERCION_FAILED", f"cannot coerce {type(v).__name__} to number")
    if target == "boolean":
        if isinstance(v, bool):
            return v
        if isinstance(v, (int, float)):
            f = float(v)
            if f == 0.0:
                return False
            if f == 1.0:
                return True
            raise EngineError("COERCION_FAILED", f"number {v!r} is not exactly 0 or 1")
        if v == "true":
            return True
        if v == "false":
            return False
        raise EngineError("COERCION_FAILED", f"cannot coerce {v!r} to boolean")
    if target == "list":
        if isinstance(v, list):
            return v
        raise EngineError("COERCION_FAILED", f"cannot coerce {type(v).__name__} to list")
    if target == "map":
        if isinstance(v, dict):
            return v
        raise EngineError("COERCION_FAILED", f"cannot coerce {type(v).__name__} to map")
    raise EngineError("COERCION_FAILED", f"unknown coercion target {target!r}")


def _is_floatish(s: str) -> bool:
    return any(c in s for c in ".eE") or s.strip().lstrip("+-").lower() in ("inf", "nan")
