"""Pipeline intermediate representation: node types, JSON wire format, hashing.

A pipeline is an ordered list of tagged step nodes, possibly nesting
sub-pipelines (forEach bodies, when branches, try/catch/finally blocks).
The JSON encoding is the unit of storage, diffing, hashing, and execution;
``serialize_ir`` is canonical so equal structures always produce identical
bytes regardless of construction order.

Two step kinds exist only as optimizer output and round-trip like any
other: ``setValues`` (a batched run of assignments, evaluated left to
right) and ``marshalMany`` (one marshal fanned out to several targets).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Any, Union

from .canonical import Value, canonical_json, normalize_value, parse_json
from .errors import EngineError, IRParseError

DEFAULT_MAX_DEPTH = 32

_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def is_identifier(name: object) -> bool:
    return isinstance(name, str) and bool(_IDENT_RE.match(name))


# --------------------------------------------------------------------------
# Expressions

@dataclass(frozen=True)
class Literal:
    value: Value


@dataclass(frozen=True)
class VarRef:
    path: str


@dataclass(frozen=True)
class Template:
    text: str


Expr = Union[Literal, VarRef, Template]


# --------------------------------------------------------------------------
# Conditions

@dataclass(frozen=True)
class VarEquals:
    var: str
    value: Value


@dataclass(frozen=True)
class PathExists:
    root: str
    path: tuple[Union[str, int], ...]


@dataclass(frozen=True)
class VarContains:
    var: str
    substring: str


@dataclass(frozen=True)
class ExprEquals:
    """General equality over two expressions (wire kind ``equals``).

    Covers the literal-vs-literal comparisons the constant folder prunes;
    ``varEquals`` stays the idiomatic var-vs-literal form.
    """

    left: Expr
    right: Expr


@dataclass(frozen=True)
class And:
    left: "Condition"
    right: "Condition"


@dataclass(frozen=True)
class Or:
    left: "Condition"
    right: "Condition"


@dataclass(frozen=True)
class Not:
    inner: "Condition"


Condition = Union[VarEquals, PathExists, VarContains, ExprEquals, And, Or, Not]


# --------------------------------------------------------------------------
# Steps

@dataclass(frozen=True)
class PassVariables:
    names: tuple[str, ...]


@dataclass(frozen=True)
class SetValue:
    var: str
    value: Expr


@dataclass(frozen=True)
class SetValues:
    """Fused run of assignments; later entries may read earlier ones."""

    assignments: tuple[SetValue, ...]


@dataclass(frozen=True)
class ForEach:
    list_path: str
    item_var: str
    body: "Pipeline"
    parallel: bool = False


@dataclass(frozen=True)
class When:
    cond: Condition
    then_body: "Pipeline"
    else_body: "Pipeline | None" = None


@dataclass(frozen=True)
class DoReturn:
    pass


@dataclass(frozen=True)
class FunctionCall:
    name: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class Marshal:
    from_path: str
    to_var: str


@dataclass(frozen=True)
class MarshalMany:
    """Fused marshal: one source serialized once into several targets."""

    from_path: str
    to_vars: tuple[str, ...]


@dataclass(frozen=True)
class UnmarshalList:
    from_var: str
    to_var: str


@dataclass(frozen=True)
class UnmarshalMap:
    from_var: str
    to_var: str


@dataclass(frozen=True)
class FindMatchingItem:
    collection_path: str
    query: str
    to_var: str


@dataclass(frozen=True)
class SetMapValue:
    target_var: str
    path: str
    value: Expr


@dataclass(frozen=True)
class GetMapValue:
    source_var: str
    path: str
    to_var: str


@dataclass(frozen=True)
class AddMessage:
    role: str
    content: Expr


@dataclass(frozen=True)
class AddTool:
    tool_ids: tuple[str, ...]


@dataclass(frozen=True)
class ChatRequest:
    llm_id: str


@dataclass(frozen=True)
class ToolRequest:
    llm_id: str


@dataclass(frozen=True)
class AddResponse:
    type: str
    content: Expr
    id: str | None = None


@dataclass(frozen=True)
class RemoveResponse:
    id: str


@dataclass(frozen=True)
class ClearResponses:
    pass


@dataclass(frozen=True)
class UpdateResponse:
    id: str
    content: Expr


@dataclass(frozen=True)
class RunPipeline:
    ref: str
    pass_names: tuple[str, ...]


@dataclass(frozen=True)
class TryCatchFinally:
    try_body: "Pipeline"
    catch_body: "Pipeline | None" = None
    finally_body: "Pipeline | None" = None


Step = Union[
    PassVariables, SetValue, SetValues, ForEach, When, DoReturn, FunctionCall,
    Marshal, MarshalMany, UnmarshalList, UnmarshalMap, FindMatchingItem,
    SetMapValue, GetMapValue, AddMessage, AddTool, ChatRequest, ToolRequest,
    AddResponse, RemoveResponse, ClearResponses, UpdateResponse, RunPipeline,
    TryCatchFinally,
]


@dataclass(frozen=True)
class Pipeline:
    name: str = ""
    version: str = ""
    steps: tuple[Step, ...] = ()


@dataclass(frozen=True)
class PipelineDigest:
    """256-bit content hash (hex) of a pipeline's canonical JSON."""

    digest: str

    def __str__(self) -> str:
        return self.digest


VALID_ROLES = ("system", "user", "assistant", "tool")


def count_steps(p: Pipeline) -> int:
    """Total step nodes in the pipeline including all nested bodies."""
    total = 0
    for step in p.steps:
        total += 1
        for body in child_bodies(step):
            total += count_steps(body)
    return total


def child_bodies(step: Step) -> list[Pipeline]:
    """Nested sub-pipelines of a step, in body-ordinal order."""
    if isinstance(step, ForEach):
        return [step.body]
    if isinstance(step, When):
        return [step.then_body] + ([step.else_body] if step.else_body is not None else [])
    if isinstance(step, TryCatchFinally):
        out = [step.try_body]
        if step.catch_body is not None:
            out.append(step.catch_body)
        if step.finally_body is not None:
            out.append(step.finally_body)
        return out
    return []


# --------------------------------------------------------------------------
# Parsing

def parse_ir(json_text: str, strict: bool = True, max_depth: int = DEFAULT_MAX_DEPTH) -> Pipeline:
    """Decode JSON text into a Pipeline.

    Strict mode rejects unknown fields; lenient mode ignores them. Unknown
    ``op``/``kind`` tags and missing required fields are rejected in both.
    """
    try:
        data = parse_json(json_text)
    except EngineError as e:
        raise IRParseError(e.message, code=e.code) from e
    return pipeline_from_jsonable(data, strict=strict, max_depth=max_depth)


def pipeline_from_jsonable(data: Value, strict: bool = True,
                           max_depth: int = DEFAULT_MAX_DEPTH) -> Pipeline:
    ctx = _ParseCtx(strict=strict, max_depth=max_depth)
    return ctx.pipeline(data, depth=1, where="pipeline", require_meta=True)


class _ParseCtx:
    def __init__(self, strict: bool, max_depth: int):
        self.strict = strict
        self.max_depth = max_depth

    def fail(self, where: str, msg: str, code: str = "BAD_IR") -> IRParseError:
        return IRParseError(f"{where}: {msg}", code=code)

    def obj(self, data: Value, where: str) -> dict:
        if not isinstance(data, dict):
            raise self.fail(where, f"expected object, got {type(data).__name__}")
        return data

    def take(self, obj: dict, key: str, where: str) -> Value:
        if key not in obj:
            raise self.fail(where, f"missing required field {key!r}", code="MISSING_FIELD")
        return obj[key]

    def check_extras(self, obj: dict, allowed: set[str], where: str) -> None:
        if not self.strict:
            return
        extras = sorted(set(obj) - allowed)
        if extras:
            raise self.fail(where, f"unknown fields {extras}", code="UNKNOWN_FIELD")

    def string(self, v: Value, where: str, what: str) -> str:
        if not isinstance(v, str):
            raise self.fail(where, f"{what} must be a string")
        return v

    def ident(self, v: Value, where: str, what: str) -> str:
        s = self.string(v, where, what)
        if not is_identifier(s):
            raise self.fail(where, f"{what} {s!r} is not a valid identifier")
        return s

    def nonempty(self, v: Value, where: str, what: str) -> str:
        s = self.string(v, where, what)
        if not s:
            raise self.fail(where, f"{what} must be non-empty")
        return s

    def pipeline(self, data: Value, depth: int, where: str, require_meta: bool = False) -> Pipeline:
        if depth > self.max_depth:
            raise self.fail(where, f"nesting depth exceeds maximum of {self.max_depth}",
                            code="DEPTH_EXCEEDED")
        obj = self.obj(data, where)
        name = ""
        version = ""
        if "name" in obj or require_meta:
            name = self.string(self.take(obj, "name", where), where, "pipeline name")
            if (name or require_meta) and not is_identifier(name):
                raise self.fail(where, f"pipeline name {name!r} is not a valid identifier")
        if "version" in obj or require_meta:
            version = self.string(self.take(obj, "version", where), where, "pipeline version")
        steps_raw = self.take(obj, "steps", where)
        if not isinstance(steps_raw, list):
            raise self.fail(where, "steps must be an array")
        self.check_extras(obj, {"name", "version", "steps"}, where)
        steps = tuple(
            self.step(s, depth, f"{where}.steps[{i}]") for i, s in enumerate(steps_raw)
        )
        return Pipeline(name=name, version=version, steps=steps)

    def expr(self, data: Value, where: str) -> Expr:
        obj = self.obj(data, where)
        tags = [k for k in ("lit", "var", "template") if k in obj]
        if len(tags) != 1:
            raise self.fail(where, "expression must have exactly one of lit/var/template")
        tag = tags[0]
        self.check_extras(obj, {tag}, where)
        if tag == "lit":
            return Literal(normalize_value(obj["lit"]))
        if tag == "var":
            return VarRef(self.nonempty(obj["var"], where, "var path"))
        return Template(self.string(obj["template"], where, "template"))

    def condition(self, data: Value, where: str) -> Condition:
        obj = self.obj(data, where)
        kind = self.string(self.take(obj, "kind", where), where, "condition kind")
        if kind == "varEquals":
            var = self.nonempty(self.take(obj, "var", where), where, "var")
            value = normalize_value(self.take(obj, "value", where))
            self.check_extras(obj, {"kind", "var", "value"}, where)
            return VarEquals(var, value)
        if kind == "pathExists":
            root = self.ident(self.take(obj, "root", where), where, "root")
            path_raw = self.take(obj, "path", where)
            if not isinstance(path_raw, list):
                raise self.fail(where, "path must be an array of segments")
            segs: list[str | int] = []
            for seg in path_raw:
                if isinstance(seg, str) and seg:
                    segs.append(seg)
                elif isinstance(seg, int) and not isinstance(seg, bool) and seg >= 0:
                    segs.append(seg)
                else:
                    raise self.fail(where, f"bad path segment {seg!r}")
            self.check_extras(obj, {"kind", "root", "path"}, where)
            return PathExists(root, tuple(segs))
        if kind == "varContains":
            var = self.nonempty(self.take(obj, "var", where), where, "var")
            sub = self.string(self.take(obj, "substring", where), where, "substring")
            self.check_extras(obj, {"kind", "var", "substring"}, where)
            return VarContains(var, sub)
        if kind == "equals":
            left = self.expr(self.take(obj, "left", where), f"{where}.left")
            right = self.expr(self.take(obj, "right", where), f"{where}.right")
            self.check_extras(obj, {"kind", "left", "right"}, where)
            return ExprEquals(left, right)
        if kind in ("and", "or"):
            left = self.condition(self.take(obj, "left", where), f"{where}.left")
            right = self.condition(self.take(obj, "right", where), f"{where}.right")
            self.check_extras(obj, {"kind", "left", "right"}, where)
            return And(left, right) if kind == "and" else Or(left, right)
        if kind == "not":
            inner = self.condition(self.take(obj, "inner", where), f"{where}.inner")
            self.check_extras(obj, {"kind", "inner"}, where)
            return Not(inner)
        raise self.fail(where, f"unknown condition kind {kind!r}", code="UNKNOWN_KIND")

    def step(self, data: Value, depth: int, where: str) -> Step:
        obj = self.obj(data, where)
        op = self.string(self.take(obj, "op", where), where, "step op")
        handler = _STEP_PARSERS.get(op)
        if handler is None:
            raise self.fail(where, f"unknown step op {op!r}", code="UNKNOWN_OP")
        return handler(self, obj, depth, where)


def _parse_pass_variables(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    names_raw = ctx.take(obj, "names", where)
    if not isinstance(names_raw, list) or not names_raw:
        raise ctx.fail(where, "names must be a non-empty array")
    names = tuple(ctx.ident(n, where, "variable name") for n in names_raw)
    ctx.check_extras(obj, {"op", "names"}, where)
    return PassVariables(names)


def _parse_set_value(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    var = ctx.ident(ctx.take(obj, "var", where), where, "var")
    value = ctx.expr(ctx.take(obj, "value", where), f"{where}.value")
    ctx.check_extras(obj, {"op", "var", "value"}, where)
    return SetValue(var, value)


def _parse_set_values(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    raw = ctx.take(obj, "assignments", where)
    if not isinstance(raw, list) or not raw:
        raise ctx.fail(where, "assignments must be a non-empty array")
    assignments = []
    for i, a in enumerate(raw):
        aobj = ctx.obj(a, f"{where}.assignments[{i}]")
        var = ctx.ident(ctx.take(aobj, "var", where), where, "var")
        value = ctx.expr(ctx.take(aobj, "value", where), f"{where}.assignments[{i}].value")
        ctx.check_extras(aobj, {"var", "value"}, f"{where}.assignments[{i}]")
        assignments.append(SetValue(var, value))
    ctx.check_extras(obj, {"op", "assignments"}, where)
    return SetValues(tuple(assignments))


def _parse_for_each(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    list_path = ctx.nonempty(ctx.take(obj, "list", where), where, "list")
    item = ctx.ident(ctx.take(obj, "item", where), where, "item")
    parallel = obj.get("parallel", False)
    if not isinstance(parallel, bool):
        raise ctx.fail(where, "parallel must be a boolean")
    body = ctx.pipeline(ctx.take(obj, "body", where), depth + 1, f"{where}.body")
    ctx.check_extras(obj, {"op", "list", "item", "parallel", "body"}, where)
    return ForEach(list_path, item, body, parallel)


def _parse_when(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    cond = ctx.condition(ctx.take(obj, "cond", where), f"{where}.cond")
    then_body = ctx.pipeline(ctx.take(obj, "then", where), depth + 1, f"{where}.then")
    else_body = None
    if "else" in obj:
        else_body = ctx.pipeline(obj["else"], depth + 1, f"{where}.else")
    ctx.check_extras(obj, {"op", "cond", "then", "else"}, where)
    return When(cond, then_body, else_body)


def _parse_do_return(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    ctx.check_extras(obj, {"op"}, where)
    return DoReturn()


def _parse_function(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    name = ctx.ident(ctx.take(obj, "name", where), where, "function name")
    args_raw = obj.get("args", [])
    if not isinstance(args_raw, list):
        raise ctx.fail(where, "args must be an array")
    args = tuple(ctx.expr(a, f"{where}.args[{i}]") for i, a in enumerate(args_raw))
    ctx.check_extras(obj, {"op", "name", "args"}, where)
    return FunctionCall(name, args)


def _parse_marshal(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    from_path = ctx.nonempty(ctx.take(obj, "from", where), where, "from")
    to_var = ctx.ident(ctx.take(obj, "to", where), where, "to")
    ctx.check_extras(obj, {"op", "from", "to"}, where)
    return Marshal(from_path, to_var)


def _parse_marshal_many(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    from_path = ctx.nonempty(ctx.take(obj, "from", where), where, "from")
    to_raw = ctx.take(obj, "to", where)
    if not isinstance(to_raw, list) or not to_raw:
        raise ctx.fail(where, "to must be a non-empty array of variable names")
    to_vars = tuple(ctx.ident(t, where, "to") for t in to_raw)
    ctx.check_extras(obj, {"op", "from", "to"}, where)
    return MarshalMany(from_path, to_vars)


def _parse_unmarshal_list(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    return UnmarshalList(*_from_to(ctx, obj, where))


def _parse_unmarshal_map(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    return UnmarshalMap(*_from_to(ctx, obj, where))


def _from_to(ctx: _ParseCtx, obj: dict, where: str) -> tuple[str, str]:
    from_var = ctx.ident(ctx.take(obj, "from", where), where, "from")
    to_var = ctx.ident(ctx.take(obj, "to", where), where, "to")
    ctx.check_extras(obj, {"op", "from", "to"}, where)
    return from_var, to_var


def _parse_find_matching_item(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    collection = ctx.nonempty(ctx.take(obj, "collection", where), where, "collection")
    query = ctx.nonempty(ctx.take(obj, "query", where), where, "query")
    to_var = ctx.ident(ctx.take(obj, "to", where), where, "to")
    ctx.check_extras(obj, {"op", "collection", "query", "to"}, where)
    return FindMatchingItem(collection, query, to_var)


def _parse_set_map_value(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    target = ctx.ident(ctx.take(obj, "target", where), where, "target")
    path = ctx.nonempty(ctx.take(obj, "path", where), where, "path")
    value = ctx.expr(ctx.take(obj, "value", where), f"{where}.value")
    ctx.check_extras(obj, {"op", "target", "path", "value"}, where)
    return SetMapValue(target, path, value)


def _parse_get_map_value(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    source = ctx.ident(ctx.take(obj, "source", where), where, "source")
    path = ctx.nonempty(ctx.take(obj, "path", where), where, "path")
    to_var = ctx.ident(ctx.take(obj, "to", where), where, "to")
    ctx.check_extras(obj, {"op", "source", "path", "to"}, where)
    return GetMapValue(source, path, to_var)


def _parse_add_message(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    role = ctx.string(ctx.take(obj, "role", where), where, "role")
    if role not in VALID_ROLES:
        raise ctx.fail(where, f"unknown role {role!r}; expected one of {list(VALID_ROLES)}")
    content = ctx.expr(ctx.take(obj, "content", where), f"{where}.content")
    ctx.check_extras(obj, {"op", "role", "content"}, where)
    return AddMessage(role, content)


def _parse_add_tool(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    raw = ctx.take(obj, "tools", where)
    if not isinstance(raw, list) or not raw:
        raise ctx.fail(where, "tools must be a non-empty array of tool ids")
    tool_ids = tuple(ctx.nonempty(t, where, "tool id") for t in raw)
    ctx.check_extras(obj, {"op", "tools"}, where)
    return AddTool(tool_ids)


def _parse_chat_request(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    llm_id = ctx.nonempty(ctx.take(obj, "llm", where), where, "llm")
    ctx.check_extras(obj, {"op", "llm"}, where)
    return ChatRequest(llm_id)


def _parse_tool_request(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    llm_id = ctx.nonempty(ctx.take(obj, "llm", where), where, "llm")
    ctx.check_extras(obj, {"op", "llm"}, where)
    return ToolRequest(llm_id)


def _parse_add_response(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    rtype = ctx.nonempty(ctx.take(obj, "type", where), where, "type")
    content = ctx.expr(ctx.take(obj, "content", where), f"{where}.content")
    rid = None
    if "id" in obj:
        rid = ctx.nonempty(obj["id"], where, "id")
    ctx.check_extras(obj, {"op", "type", "content", "id"}, where)
    return AddResponse(rtype, content, rid)


def _parse_remove_response(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    rid = ctx.nonempty(ctx.take(obj, "id", where), where, "id")
    ctx.check_extras(obj, {"op", "id"}, where)
    return RemoveResponse(rid)


def _parse_clear_responses(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    ctx.check_extras(obj, {"op"}, where)
    return ClearResponses()


def _parse_update_response(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    rid = ctx.nonempty(ctx.take(obj, "id", where), where, "id")
    content = ctx.expr(ctx.take(obj, "content", where), f"{where}.content")
    ctx.check_extras(obj, {"op", "id", "content"}, where)
    return UpdateResponse(rid, content)


def _parse_run_pipeline(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    ref = ctx.ident(ctx.take(obj, "pipeline", where), where, "pipeline ref")
    raw = obj.get("pass", [])
    if not isinstance(raw, list):
        raise ctx.fail(where, "pass must be an array of variable names")
    pass_names = tuple(ctx.ident(n, where, "pass name") for n in raw)
    ctx.check_extras(obj, {"op", "pipeline", "pass"}, where)
    return RunPipeline(ref, pass_names)


def _parse_try_catch_finally(ctx: _ParseCtx, obj: dict, depth: int, where: str) -> Step:
    try_body = ctx.pipeline(ctx.take(obj, "try", where), depth + 1, f"{where}.try")
    catch_body = None
    finally_body = None
    if "catch" in obj:
        catch_body = ctx.pipeline(obj["catch"], depth + 1, f"{where}.catch")
    if "finally" in obj:
        finally_body = ctx.pipeline(obj["finally"], depth + 1, f"{where}.finally")
    ctx.check_extras(obj, {"op", "try", "catch", "finally"}, where)
    return TryCatchFinally(try_body, catch_body, finally_body)


_STEP_PARSERS = {
    "passVariables": _parse_pass_variables,
    "setValue": _parse_set_value,
    "setValues": _parse_set_values,
    "forEach": _parse_for_each,
    "when": _parse_when,
    "doReturn": _parse_do_return,
    "function": _parse_function,
    "marshal": _parse_marshal,
    "marshalMany": _parse_marshal_many,
    "unmarshalList": _parse_unmarshal_list,
    "unmarshalMap": _parse_unmarshal_map,
    "findMatchingItem": _parse_find_matching_item,
    "setMapValue": _parse_set_map_value,
    "getMapValue": _parse_get_map_value,
    "addMessage": _parse_add_message,
    "addTool": _parse_add_tool,
    "chatRequest": _parse_chat_request,
    "toolRequest": _parse_tool_request,
    "addResponse": _parse_add_response,
    "removeResponse": _parse_remove_response,
    "clearResponses": _parse_clear_responses,
    "updateResponse": _parse_update_response,
    "runPipeline": _parse_run_pipeline,
    "tryCatchFinally": _parse_try_catch_finally,
}


# --------------------------------------------------------------------------
# Serialization

def serialize_ir(p: Pipeline) -> str:
    """Canonical JSON for a pipeline: sorted keys, no whitespace."""
    return canonical_json(pipeline_to_jsonable(p))


def hash_pipeline(p: Pipeline) -> PipelineDigest:
    """SHA-256 of the canonical serialization; stable across runs/platforms."""
    raw = serialize_ir(p).encode("utf-8")
    return PipelineDigest(hashlib.sha256(raw).hexdigest())


def pipeline_to_jsonable(p: Pipeline) -> dict:
    return {
        "name": p.name,
        "version": p.version,
        "steps": [step_to_jsonable(s) for s in p.steps],
    }


def expr_to_jsonable(e: Expr) -> dict:
    if isinstance(e, Literal):
        return {"lit": e.value}
    if isinstance(e, VarRef):
        return {"var": e.path}
    return {"template": e.text}


def condition_to_jsonable(c: Condition) -> dict:
    if isinstance(c, VarEquals):
        return {"kind": "varEquals", "var": c.var, "value": c.value}
    if isinstance(c, PathExists):
        return {"kind": "pathExists", "root": c.root, "path": list(c.path)}
    if isinstance(c, VarContains):
        return {"kind": "varContains", "var": c.var, "substring": c.substring}
    if isinstance(c, ExprEquals):
        return {"kind": "equals", "left": expr_to_jsonable(c.left),
                "right": expr_to_jsonable(c.right)}
    if isinstance(c, And):
        return {"kind": "and", "left": condition_to_jsonable(c.left),
                "right": condition_to_jsonable(c.right)}
    if isinstance(c, Or):
        return {"kind": "or", "left": condition_to_jsonable(c.left),
                "right": condition_to_jsonable(c.right)}
    return {"kind": "not", "inner": condition_to_jsonable(c.inner)}


def step_to_jsonable(s: Step) -> dict:
    if isinstance(s, PassVariables):
        return {"op": "passVariables", "names": list(s.names)}
    if isinstance(s, SetValue):
        return {"op": "setValue", "var": s.var, "value": expr_to_jsonable(s.value)}
    if isinstance(s, SetValues):
        return {"op": "setValues", "assignments": [
            {"var": a.var, "value": expr_to_jsonable(a.value)} for a in s.assignments]}
    if isinstance(s, ForEach):
        return {"op": "forEach", "list": s.list_path, "item": s.item_var,
                "parallel": s.parallel, "body": pipeline_to_jsonable(s.body)}
    if isinstance(s, When):
        out: dict[str, Any] = {"op": "when", "cond": condition_to_jsonable(s.cond),
                               "then": pipeline_to_jsonable(s.then_body)}
        if s.else_body is not None:
            out["else"] = pipeline_to_jsonable(s.else_body)
        return out
    if isinstance(s, DoReturn):
        return {"op": "doReturn"}
    if isinstance(s, FunctionCall):
        return {"op": "function", "name": s.name,
                "args": [expr_to_jsonable(a) for a in s.args]}
    if isinstance(s, Marshal):
        return {"op": "marshal", "from": s.from_path, "to": s.to_var}
    if isinstance(s, MarshalMany):
        return {"op": "marshalMany", "from": s.from_path, "to": list(s.to_vars)}
    if isinstance(s, UnmarshalList):
        return {"op": "unmarshalList", "from": s.from_var, "to": s.to_var}
    if isinstance(s, UnmarshalMap):
        return {"op": "unmarshalMap", "from": s.from_var, "to": s.to_var}
    if isinstance(s, FindMatchingItem):
        return {"op": "findMatchingItem", "collection": s.collection_path,
                "query": s.query, "to": s.to_var}
    if isinstance(s, SetMapValue):
        return {"op": "setMapValue", "target": s.target_var, "path": s.path,
                "value": expr_to_jsonable(s.value)}
    if isinstance(s, GetMapValue):
        return {"op": "getMapValue", "source": s.source_var, "path": s.path, "to": s.to_var}
    if isinstance(s, AddMessage):
        return {"op": "addMessage", "role": s.role, "content": expr_to_jsonable(s.content)}
    if isinstance(s, AddTool):
        return {"op": "addTool", "tools": list(s.tool_ids)}
    if isinstance(s, ChatRequest):
        return {"op": "chatRequest", "llm": s.llm_id}
    if isinstance(s, ToolRequest):
        return {"op": "toolRequest", "llm": s.llm_id}
    if isinstance(s, AddResponse):
        out = {"op": "addResponse", "type": s.type, "content": expr_to_jsonable(s.content)}
        if s.id is not None:
            out["id"] = s.id
        return out
    if isinstance(s, RemoveResponse):
        return {"op": "removeResponse", "id": s.id}
    if isinstance(s, ClearResponses):
        return {"op": "clearResponses"}
    if isinstance(s, UpdateResponse):
        return {"op": "updateResponse", "id": s.id, "content": expr_to_jsonable(s.content)}
    if isinstance(s, RunPipeline):
        return {"op": "runPipeline", "pipeline": s.ref, "pass": list(s.pass_names)}
    if isinstance(s, TryCatchFinally):
        out = {"op": "tryCatchFinally", "try": pipeline_to_jsonable(s.try_body)}
        if s.catch_body is not None:
            out["catch"] = pipeline_to_jsonable(s.catch_body)
        if s.finally_body is not None:
            out["finally"] = pipeline_to_jsonable(s.finally_body)
        return out
    raise EngineError("BAD_IR", f"unknown step type {type(s).__name__}")


def step_op_name(s: Step) -> str:
    return step_to_jsonable(s)["op"]
