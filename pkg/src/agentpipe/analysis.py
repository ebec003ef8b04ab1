"""Compile-time validation and semantics-preserving optimization passes.

``validate`` reports structural problems, variable-flow problems (a read
is defined only when every path reaching it defines the variable),
unreachable steps, signature mismatches, and cycles in the runPipeline
reference graph. The passes (``eliminate_dead_code``, ``fuse_steps``,
``plan_parallel``) are pure functions over the immutable IR and are
idempotent; running validate on their output introduces no new errors.

Step paths locate findings: entries alternate step index and body ordinal
(forEach body = 0; when: then = 0, else = 1; tryCatchFinally: try = 0,
catch = 1, finally = 2). A root-level step is just ``[i]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .errors import EngineError
from .ir import (
    AddMessage,
    AddResponse,
    AddTool,
    And,
    ChatRequest,
    ClearResponses,
    Condition,
    DoReturn,
    Expr,
    ExprEquals,
    FindMatchingItem,
    ForEach,
    FunctionCall,
    GetMapValue,
    Literal,
    Marshal,
    MarshalMany,
    Not,
    Or,
    PassVariables,
    PathExists,
    Pipeline,
    RemoveResponse,
    RunPipeline,
    SetMapValue,
    SetValue,
    SetValues,
    Step,
    Template,
    ToolRequest,
    TryCatchFinally,
    UnmarshalList,
    UnmarshalMap,
    UpdateResponse,
    VarContains,
    VarEquals,
    VarRef,
    When,
    DEFAULT_MAX_DEPTH,
    is_identifier,
)
from .values import eval_condition, parse_path, split_template, _tokenize_segment

TOOL_RESULTS_VAR = "toolResults"


@dataclass(frozen=True)
class Finding:
    code: str
    message: str
    step_path: tuple[int, ...]

    def to_jsonable(self) -> dict:
        return {"code": self.code, "message": self.message, "stepPath": list(self.step_path)}


@dataclass
class ValidationReport:
    errors: list[Finding] = field(default_factory=list)
    warnings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_jsonable(self) -> dict:
        return {
            "errors": [f.to_jsonable() for f in self.errors],
            "warnings": [f.to_jsonable() for f in self.warnings],
        }


@dataclass(frozen=True)
class ParamSig:
    name: str
    type: str
    required: bool


@dataclass(frozen=True)
class SignatureSet:
    """Known tool/function/LLM names for static signature checking."""

    tool_signatures: Mapping[str, tuple[ParamSig, ...]] = field(default_factory=dict)
    function_arities: Mapping[str, int] = field(default_factory=dict)
    llm_ids: frozenset = frozenset()


# --------------------------------------------------------------------------
# Read-set extraction

def expr_paths(expr: Expr) -> list[str]:
    """All variable paths an expression reads."""
    if isinstance(expr, Literal):
        return []
    if isinstance(expr, VarRef):
        return [expr.path]
    if isinstance(expr, Template):
        paths = []
        for kind, payload in split_template(expr.text):
            if kind != "expr":
                continue
            for tkind, token in _tokenize_segment(payload):
                if tkind == "path":
                    paths.append(token)
        return paths
    return []


def condition_paths(cond: Condition) -> list[str]:
    if isinstance(cond, VarEquals):
        return [cond.var]
    if isinstance(cond, PathExists):
        return [cond.root]
    if isinstance(cond, VarContains):
        return [cond.var]
    if isinstance(cond, ExprEquals):
        return expr_paths(cond.left) + expr_paths(cond.right)
    if isinstance(cond, (And, Or)):
        return condition_paths(cond.left) + condition_paths(cond.right)
    if isinstance(cond, Not):
        return condition_paths(cond.inner)
    return []


def _root_of(path_text: str) -> str | None:
    try:
        return parse_path(path_text).segments[0]  # type: ignore[return-value]
    except EngineError:
        return None


def constant_condition_value(cond: Condition) -> bool | None:
    """Fold a condition whose leaves are all literal; None when not constant."""
    if isinstance(cond, ExprEquals):
        if isinstance(cond.left, Literal) and isinstance(cond.right, Literal):
            return eval_condition(cond, {})
        return None
    if isinstance(cond, And):
        left = constant_condition_value(cond.left)
        right = constant_condition_value(cond.right)
        if left is False or right is False:
            return False
        if left is True and right is True:
            return True
        return None
    if isinstance(cond, Or):
        left = constant_condition_value(cond.left)
        right = constant_condition_value(cond.right)
        if left is True or right is True:
            return True
        if left is False and right is False:
            return False
        return None
    if isinstance(cond, Not):
        inner = constant_condition_value(cond.inner)
        return None if inner is None else not inner
    return None


# --------------------------------------------------------------------------
# Validation

class _Flow:
    """Path-insensitive defined-variable state for one scope."""

    __slots__ = ("defined", "wildcard", "terminated")

    def __init__(self, defined: set[str], wildcard: bool = False, terminated: bool = False):
        self.defined = defined
        self.wildcard = wildcard
        self.terminated = terminated

    def clone(self) -> "_Flow":
        return _Flow(set(self.defined), self.wildcard, self.terminated)

    def knows(self, root: str) -> bool:
        return self.wildcard or root in self.defined


def validate(p: Pipeline, sigs: SignatureSet | None = None,
             registry: Mapping[str, Pipeline] | None = None,
             max_depth: int = DEFAULT_MAX_DEPTH) -> ValidationReport:
    """Static checks; problems are reported, never thrown."""
    report = ValidationReport()
    v = _Validator(report, sigs, registry, max_depth)
    v.pipeline(p, _Flow(set()), (), depth=1)
    v.check_cycles(p)
    return report


class _Validator:
    def __init__(self, report: ValidationReport, sigs: SignatureSet | None,
                 registry: Mapping[str, Pipeline] | None, max_depth: int):
        self.report = report
        self.sigs = sigs
        self.registry = registry
        self.max_depth = max_depth

    def error(self, code: str, message: str, path: tuple[int, ...]) -> None:
        self.report.errors.append(Finding(code, message, path))

    def warn(self, code: str, message: str, path: tuple[int, ...]) -> None:
        self.report.warnings.append(Finding(code, message, path))

    def pipeline(self, p: Pipeline, flow: _Flow, prefix: tuple[int, ...], depth: int) -> None:
        if depth > self.max_depth:
            self.error("DEPTH_EXCEEDED",
                       f"nesting depth {depth} exceeds maximum of {self.max_depth}", prefix)
            return
        for idx, step in enumerate(p.steps):
            path = prefix + (idx,)
            if flow.terminated:
                self.warn("UNREACHABLE", "step can never execute (follows doReturn)", path)
                continue
            self.step(step, flow, path, depth)

    def check_read(self, path_text: str, flow: _Flow, path: tuple[int, ...]) -> None:
        root = _root_of(path_text)
        if root is None:
            self.error("BAD_PATH", f"malformed path {path_text!r}", path)
            return
        if not flow.knows(root):
            self.error("UNDEFINED_VAR",
                       f"variable {root!r} (read via {path_text!r}) is not defined on every "
                       "path reaching this step", path)

    def check_expr(self, expr: Expr, flow: _Flow, path: tuple[int, ...]) -> None:
        for p_text in expr_paths(expr):
            self.check_read(p_text, flow, path)

    def step(self, step: Step, flow: _Flow, path: tuple[int, ...], depth: int) -> None:
        if isinstance(step, PassVariables):
            flow.defined.update(step.names)
        elif isinstance(step, SetValue):
            self.check_expr(step.value, flow, path)
            flow.defined.add(step.var)
        elif isinstance(step, SetValues):
            for a in step.assignments:
                self.check_expr(a.value, flow, path)
                flow.defined.add(a.var)
        elif isinstance(step, ForEach):
            if not is_identifier(step.item_var):
                self.error("BAD_ITEM_NAME",
                           f"forEach item name {step.item_var!r} is not a valid identifier", path)
            self.check_read(step.list_path, flow, path)
            body_flow = flow.clone()
            body_flow.terminated = False
            body_flow.defined.add(step.item_var)
            self.pipeline(step.body, body_flow, path + (0,), depth + 1)
            # copy-on-write: nothing defined in the body escapes
        elif isinstance(step, When):
            for p_text in condition_paths(step.cond):
                self.check_read(p_text, flow, path)
            const = constant_condition_value(step.cond)
            then_flow = flow.clone()
            else_flow = flow.clone()
            if const is False:
                for i in range(len(step.then_body.steps)):
                    self.warn("UNREACHABLE", "branch condition is constant false",
                              path + (0, i))
            else:
                self.pipeline(step.then_body, then_flow, path + (0,), depth + 1)
            if step.else_body is not None:
                if const is True:
                    for i in range(len(step.else_body.steps)):
                        self.warn("UNREACHABLE", "branch condition is constant true",
                                  path + (1, i))
                else:
                    self.pipeline(step.else_body, else_flow, path + (1,), depth + 1)
            if const is True:
                flow.defined = then_flow.defined
                flow.wildcard = then_flow.wildcard
                flow.terminated = then_flow.terminated
            elif const is False:
                flow.defined = else_flow.defined
                flow.wildcard = else_flow.wildcard
                flow.terminated = else_flow.terminated
            else:
                # defined after the join only when defined in both branches
                flow.defined = then_flow.defined & else_flow.defined
                flow.wildcard = then_flow.wildcard or else_flow.wildcard
                flow.terminated = then_flow.terminated and else_flow.terminated \
                    and step.else_body is not None
        elif isinstance(step, DoReturn):
            flow.terminated = True
        elif isinstance(step, FunctionCall):
            for arg in step.args:
                self.check_expr(arg, flow, path)
            if self.sigs is not None:
                arity = self.sigs.function_arities.get(step.name)
                if arity is None:
                    self.error("UNKNOWN_FUNCTION", f"function {step.name!r} is not registered",
                               path)
                elif arity != len(step.args):
                    self.error("ARITY_MISMATCH",
                               f"function {step.name!r} takes {arity} args, got {len(step.args)}",
                               path)
            # handlers may write arbitrary caller-scope outputs
            flow.wildcard = True
        elif isinstance(step, Marshal):
            self.check_read(step.from_path, flow, path)
            flow.defined.add(step.to_var)
        elif isinstance(step, MarshalMany):
            self.check_read(step.from_path, flow, path)
            flow.defined.update(step.to_vars)
        elif isinstance(step, (UnmarshalList, UnmarshalMap)):
            self.check_read(step.from_var, flow, path)
            flow.defined.add(step.to_var)
        elif isinstance(step, FindMatchingItem):
            self.check_read(step.collection_path, flow, path)
            try:
                from .values import _parse_query
                _parse_query(step.query)
            except EngineError as e:
                self.error("BAD_QUERY", str(e), path)
            flow.defined.add(step.to_var)
        elif isinstance(step, SetMapValue):
            self.check_read(step.target_var, flow, path)
            self.check_expr(step.value, flow, path)
            flow.defined.add(step.target_var)
        elif isinstance(step, GetMapValue):
            self.check_read(step.source_var, flow, path)
            flow.defined.add(step.to_var)
        elif isinstance(step, AddMessage):
            self.check_expr(step.content, flow, path)
        elif isinstance(step, AddTool):
            if self.sigs is not None:
                for tool_id in step.tool_ids:
                    if tool_id not in self.sigs.tool_signatures:
                        self.error("UNKNOWN_TOOL", f"tool {tool_id!r} is not registered", path)
        elif isinstance(step, ChatRequest):
            if self.sigs is not None and step.llm_id not in self.sigs.llm_ids:
                self.error("UNKNOWN_LLM", f"LLM {step.llm_id!r} is not registered", path)
        elif isinstance(step, ToolRequest):
            if self.sigs is not None and step.llm_id not in self.sigs.llm_ids:
                self.error("UNKNOWN_LLM", f"LLM {step.llm_id!r} is not registered", path)
            flow.defined.add(TOOL_RESULTS_VAR)
        elif isinstance(step, AddResponse):
            self.check_expr(step.content, flow, path)
        elif isinstance(step, UpdateResponse):
            self.check_expr(step.content, flow, path)
        elif isinstance(step, (RemoveResponse, ClearResponses)):
            pass
        elif isinstance(step, RunPipeline):
            for name in step.pass_names:
                self.check_read(name, flow, path)
            if self.registry is not None and step.ref not in self.registry:
                self.error("UNKNOWN_PIPELINE", f"pipeline {step.ref!r} is not registered", path)
        elif isinstance(step, TryCatchFinally):
            try_flow = flow.clone()
            try_flow.terminated = False
            self.pipeline(step.try_body, try_flow, path + (0,), depth + 1)
            if step.catch_body is not None:
                catch_flow = flow.clone()
                catch_flow.terminated = False
                had_error_var = "error" in catch_flow.defined
                catch_flow.defined.add("error")
                self.pipeline(step.catch_body, catch_flow, path + (1,), depth + 1)
                if not had_error_var:
                    catch_flow.defined.discard("error")
                flow.defined = try_flow.defined & catch_flow.defined
                flow.wildcard = try_flow.wildcard or catch_flow.wildcard
                flow.terminated = try_flow.terminated and catch_flow.terminated
            else:
                flow.defined = try_flow.defined
                flow.wildcard = try_flow.wildcard
                flow.terminated = try_flow.terminated
            if step.finally_body is not None:
                fin_flow = _Flow(set(flow.defined), flow.wildcard, False)
                self.pipeline(step.finally_body, fin_flow, path + (2,), depth + 1)
                flow.defined = fin_flow.defined
                flow.wildcard = fin_flow.wildcard
                flow.terminated = flow.terminated or fin_flow.terminated
        else:  # pragma: no cover
            self.error("BAD_IR", f"unknown step type {type(step).__name__}", path)

    # -- runPipeline reference cycles ------------------------------------

    def check_cycles(self, p: Pipeline) -> None:
        graph: dict[str, set[str]] = {}
        root_name = p.name or "<root>"
        graph[root_name] = _pipeline_refs(p)
        if self.registry is not None:
            for name, target in self.registry.items():
                graph.setdefault(name, _pipeline_refs(target))
        state: dict[str, int] = {}
        stack: list[str] = []
        cycles: list[list[str]] = []

        def dfs(node: str) -> None:
            state[node] = 1
            stack.append(node)
            for ref in sorted(graph.get(node, ())):
                if ref not in graph:
                    continue  # unknown refs reported per-step
                mark = state.get(ref, 0)
                if mark == 0:
                    dfs(ref)
                elif mark == 1:
                    cycles.append(stack[stack.index(ref):] + [ref])
            stack.pop()
            state[node] = 2

        dfs(root_name)
        for cycle in cycles:
            names = sorted(set(cycle))
            self.error("CYCLIC_REFERENCE",
                       "cyclic runPipeline references: " + " -> ".join(cycle)
                       + f" (pipelines: {', '.join(names)})", ())


def _pipeline_refs(p: Pipeline) -> set[str]:
    refs: set[str] = set()

    def walk(pl: Pipeline) -> None:
        for step in pl.steps:
            if isinstance(step, RunPipeline):
                refs.add(step.ref)
            for body in _bodies(step):
                walk(body)

    walk(p)
    return refs


def _bodies(step: Step) -> list[Pipeline]:
    from .ir import child_bodies
    return child_bodies(step)


# --------------------------------------------------------------------------
# Pass 1: dead-code elimination

def eliminate_dead_code(p: Pipeline) -> Pipeline:
    """Drop steps after doReturn everywhere; fold constant conditions.

    A ``when`` whose condition folds to a constant is replaced by the taken
    branch spliced in place (branches run in the enclosing scope, so the
    splice is observationally equivalent); with no else and a false
    condition the step disappears.
    """
    return Pipeline(p.name, p.version, _dce_steps(p.steps))


def _dce_steps(steps: tuple[Step, ...]) -> tuple[Step, ...]:
    out: list[Step] = []
    for step in steps:
        for s in _dce_step(step):
            out.append(s)
            if isinstance(s, DoReturn):
                return tuple(out)
    return tuple(out)


def _dce_step(step: Step) -> list[Step]:
    if isinstance(step, When):
        const = constant_condition_value(step.cond)
        if const is True:
            return list(_dce_steps(step.then_body.steps))
        if const is False:
            if step.else_body is None:
                return []
            return list(_dce_steps(step.else_body.steps))
        then_body = Pipeline(step.then_body.name, step.then_body.version,
                             _dce_steps(step.then_body.steps))
        else_body = None
        if step.else_body is not None:
            else_body = Pipeline(step.else_body.name, step.else_body.version,
                                 _dce_steps(step.else_body.steps))
        return [When(step.cond, then_body, else_body)]
    if isinstance(step, ForEach):
        body = Pipeline(step.body.name, step.body.version, _dce_steps(step.body.steps))
        return [ForEach(step.list_path, step.item_var, body, step.parallel)]
    if isinstance(step, TryCatchFinally):
        try_body = Pipeline(step.try_body.name, step.try_body.version,
                            _dce_steps(step.try_body.steps))
        catch_body = None
        if step.catch_body is not None:
            catch_body = Pipeline(step.catch_body.name, step.catch_body.version,
                                  _dce_steps(step.catch_body.steps))
        finally_body = None
        if step.finally_body is not None:
            finally_body = Pipeline(step.finally_body.name, step.finally_body.version,
                                    _dce_steps(step.finally_body.steps))
        return [TryCatchFinally(try_body, catch_body, finally_body)]
    return [step]


# --------------------------------------------------------------------------
# Pass 2: fusion

def fuse_steps(p: Pipeline) -> Pipeline:
    """Batch adjacent setValue runs; merge adjacent same-source marshals.

    Batched assignments evaluate left to right, so later entries may read
    earlier ones, exactly like the unfused sequence. Only immediately
    adjacent marshals with identical source paths merge.
    """
    return Pipeline(p.name, p.version, _fuse_list(p.steps))


def _fuse_list(steps: tuple[Step, ...]) -> tuple[Step, ...]:
    out: list[Step] = []
    i = 0
    n = len(steps)
    while i < n:
        step = steps[i]
        if isinstance(step, (SetValue, SetValues)):
            assignments: list[SetValue] = []
            j = i
            while j < n and isinstance(steps[j], (SetValue, SetValues)):
                s = steps[j]
                if isinstance(s, SetValue):
                    assignments.append(s)
                else:
                    assignments.extend(s.assignments)
                j += 1
            if len(assignments) == 1 and isinstance(step, SetValue) and j == i + 1:
                out.append(step)
            else:
                out.append(SetValues(tuple(assignments)))
            i = j
            continue
        if isinstance(step, (Marshal, MarshalMany)):
            src = step.from_path
            targets: list[str] = []
            j = i
            while j < n and isinstance(steps[j], (Marshal, MarshalMany)) \
                    and steps[j].from_path == src:
                s = steps[j]
                if isinstance(s, Marshal):
                    targets.append(s.to_var)
                else:
                    targets.extend(s.to_vars)
                j += 1
            if j == i + 1 and isinstance(step, Marshal):
                out.append(step)
            else:
                out.append(MarshalMany(src, tuple(targets)))
            i = j
            continue
        out.append(_fuse_nested(step))
        i += 1
    return tuple(out)


def _fuse_nested(step: Step) -> Step:
    if isinstance(step, ForEach):
        return ForEach(step.list_path, step.item_var,
                       Pipeline(step.body.name, step.body.version, _fuse_list(step.body.steps)),
                       step.parallel)
    if isinstance(step, When):
        else_body = None
        if step.else_body is not None:
            else_body = Pipeline(step.else_body.name, step.else_body.version,
                                 _fuse_list(step.else_body.steps))
        return When(step.cond,
                    Pipeline(step.then_body.name, step.then_body.version,
                             _fuse_list(step.then_body.steps)),
                    else_body)
    if isinstance(step, TryCatchFinally):
        catch_body = None
        if step.catch_body is not None:
            catch_body = Pipeline(step.catch_body.name, step.catch_body.version,
                                  _fuse_list(step.catch_body.steps))
        finally_body = None
        if step.finally_body is not None:
            finally_body = Pipeline(step.finally_body.name, step.finally_body.version,
                                    _fuse_list(step.finally_body.steps))
        return TryCatchFinally(Pipeline(step.try_body.name, step.try_body.version,
                                        _fuse_list(step.try_body.steps)),
                               catch_body, finally_body)
    return step


# --------------------------------------------------------------------------
# Pass 3: parallel planning

CONVERSATION_STEPS = (AddMessage, AddTool, ChatRequest, ToolRequest)
RESPONSE_EDIT_STEPS = (RemoveResponse, ClearResponses, UpdateResponse)


def plan_parallel(p: Pipeline, function_purity: Mapping[str, bool] | None = None,
                  pipelines: Mapping[str, Pipeline] | None = None) -> Pipeline:
    """Set parallelHint on every forEach: true only for provably safe bodies.

    Safe bodies write only item-scoped variables and append responses.
    Order-dependent operations (doReturn, response edits, conversation
    steps), impure functions (functions default to impure), and
    runPipeline into unknown or unsafe pipelines disqualify a body.
    """
    purity = dict(function_purity or {})
    planner = _Planner(purity, pipelines or {})
    return Pipeline(p.name, p.version, planner.plan_list(p.steps, set(), set()))


class _Planner:
    def __init__(self, purity: Mapping[str, bool], pipelines: Mapping[str, Pipeline]):
        self.purity = purity
        self.pipelines = pipelines

    def plan_list(self, steps: tuple[Step, ...], enclosing: set[str],
                  local: set[str]) -> tuple[Step, ...]:
        out: list[Step] = []
        defined = set(local)
        for step in steps:
            out.append(self.plan_step(step, enclosing, defined))
            defined.update(_step_defs(step))
        return tuple(out)

    def plan_step(self, step: Step, enclosing: set[str], defined: set[str]) -> Step:
        if isinstance(step, ForEach):
            body_enclosing = enclosing | defined
            safe = is_parallel_safe_body(step.body, self.purity, self.pipelines,
                                         enclosing=body_enclosing,
                                         local={step.item_var})
            body = Pipeline(step.body.name, step.body.version,
                            self.plan_list(step.body.steps, body_enclosing,
                                           {step.item_var}))
            return ForEach(step.list_path, step.item_var, body, safe)
        if isinstance(step, When):
            else_body = None
            if step.else_body is not None:
                else_body = Pipeline(step.else_body.name, step.else_body.version,
                                     self.plan_list(step.else_body.steps, enclosing,
                                                    set(defined)))
            return When(step.cond,
                        Pipeline(step.then_body.name, step.then_body.version,
                                 self.plan_list(step.then_body.steps, enclosing,
                                                set(defined))),
                        else_body)
        if isinstance(step, TryCatchFinally):
            catch_body = None
            if step.catch_body is not None:
                catch_body = Pipeline(step.catch_body.name, step.catch_body.version,
                                      self.plan_list(step.catch_body.steps, enclosing,
                                                     set(defined) | {"error"}))
            finally_body = None
            if step.finally_body is not None:
                finally_body = Pipeline(step.finally_body.name, step.finally_body.version,
                                        self.plan_list(step.finally_body.steps, enclosing,
                                                       set(defined)))
            return TryCatchFinally(
                Pipeline(step.try_body.name, step.try_body.version,
                         self.plan_list(step.try_body.steps, enclosing, set(defined))),
                catch_body, finally_body)
        return step


def _step_defs(step: Step) -> set[str]:
    if isinstance(step, PassVariables):
        return set(step.names)
    if isinstance(step, SetValue):
        return {step.var}
    if isinstance(step, SetValues):
        return {a.var for a in step.assignments}
    if isinstance(step, Marshal):
        return {step.to_var}
    if isinstance(step, MarshalMany):
        return set(step.to_vars)
    if isinstance(step, (UnmarshalList, UnmarshalMap, FindMatchingItem, GetMapValue)):
        return {step.to_var}
    if isinstance(step, SetMapValue):
        return {step.target_var}
    if isinstance(step, ToolRequest):
        return {TOOL_RESULTS_VAR}
    return set()


def is_parallel_safe_body(body: Pipeline, function_purity: Mapping[str, bool],
                          pipelines: Mapping[str, Pipeline],
                          enclosing: set[str] | None = None,
                          local: set[str] | None = None,
                          _visiting: frozenset = frozenset()) -> bool:
    """Check one forEach body for parallel safety.

    With ``enclosing`` None the variable-write rule is skipped and only
    operation-level hazards are checked (the executor's defensive recheck
    uses this form; copy-on-write already isolates variable writes).
    """
    local_defs = set(local or ())

    def safe_steps(steps: tuple[Step, ...], locals_: set[str]) -> bool:
        for step in steps:
            if isinstance(step, DoReturn):
                return False
            if isinstance(step, RESPONSE_EDIT_STEPS) or isinstance(step, CONVERSATION_STEPS):
                return False
            if isinstance(step, FunctionCall):
                if not function_purity.get(step.name, False):
                    return False
                continue
            if isinstance(step, RunPipeline):
                target = pipelines.get(step.ref) if pipelines is not None else None
                if target is None or step.ref in _visiting:
                    return False
                if not is_parallel_safe_body(target, function_purity, pipelines,
                                             enclosing=None,
                                             local=set(step.pass_names),
                                             _visiting=_visiting | {step.ref}):
                    return False
                continue
            defs = _step_defs(step)
            if enclosing is not None:
                for var in defs:
                    if var in enclosing and var not in locals_:
                        return False
            locals_.update(defs)
            if isinstance(step, ForEach):
                inner = set(locals_)
                inner.add(step.item_var)
                if not safe_steps(step.body.steps, inner):
                    return False
            elif isinstance(step, When):
                if not safe_steps(step.then_body.steps, set(locals_)):
                    return False
                if step.else_body is not None and not safe_steps(step.else_body.steps,
                                                                 set(locals_)):
                    return False
            elif isinstance(step, TryCatchFinally):
                if not safe_steps(step.try_body.steps, set(locals_)):
                    return False
                if step.catch_body is not None and not safe_steps(step.catch_body.steps,
                                                                  set(locals_) | {"error"}):
                    return False
                if step.finally_body is not None and not safe_steps(step.finally_body.steps,
                                                                    set(locals_)):
                    return False
        return True

    return safe_steps(body.steps, local_defs)


def optimize(p: Pipeline, function_purity: Mapping[str, bool] | None = None,
             pipelines: Mapping[str, Pipeline] | None = None) -> Pipeline:
    """All passes in order: dead-code elimination, fusion, parallel planning."""
    return plan_parallel(fuse_steps(eliminate_dead_code(p)), function_purity, pipelines)
