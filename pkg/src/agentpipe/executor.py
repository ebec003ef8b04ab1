"""Deterministic tree-walking interpreter for validated pipelines.

Scoping model: ``when`` branches and try/catch/finally blocks run in the
enclosing scope (branch writes persist, matching the small-step rule that
splices the taken branch into the continuation). ``forEach`` bodies and
``runPipeline`` targets are copy-on-write child scopes: they snapshot the
parent's variables (runPipeline sees only the passed names) and their
writes never reach the parent. The only cross-scope channels are the
shared response accumulator, the conversation history, and function
handlers writing outputs into their caller's scope.

Clocks are injectable. The default ``VirtualClock`` starts at zero and
advances only on sleeps, which makes whole runs byte-reproducible; pass a
``RealClock`` to measure wall time (bench does).
"""

from __future__ import annotations

import hashlib
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from . import analysis
from .analysis import ParamSig, SignatureSet, expr_paths, validate
from .canonical import Value, canonical_json, normalize_value
from .errors import (
    BudgetExhaustedError,
    EngineError,
    PipelineRuntimeError,
    TransientError,
)
from .ir import (
    AddMessage,
    AddResponse,
    AddTool,
    ChatRequest,
    ClearResponses,
    DoReturn,
    FindMatchingItem,
    ForEach,
    FunctionCall,
    GetMapValue,
    Marshal,
    MarshalMany,
    PassVariables,
    Pipeline,
    RemoveResponse,
    RunPipeline,
    SetMapValue,
    SetValue,
    SetValues,
    Step,
    ToolRequest,
    TryCatchFinally,
    UnmarshalList,
    UnmarshalMap,
    UpdateResponse,
    When,
    step_op_name,
    step_to_jsonable,
)
from .orchestration import (
    LLMBinding,
    Message,
    ToolLoopHooks,
    ToolSpec,
    WindowConfig,
    build_request,
    prune_history,
    run_tool_loop,
)
from .values import (
    ABSENT,
    eval_condition,
    eval_expr,
    find_matching_item,
    get_map_value,
    marshal,
    parse_path,
    resolve,
    set_map_value,
    unmarshal_list,
    unmarshal_map,
)


# --------------------------------------------------------------------------
# Clocks

class RealClock:
    """Monotonic wall clock; sleeps really sleep."""

    def now_ms(self) -> float:
        return time.monotonic() * 1000.0

    def sleep_ms(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0)

    def fork(self) -> "RealClock":
        return self

    def join(self, children: list) -> None:
        pass


class VirtualClock:
    """Deterministic clock: time advances only when something sleeps.

    Parallel branches fork their own clocks; joining advances the parent
    to the latest branch end, so virtual time models concurrency.
    """

    def __init__(self, start_ms: float = 0.0):
        self._now = start_ms

    def now_ms(self) -> float:
        return self._now

    def sleep_ms(self, ms: float) -> None:
        if ms > 0:
            self._now += ms

    def fork(self) -> "VirtualClock":
        return VirtualClock(self._now)

    def join(self, children: list) -> None:
        for child in children:
            self._now = max(self._now, child.now_ms())


# --------------------------------------------------------------------------
# Configuration

@dataclass(frozen=True)
class RetryConfig:
    max_attempts: int = 3
    base_delay_ms: float = 50.0
    multiplier: float = 2.0
    jitter: bool = False

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise EngineError("BAD_CONFIG", "retry max_attempts must be >= 1")


@dataclass(frozen=True)
class CacheConfig:
    enabled: bool = False
    ttl_ms: float = 60_000.0
    chat_requests: bool = False

    def __post_init__(self) -> None:
        if self.enabled and self.ttl_ms <= 0:
            raise EngineError("BAD_CONFIG", "cache ttl_ms must be > 0 when enabled")


@dataclass(frozen=True)
class ParallelConfig:
    enabled: bool = True
    max_fanout: int = 8


@dataclass(frozen=True)
class ExecConfig:
    strict_interpolation: bool = True
    max_steps: int = 10_000
    retry: RetryConfig = field(default_factory=RetryConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    parallel: ParallelConfig = field(default_factory=ParallelConfig)
    dedupe_responses: bool = False
    window: WindowConfig | None = None
    validate_before_run: bool = True
    max_depth: int = 32


# --------------------------------------------------------------------------
# Run artifacts

@dataclass
class ResponseMeta:
    execution_time_ms: float = 0.0
    token_usage: int = 0
    lineage: tuple[int, ...] = ()

    def to_jsonable(self) -> dict:
        return {
            "executionTimeMs": self.execution_time_ms,
            "tokenUsage": self.token_usage,
            "lineage": list(self.lineage),
        }


@dataclass
class Response:
    id: str | None
    type: str
    content: Value
    meta: ResponseMeta = field(default_factory=ResponseMeta)

    def to_jsonable(self) -> dict:
        return {"id": self.id, "type": self.type, "content": self.content,
                "meta": self.meta.to_jsonable()}


@dataclass
class RunMetrics:
    steps_executed: int = 0
    top_level_steps: int = 0
    tool_calls: int = 0
    llm_calls: int = 0
    retries: int = 0
    cache_hits: int = 0
    wall_time_ms: float = 0.0
    per_step_overhead_ms: float = 0.0

    def to_jsonable(self) -> dict:
        return {
            "stepsExecuted": self.steps_executed,
            "topLevelSteps": self.top_level_steps,
            "toolCalls": self.tool_calls,
            "llmCalls": self.llm_calls,
            "retries": self.retries,
            "cacheHits": self.cache_hits,
            "wallTimeMs": self.wall_time_ms,
            "perStepOverheadMs": self.per_step_overhead_ms,
        }


@dataclass
class ExecutionResult:
    responses: list[Response]
    final_store: dict
    trace: list[dict]
    metrics: RunMetrics
    outcome: str  # completed | returned | failed
    error: dict | None = None
    history: list[Message] = field(default_factory=list)  # conversation transcript

    def to_jsonable(self) -> dict:
        out: dict = {
            "responses": [r.to_jsonable() for r in self.responses],
            "finalStore": self.final_store,
            "trace": self.trace,
            "metrics": self.metrics.to_jsonable(),
            "outcome": self.outcome,
        }
        if self.error is not None:
            out["error"] = self.error
        return out

    def to_json(self) -> str:
        return canonical_json(self.to_jsonable())


# --------------------------------------------------------------------------
# Registries

class FunctionContext:
    """Handle passed to function handlers: caller-scope access + responses."""

    def __init__(self, run: "_Run", scope: dict, path: tuple[int, ...]):
        self._run = run
        self._scope = scope
        self._path = path
        self.writes: dict[str, Value] = {}
        self.responses: list[tuple[str, Value, str | None]] = []

    def get(self, name: str, default: Value = None) -> Value:
        if name in self.writes:
            return self.writes[name]
        value = resolve(self._scope, name)
        return default if value is ABSENT else value

    def set(self, name: str, value: Value) -> None:
        self.writes[name] = normalize_value(value)

    def add_response(self, type: str, content: Value, id: str | None = None) -> None:
        self.responses.append((type, normalize_value(content), id))

    def now_ms(self) -> float:
        return self._run.clock.now_ms()

    def sleep_ms(self, ms: float) -> None:
        self._run.clock.sleep_ms(ms)


@dataclass
class FunctionBinding:
    name: str
    arity: int
    handler: Callable[[list, FunctionContext], None]
    pure: bool = False


class Registries:
    """Functions, tools, LLMs, and pipelines available to one run."""

    def __init__(self, pipelines: Mapping[str, Pipeline] | None = None):
        self.functions: dict[str, FunctionBinding] = {}
        self.tools: dict[str, ToolSpec] = {}
        self.llms: dict[str, LLMBinding] = {}
        self.pipelines: Mapping[str, Pipeline] = pipelines if pipelines is not None else {}

    def register_function(self, binding: FunctionBinding) -> "Registries":
        if binding.name in self.functions:
            raise EngineError("DUPLICATE_NAME", f"function {binding.name!r} already registered")
        self.functions[binding.name] = binding
        return self

    def register_tool(self, spec: ToolSpec) -> "Registries":
        if spec.name in self.tools:
            raise EngineError("DUPLICATE_NAME", f"tool {spec.name!r} already registered")
        self.tools[spec.name] = spec
        return self

    def register_llm(self, binding: LLMBinding) -> "Registries":
        llm_id = binding.config.llm_id
        if llm_id in self.llms:
            raise EngineError("DUPLICATE_NAME", f"LLM {llm_id!r} already registered")
        self.llms[llm_id] = binding
        return self

    def function_purity(self) -> dict[str, bool]:
        return {name: b.pure for name, b in self.functions.items()}

    def signature_set(self) -> SignatureSet:
        return SignatureSet(
            tool_signatures={
                name: tuple(ParamSig(p.name, p.type, p.required) for p in spec.parameters)
                for name, spec in self.tools.items()
            },
            function_arities={name: b.arity for name, b in self.functions.items()},
            llm_ids=frozenset(self.llms),
        )


# --------------------------------------------------------------------------
# Memoization

def memo_key(step: Step, relevant_inputs: Mapping[str, Value]) -> str:
    """Cache key: canonical step JSON + canonical marshal of the read set."""
    step_json = canonical_json(step_to_jsonable(step))
    reads_json = canonical_json(dict(relevant_inputs))
    return hashlib.sha256((step_json + "\x00" + reads_json).encode("utf-8")).hexdigest()


class MemoCache:
    """TTL-expiring effect cache keyed by ``memo_key`` digests."""

    def __init__(self, clock, ttl_ms: float):
        self.clock = clock
        self.ttl_ms = ttl_ms
        self._entries: dict[str, tuple[float, list]] = {}

    def lookup(self, key: str) -> list | None:
        entry = self._entries.get(key)
        if entry is None:
            return None
        expires, effects = entry
        if self.clock.now_ms() >= expires:
            del self._entries[key]
            return None
        return effects

    def store(self, key: str, effects: list) -> None:
        self._entries[key] = (self.clock.now_ms() + self.ttl_ms, effects)

    def fork(self, clock) -> "MemoCache":
        child = MemoCache(clock, self.ttl_ms)
        child._entries = dict(self._entries)
        return child

    def absorb(self, other: "MemoCache") -> None:
        for key, entry in other._entries.items():
            self._entries.setdefault(key, entry)


_CACHEABLE_DATA_OPS = (SetValue, SetValues, Marshal, MarshalMany, UnmarshalList,
                       UnmarshalMap, FindMatchingItem, GetMapValue, SetMapValue)


def _step_read_paths(step: Step) -> list[str]:
    if isinstance(step, SetValue):
        return expr_paths(step.value)
    if isinstance(step, SetValues):
        out: list[str] = []
        for a in step.assignments:
            out.extend(expr_paths(a.value))
        return out
    if isinstance(step, (Marshal, MarshalMany)):
        return [step.from_path]
    if isinstance(step, (UnmarshalList, UnmarshalMap)):
        return [step.from_var]
    if isinstance(step, FindMatchingItem):
        return [step.collection_path]
    if isinstance(step, GetMapValue):
        return [step.source_var]
    if isinstance(step, SetMapValue):
        return [step.target_var] + expr_paths(step.value)
    if isinstance(step, FunctionCall):
        out = []
        for a in step.args:
            out.extend(expr_paths(a))
        return out
    return []


def _read_set_values(step: Step, scope: dict) -> dict[str, Value]:
    reads: dict[str, Value] = {}
    for path_text in _step_read_paths(step):
        value = resolve(scope, path_text)
        reads[path_text] = {"__absent__": True} if value is ABSENT else value
    return reads


# --------------------------------------------------------------------------
# Response sink

class _Sink:
    def __init__(self, defer_ids: bool = False):
        self.responses: list[Response] = []
        self.counter = 0
        self.seen: set[str] = set()
        self.defer_ids = defer_ids

    def add(self, resp: Response) -> None:
        if self.defer_ids:
            self.responses.append(resp)
            return
        if resp.id is None:
            self.counter += 1
            while f"r{self.counter}" in self.seen:
                self.counter += 1
            resp.id = f"r{self.counter}"
        elif resp.id in self.seen:
            raise PipelineRuntimeError("DUPLICATE_RESPONSE_ID",
                                       f"response id {resp.id!r} already exists")
        self.seen.add(resp.id)
        self.responses.append(resp)

    def remove(self, rid: str) -> bool:
        for i, r in enumerate(self.responses):
            if r.id == rid:
                del self.responses[i]
                return True
        return False

    def find(self, rid: str) -> Response | None:
        for r in self.responses:
            if r.id == rid:
                return r
        return None


class _Signal:
    NONE = 0
    RETURNED = 1


# --------------------------------------------------------------------------
# Run state

class _Run:
    def __init__(self, cfg: ExecConfig, registries: Registries, clock, seed: int,
                 defer_response_ids: bool = False, cache: MemoCache | None = None):
        self.cfg = cfg
        self.registries = registries
        self.clock = clock
        self.rng = random.Random(seed)
        self.metrics = RunMetrics()
        self.trace: list[dict] = []
        self.history: list[Message] = []
        self.cache = cache if cache is not None else MemoCache(clock, cfg.cache.ttl_ms)
        self.sinks: list[_Sink] = [_Sink(defer_ids=defer_response_ids)]
        self._safety_memo: dict[int, bool] = {}
        self.budget_base = 0  # steps consumed by the parent before a fork

    # -- plumbing ---------------------------------------------------------

    @property
    def sink(self) -> _Sink:
        return self.sinks[-1]

    def event(self, path: tuple[int, ...], op: str, event: str) -> None:
        self.trace.append({"t": self.clock.now_ms(), "step": list(path),
                           "op": op, "event": event})

    def check_budget(self, path: tuple[int, ...]) -> None:
        if self.budget_base + self.metrics.steps_executed + 1 > self.cfg.max_steps:
            raise BudgetExhaustedError(
                f"step budget of {self.cfg.max_steps} exhausted", list(path))

    def retrying(self, fn: Callable[[], Any], path: tuple[int, ...]) -> Any:
        attempt = 1
        while True:
            try:
                return fn()
            except TransientError as e:
                if attempt >= self.cfg.retry.max_attempts:
                    raise e.with_path(list(path))
                delay = self.cfg.retry.base_delay_ms * (self.cfg.retry.multiplier ** (attempt - 1))
                if self.cfg.retry.jitter:
                    delay *= 0.5 + self.rng.random()
                self.metrics.retries += 1
                self.event(path, "retry", "retry")
                self.clock.sleep_ms(delay)
                attempt += 1

    def llm_binding(self, llm_id: str, path: tuple[int, ...]) -> LLMBinding:
        binding = self.registries.llms.get(llm_id)
        if binding is None:
            raise PipelineRuntimeError("LLM_NOT_FOUND", f"LLM {llm_id!r} is not registered",
                                       list(path))
        return binding

    def call_llm(self, binding: LLMBinding, request: dict, path: tuple[int, ...]) -> str:
        def attempt() -> str:
            self.metrics.llm_calls += 1
            return binding.client.complete(request)
        return self.retrying(attempt, path)

    def maybe_prune_history(self) -> None:
        if self.cfg.window is not None:
            self.history[:] = prune_history(self.history, self.cfg.window)

    # -- cache ------------------------------------------------------------

    def cache_lookup(self, key: str) -> list | None:
        return self.cache.lookup(key)

    def cache_store(self, key: str, effects: list) -> None:
        self.cache.store(key, effects)

    # -- parallel forks ---------------------------------------------------

    def fork_branch(self) -> "_Run":
        branch = _Run.__new__(_Run)
        branch.cfg = self.cfg
        branch.registries = self.registries
        branch.clock = self.clock.fork()
        branch.rng = random.Random(self.rng.random())
        branch.metrics = RunMetrics()
        branch.trace = []
        branch.history = self.history
        branch.cache = self.cache.fork(branch.clock)
        branch.sinks = [_Sink(defer_ids=True)]
        branch._safety_memo = self._safety_memo
        branch.budget_base = self.budget_base + self.metrics.steps_executed
        return branch

    def absorb_branch(self, branch: "_Run") -> None:
        self.metrics.steps_executed += branch.metrics.steps_executed
        self.metrics.tool_calls += branch.metrics.tool_calls
        self.metrics.llm_calls += branch.metrics.llm_calls
        self.metrics.retries += branch.metrics.retries
        self.metrics.cache_hits += branch.metrics.cache_hits
        self.trace.extend(branch.trace)
        for resp in branch.sinks[0].responses:
            self.sink.add(resp)
        self.cache.absorb(branch.cache)

    def parallel_safe(self, step: ForEach) -> bool:
        memo = self._safety_memo.get(id(step))
        if memo is None:
            memo = analysis.is_parallel_safe_body(
                step.body, self.registries.function_purity(),
                self.registries.pipelines, enclosing=None, local={step.item_var})
            self._safety_memo[id(step)] = memo
        return memo


# --------------------------------------------------------------------------
# Interpreter

def execute(pipeline: Pipeline, inputs: Mapping[str, Value], registries: Registries,
            cfg: ExecConfig | None = None, clock=None, seed: int = 0,
            cache: MemoCache | None = None) -> ExecutionResult:
    """Run a pipeline to completion against the supplied registries.

    Refuses pipelines with validation errors unless
    ``cfg.validate_before_run`` is off. The result carries the ordered
    responses, the final root store, the trace, metrics, and the outcome.
    Pass a shared ``cache`` to reuse memoized LLM/tool/data results across
    runs within a process (entries expire per the cache TTL).
    """
    cfg = cfg or ExecConfig()
    clock = clock if clock is not None else VirtualClock()
    if cfg.validate_before_run:
        report = validate(pipeline, registries.signature_set(), registries.pipelines,
                          max_depth=cfg.max_depth)
        if not report.ok:
            findings = "; ".join(f"{f.code} at {list(f.step_path)}: {f.message}"
                                 for f in report.errors)
            return ExecutionResult(
                responses=[], final_store=dict(inputs), trace=[], metrics=RunMetrics(),
                outcome="failed",
                error={"code": "VALIDATION_FAILED", "message": findings, "stepPath": []})
    run = _Run(cfg, registries, clock, seed, cache=cache)
    scope: dict = dict(normalize_value(dict(inputs)))
    started = clock.now_ms()
    outcome = "completed"
    error = None
    try:
        signal = _run_body(run, pipeline, scope, [], ())
        if signal == _Signal.RETURNED:
            outcome = "returned"
    except PipelineRuntimeError as e:
        outcome = "failed"
        error = {"code": e.code, "message": e.message, "stepPath": e.step_path}
    run.metrics.wall_time_ms = clock.now_ms() - started
    run.metrics.per_step_overhead_ms = (
        run.metrics.wall_time_ms / max(1, run.metrics.steps_executed))
    responses = run.sinks[0].responses
    if cfg.dedupe_responses:
        responses = _dedupe(responses)
    return ExecutionResult(responses=responses, final_store=scope, trace=run.trace,
                           metrics=run.metrics, outcome=outcome, error=error,
                           history=run.history)


def _dedupe(responses: list[Response]) -> list[Response]:
    seen: set[tuple[str, str]] = set()
    kept = []
    for r in responses:
        key = (r.type, canonical_json(r.content))
        if key in seen:
            continue
        seen.add(key)
        kept.append(r)
    return kept


def _run_body(run: _Run, pipeline: Pipeline, scope: dict, tools: list[str],
              prefix: tuple[int, ...]) -> int:
    for idx, step in enumerate(pipeline.steps):
        signal = _exec_step(run, step, scope, tools, prefix + (idx,))
        if signal == _Signal.RETURNED:
            return _Signal.RETURNED
    return _Signal.NONE


def _exec_step(run: _Run, step: Step, scope: dict, tools: list[str],
               path: tuple[int, ...]) -> int:
    run.check_budget(path)
    run.metrics.steps_executed += 1
    if len(path) == 1:
        run.metrics.top_level_steps += 1
    op = step_op_name(step)
    run.event(path, op, "enter")
    try:
        signal = _dispatch(run, step, scope, tools, path)
    except PipelineRuntimeError as e:
        e.with_path(list(path))
        run.event(path, op, "error")
        raise
    except EngineError as e:
        run.event(path, op, "error")
        raise PipelineRuntimeError(e.code, e.message, list(path)) from e
    run.event(path, op, "exit")
    return signal


def _dispatch(run: _Run, step: Step, scope: dict, tools: list[str],
              path: tuple[int, ...]) -> int:
    strict = run.cfg.strict_interpolation

    if isinstance(step, PassVariables):
        missing = [n for n in step.names if n not in scope]
        if missing:
            raise PipelineRuntimeError(
                "UNDEFINED_VAR", f"passVariables: {missing} not present in scope", list(path))
        return _Signal.NONE

    if isinstance(step, _CACHEABLE_DATA_OPS):
        return _exec_data_op(run, step, scope, path)

    if isinstance(step, ForEach):
        return _exec_for_each(run, step, scope, tools, path)

    if isinstance(step, When):
        if eval_condition(step.cond, scope):
            return _run_body(run, step.then_body, scope, tools, path + (0,))
        if step.else_body is not None:
            return _run_body(run, step.else_body, scope, tools, path + (1,))
        return _Signal.NONE

    if isinstance(step, DoReturn):
        return _Signal.RETURNED

    if isinstance(step, FunctionCall):
        return _exec_function(run, step, scope, path)

    if isinstance(step, AddMessage):
        content = eval_expr(step.content, scope, strict)
        run.history.append(Message(role=step.role, content=content))
        return _Signal.NONE

    if isinstance(step, AddTool):
        for tool_id in step.tool_ids:
            if tool_id not in run.registries.tools:
                raise PipelineRuntimeError("TOOL_NOT_FOUND",
                                           f"tool {tool_id!r} is not registered", list(path))
            if tool_id not in tools:
                tools.append(tool_id)
        return _Signal.NONE

    if isinstance(step, ChatRequest):
        return _exec_chat_request(run, step, scope, path)

    if isinstance(step, ToolRequest):
        return _exec_tool_request(run, step, scope, tools, path)

    if isinstance(step, AddResponse):
        content = eval_expr(step.content, scope, strict)
        run.sink.add(Response(id=step.id, type=step.type, content=content,
                              meta=ResponseMeta(lineage=path)))
        return _Signal.NONE

    if isinstance(step, RemoveResponse):
        if not run.sink.remove(step.id):
            raise PipelineRuntimeError("RESPONSE_NOT_FOUND",
                                       f"response id {step.id!r} not found", list(path))
        return _Signal.NONE

    if isinstance(step, ClearResponses):
        run.sink.responses.clear()
        return _Signal.NONE

    if isinstance(step, UpdateResponse):
        target = run.sink.find(step.id)
        if target is None:
            raise PipelineRuntimeError("RESPONSE_NOT_FOUND",
                                       f"response id {step.id!r} not found", list(path))
        target.content = eval_expr(step.content, scope, strict)
        target.meta.lineage = path
        return _Signal.NONE

    if isinstance(step, RunPipeline):
        target = run.registries.pipelines.get(step.ref)
        if target is None:
            raise PipelineRuntimeError("PIPELINE_NOT_FOUND",
                                       f"pipeline {step.ref!r} is not registered", list(path))
        child: dict = {}
        for name in step.pass_names:
            if name not in scope:
                raise PipelineRuntimeError(
                    "UNDEFINED_VAR", f"runPipeline: {name!r} not present in caller scope",
                    list(path))
            child[name] = scope[name]
        _run_body(run, target, child, list(tools), path + (0,))
        return _Signal.NONE  # doReturn in the child ends only that invocation

    if isinstance(step, TryCatchFinally):
        return _exec_try(run, step, scope, tools, path)

    raise PipelineRuntimeError("BAD_IR", f"unknown step type {type(step).__name__}", list(path))


# -- data ops (cacheable) ---------------------------------------------------

def _exec_data_op(run: _Run, step: Step, scope: dict, path: tuple[int, ...]) -> int:
    cacheable = run.cfg.cache.enabled
    key = None
    if cacheable:
        key = memo_key(step, _read_set_values(step, scope))
        effects = run.cache_lookup(key)
        if effects is not None:
            run.metrics.cache_hits += 1
            run.event(path, step_op_name(step), "cacheHit")
            for var, value in effects:
                scope[var] = value
            return _Signal.NONE
    writes = _data_op_writes(run, step, scope, path)
    scope.update(writes)
    if cacheable and key is not None:
        run.cache_store(key, list(writes.items()))
    return _Signal.NONE


def _data_op_writes(run: _Run, step: Step, scope: dict, path: tuple[int, ...]) -> dict:
    strict = run.cfg.strict_interpolation
    if isinstance(step, SetValue):
        return {step.var: eval_expr(step.value, scope, strict)}
    if isinstance(step, SetValues):
        # apply live, left to right: a mid-batch failure must leave earlier
        # assignments in the store exactly like the unfused sequence would
        writes: dict[str, Value] = {}
        for a in step.assignments:
            value = eval_expr(a.value, scope, strict)
            scope[a.var] = value
            writes[a.var] = value
        return writes
    if isinstance(step, (Marshal, MarshalMany)):
        value = resolve(scope, step.from_path)
        if value is ABSENT:
            raise PipelineRuntimeError("UNDEFINED_VAR",
                                       f"marshal source {step.from_path!r} is not defined",
                                       list(path))
        text = marshal(value)
        if isinstance(step, Marshal):
            return {step.to_var: text}
        return {var: text for var in step.to_vars}
    if isinstance(step, (UnmarshalList, UnmarshalMap)):
        raw = scope.get(step.from_var, ABSENT)
        if raw is ABSENT:
            raise PipelineRuntimeError("UNDEFINED_VAR",
                                       f"unmarshal source {step.from_var!r} is not defined",
                                       list(path))
        parsed = unmarshal_list(raw) if isinstance(step, UnmarshalList) else unmarshal_map(raw)
        return {step.to_var: parsed}
    if isinstance(step, FindMatchingItem):
        collection = resolve(scope, step.collection_path)
        if collection is ABSENT:
            raise PipelineRuntimeError("UNDEFINED_VAR",
                                       f"collection {step.collection_path!r} is not defined",
                                       list(path))
        return {step.to_var: find_matching_item(collection, step.query)}
    if isinstance(step, GetMapValue):
        source = scope.get(step.source_var, ABSENT)
        if source is ABSENT:
            raise PipelineRuntimeError("UNDEFINED_VAR",
                                       f"getMapValue source {step.source_var!r} is not defined",
                                       list(path))
        value = get_map_value(source, parse_path(step.path))
        if value is ABSENT:
            if run.cfg.strict_interpolation:
                raise PipelineRuntimeError(
                    "PATH_NOT_FOUND",
                    f"path {step.path!r} not present under {step.source_var!r}", list(path))
            value = None
        return {step.to_var: value}
    if isinstance(step, SetMapValue):
        target = scope.get(step.target_var, ABSENT)
        if target is ABSENT:
            raise PipelineRuntimeError("UNDEFINED_VAR",
                                       f"setMapValue target {step.target_var!r} is not defined",
                                       list(path))
        value = eval_expr(step.value, scope, run.cfg.strict_interpolation)
        return {step.target_var: set_map_value(target, parse_path(step.path), value)}
    raise PipelineRuntimeError("BAD_IR", f"not a data op: {type(step).__name__}", list(path))


# -- functions ---------------------------------------------------------------

def _exec_function(run: _Run, step: FunctionCall, scope: dict, path: tuple[int, ...]) -> int:
    binding = run.registries.functions.get(step.name)
    if binding is None:
        raise PipelineRuntimeError("FUNCTION_NOT_FOUND",
                                   f"function {step.name!r} is not registered", list(path))
    if binding.arity != len(step.args):
        raise PipelineRuntimeError(
            "ARITY_MISMATCH",
            f"function {step.name!r} takes {binding.arity} args, got {len(step.args)}",
            list(path))
    args = [eval_expr(a, scope, run.cfg.strict_interpolation) for a in step.args]

    cacheable = run.cfg.cache.enabled and binding.pure
    key = None
    if cacheable:
        key = memo_key(step, _read_set_values(step, scope))
        effects = run.cache_lookup(key)
        if effects is not None:
            run.metrics.cache_hits += 1
            run.event(path, "function", "cacheHit")
            _apply_function_effects(run, scope, path, effects)
            return _Signal.NONE

    def attempt() -> FunctionContext:
        ctx = FunctionContext(run, scope, path)
        try:
            binding.handler(args, ctx)
        except (TransientError, PipelineRuntimeError):
            raise
        except EngineError as e:
            raise PipelineRuntimeError(e.code, e.message, list(path)) from e
        except Exception as e:  # noqa: BLE001 - host function boundary
            raise PipelineRuntimeError("FUNCTION_FAILED",
                                       f"function {step.name!r} failed: {e}", list(path)) from e
        return ctx

    ctx = run.retrying(attempt, path)
    effects = [("set", var, value) for var, value in ctx.writes.items()]
    effects += [("resp", rtype, content, rid) for rtype, content, rid in ctx.responses]
    _apply_function_effects(run, scope, path, effects)
    if cacheable and key is not None:
        run.cache_store(key, effects)
    return _Signal.NONE


def _apply_function_effects(run: _Run, scope: dict, path: tuple[int, ...],
                            effects: list) -> None:
    for effect in effects:
        if effect[0] == "set":
            scope[effect[1]] = effect[2]
        else:
            _, rtype, content, rid = effect
            run.sink.add(Response(id=rid, type=rtype, content=content,
                                  meta=ResponseMeta(lineage=path)))


# -- forEach ------------------------------------------------------------------

def _exec_for_each(run: _Run, step: ForEach, scope: dict, tools: list[str],
                   path: tuple[int, ...]) -> int:
    items = resolve(scope, step.list_path)
    if items is ABSENT:
        raise PipelineRuntimeError("UNDEFINED_VAR",
                                   f"forEach list {step.list_path!r} is not defined", list(path))
    if not isinstance(items, list):
        raise PipelineRuntimeError(
            "TYPE_ERROR",
            f"forEach iterates lists only; {step.list_path!r} is {type(items).__name__}",
            list(path))
    snapshot = list(items)
    if not snapshot:
        return _Signal.NONE
    use_parallel = (step.parallel and run.cfg.parallel.enabled and len(snapshot) > 1
                    and run.parallel_safe(step))
    if use_parallel:
        _for_each_parallel(run, step, snapshot, scope, tools, path)
        return _Signal.NONE
    for item in snapshot:
        child = dict(scope)
        child[step.item_var] = item
        signal = _run_body(run, step.body, child, list(tools), path + (0,))
        if signal == _Signal.RETURNED:
            break  # doReturn stops the remaining iterations
    return _Signal.NONE


def _for_each_parallel(run: _Run, step: ForEach, items: list, scope: dict,
                       tools: list[str], path: tuple[int, ...]) -> None:
    branches = [run.fork_branch() for _ in items]
    errors: dict[int, PipelineRuntimeError] = {}

    def work(i: int) -> None:
        child = dict(scope)
        child[step.item_var] = items[i]
        try:
            _run_body(branches[i], step.body, child, list(tools), path + (0,))
        except PipelineRuntimeError as e:
            errors[i] = e

    fanout = max(1, min(run.cfg.parallel.max_fanout, len(items)))
    with ThreadPoolExecutor(max_workers=fanout) as pool:
        list(pool.map(work, range(len(items))))

    joined = []
    for i, branch in enumerate(branches):
        run.absorb_branch(branch)
        joined.append(branch.clock)
        if i in errors:
            run.clock.join(joined)
            raise errors[i]
    run.clock.join(joined)
    if run.budget_base + run.metrics.steps_executed > run.cfg.max_steps:
        raise BudgetExhaustedError(
            f"step budget of {run.cfg.max_steps} exhausted", list(path))


# -- LLM steps ----------------------------------------------------------------

def _exec_chat_request(run: _Run, step: ChatRequest, scope: dict,
                       path: tuple[int, ...]) -> int:
    binding = run.llm_binding(step.llm_id, path)
    run.maybe_prune_history()
    cacheable = run.cfg.cache.enabled and run.cfg.cache.chat_requests
    key = None
    request = build_request(binding, run.history, tool_schemas=None)
    if cacheable:
        key = memo_key(step, {"history": [m.to_jsonable() for m in run.history]})
        effects = run.cache_lookup(key)
        if effects is not None:
            run.metrics.cache_hits += 1
            run.event(path, "chatRequest", "cacheHit")
            run.history.append(effects[0])
            return _Signal.NONE
    raw = run.call_llm(binding, request, path)
    message = Message(role="assistant", content=raw)
    run.history.append(message)
    if cacheable and key is not None:
        run.cache_store(key, [message])
    return _Signal.NONE


def _exec_tool_request(run: _Run, step: ToolRequest, scope: dict, tools: list[str],
                       path: tuple[int, ...]) -> int:
    binding = run.llm_binding(step.llm_id, path)
    run.maybe_prune_history()
    active_tools = [run.registries.tools[t] for t in tools if t in run.registries.tools]

    hooks = ToolLoopHooks(
        invoke=lambda request: run.call_llm(binding, request, path),
        execute_tool=lambda tool, args: _execute_tool(run, tool, args, tools, path),
        on_malformed_retry=lambda: _note_malformed_retry(run, path),
        malformed_budget=max(0, run.cfg.retry.max_attempts - 1),
    )
    results = run_tool_loop(binding, run.history, active_tools, hooks)
    scope[analysis.TOOL_RESULTS_VAR] = results
    return _Signal.NONE


def _note_malformed_retry(run: _Run, path: tuple[int, ...]) -> None:
    run.metrics.retries += 1
    run.event(path, "toolRequest", "retry")


def _execute_tool(run: _Run, tool: ToolSpec, args: dict, tools: list[str],
                  path: tuple[int, ...]) -> Value:
    """Run a tool's pipeline in a fresh scope seeded with validated args.

    The tool's responses are collected separately and marshaled into the
    returned value (a list of {type, content}); the invocation itself
    counts as one step so stepsExecuted always covers toolCalls.
    """
    run.check_budget(path)
    run.metrics.steps_executed += 1
    run.metrics.tool_calls += 1

    def attempt() -> list[Response]:
        sink = _Sink()
        run.sinks.append(sink)
        try:
            _run_body(run, tool.pipeline, dict(args), list(tools), path + (0,))
        finally:
            run.sinks.pop()
        return sink.responses

    collected = run.retrying(attempt, path)
    return [{"type": r.type, "content": r.content} for r in collected]


# -- error boundaries ---------------------------------------------------------

def _exec_try(run: _Run, step: TryCatchFinally, scope: dict, tools: list[str],
              path: tuple[int, ...]) -> int:
    signal = _Signal.NONE
    pending: PipelineRuntimeError | None = None
    try:
        signal = _run_body(run, step.try_body, scope, tools, path + (0,))
    except BudgetExhaustedError:
        raise  # budget exhaustion is not catchable
    except PipelineRuntimeError as e:
        if step.catch_body is not None:
            had_error = "error" in scope
            prior = scope.get("error")
            scope["error"] = {"message": e.message, "code": e.code}
            try:
                signal = _run_body(run, step.catch_body, scope, tools, path + (1,))
            except BudgetExhaustedError:
                raise
            except PipelineRuntimeError as catch_error:
                pending = catch_error
            finally:
                if had_error:
                    scope["error"] = prior
                else:
                    scope.pop("error", None)
        else:
            pending = e
    if step.finally_body is not None:
        fin_signal = _run_body(run, step.finally_body, scope, tools, path + (2,))
        if fin_signal == _Signal.RETURNED:
            return _Signal.RETURNED  # a return in finally wins over pending errors
    if pending is not None:
        raise pending
    return signal
