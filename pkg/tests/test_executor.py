"""Interpreter semantics: scoping, control flow, retries, cache, budget,
response ops, error boundaries, and parallel execution."""

from __future__ import annotations

import pytest

from agentpipe.errors import EngineError, TransientError
from agentpipe.executor import (
    CacheConfig,
    ExecConfig,
    FunctionBinding,
    ParallelConfig,
    Registries,
    RetryConfig,
    VirtualClock,
    execute,
    memo_key,
)
from agentpipe.ir import (
    AddResponse,
    ClearResponses,
    DoReturn,
    ForEach,
    FunctionCall,
    GetMapValue,
    Literal,
    Marshal,
    PassVariables,
    Pipeline,
    RemoveResponse,
    RunPipeline,
    SetValue,
    Template,
    TryCatchFinally,
    UpdateResponse,
    VarEquals,
    VarRef,
    When,
)

from pipeline_gen import (
    CORPUS_PURITY,
    corpus_exec_config,
    generate_inputs,
    generate_pipeline,
    make_corpus_registries,
)


def _pipe(*steps) -> Pipeline:
    return Pipeline(name="t", version="1", steps=tuple(steps))


def _run(p, inputs=None, registries=None, cfg=None, **kw):
    return execute(p, inputs or {}, registries or Registries(), cfg or ExecConfig(), **kw)


# --------------------------------------------------------------------------
# Core semantics

def test_empty_pipeline_passes_inputs_through():
    result = _run(Pipeline("p", "1", ()), {"a": 1})
    assert result.outcome == "completed"
    assert result.responses == []
    assert result.final_store == {"a": 1}


def test_set_value_then_add_response():
    p = _pipe(SetValue("x", Literal(2)), AddResponse("T", Template("${x}")))
    result = _run(p)
    assert result.final_store["x"] == 2
    assert [r.content for r in result.responses] == [2]
    assert result.outcome == "completed"


def test_do_return_at_root_sets_returned():
    p = _pipe(SetValue("x", Literal(1)), DoReturn())
    assert _run(p).outcome == "returned"


def test_for_each_find_first_idiom():
    # copy-on-write hides `found`; the response appended in the branch is the
    # observable channel, and doReturn stops the remaining iterations
    body = _pipe(When(VarEquals("item", 2),
                      _pipe(SetValue("found", VarRef("item")),
                            AddResponse("Found", VarRef("item")),
                            DoReturn())))
    p = _pipe(PassVariables(("xs",)), ForEach("xs", "item", body),
              AddResponse("After", Literal("done")))
    result = _run(p, {"xs": [1, 2, 3]})
    assert result.outcome == "completed"
    assert [r.type for r in result.responses] == ["Found", "After"]
    assert result.responses[0].content == 2
    assert "found" not in result.final_store
    # iteration 3 never ran: only two body entries for the when step
    when_enters = [e for e in result.trace
                   if e["event"] == "enter" and e["step"] == [1, 0, 0]]
    assert len(when_enters) == 2


def test_when_branches_share_enclosing_scope():
    p = _pipe(PassVariables(("flag",)),
              When(VarEquals("flag", 1),
                   _pipe(SetValue("x", Literal("then"))),
                   _pipe(SetValue("x", Literal("else")))),
              AddResponse("T", VarRef("x")))
    assert _run(p, {"flag": 1}).responses[0].content == "then"
    assert _run(p, {"flag": 0}).responses[0].content == "else"


def test_for_each_snapshot_of_list():
    # body writes to a local copy; the iterated list is snapshotted up front
    body = _pipe(SetValue("xs", Literal([])), AddResponse("Tick", VarRef("item")))
    p = _pipe(PassVariables(("xs",)), ForEach("xs", "item", body))
    result = _run(p, {"xs": [1, 2]})
    assert [r.content for r in result.responses] == [1, 2]
    assert result.final_store["xs"] == [1, 2]


def test_for_each_rejects_maps_and_absent():
    p = _pipe(PassVariables(("m",)), ForEach("m", "x", _pipe(DoReturn())))
    result = _run(p, {"m": {"a": 1}})
    assert result.outcome == "failed"
    assert result.error["code"] == "TYPE_ERROR"

    p2 = _pipe(ForEach("ghost", "x", _pipe(DoReturn())))
    result2 = execute(p2, {}, Registries(),
                      ExecConfig(validate_before_run=False))
    assert result2.error["code"] == "UNDEFINED_VAR"


def test_pass_variables_checks_presence():
    p = _pipe(PassVariables(("a", "b")))
    result = _run(p, {"a": 1})
    assert result.outcome == "failed"
    assert result.error["code"] == "UNDEFINED_VAR"
    assert "b" in result.error["message"]


# --------------------------------------------------------------------------
# Scope isolation via runPipeline

def _sub_registries():
    sub = Pipeline("sub", "1", (
        PassVariables(("p0",)),
        SetValue("child_only", Literal("hidden")),
        SetValue("p0", Literal("shadowed")),
        AddResponse("Sub", VarRef("p0")),
    ))
    return Registries(pipelines={"sub": sub})


def test_run_pipeline_child_scope_is_isolated():
    p = _pipe(SetValue("p0", Literal("original")),
              SetValue("other", Literal(42)),
              RunPipeline("sub", ("p0",)),
              AddResponse("Parent", VarRef("p0")))
    result = _run(p, registries=_sub_registries())
    assert result.outcome == "completed"
    # child wrote p0 and child_only; parent sees neither change
    assert result.final_store["p0"] == "original"
    assert "child_only" not in result.final_store
    # child responses append to the shared accumulator
    assert [(r.type, r.content) for r in result.responses] == [
        ("Sub", "shadowed"), ("Parent", "original")]


def test_run_pipeline_seeds_only_pass_names():
    sub = Pipeline("sub", "1", (AddResponse("Sub", Template("${other}")),))
    p = _pipe(SetValue("other", Literal(1)), RunPipeline("sub", ()))
    result = execute(p, {}, Registries(pipelines={"sub": sub}),
                     ExecConfig(validate_before_run=False))
    assert result.outcome == "failed"
    assert result.error["code"] == "UNDEFINED_VAR"


def test_run_pipeline_missing_pass_name():
    p = _pipe(RunPipeline("sub", ("ghost",)))
    result = execute(p, {}, _sub_registries().pipelines and _sub_registries(),
                     ExecConfig(validate_before_run=False))
    assert result.error["code"] == "UNDEFINED_VAR"


def test_do_return_in_child_does_not_end_parent():
    sub = Pipeline("sub", "1", (DoReturn(),))
    p = _pipe(RunPipeline("sub", ()), AddResponse("After", Literal(1)))
    result = _run(p, registries=Registries(pipelines={"sub": sub}))
    assert result.outcome == "completed"
    assert len(result.responses) == 1


# --------------------------------------------------------------------------
# Functions

def _tax_registries():
    registries = Registries()

    def calculate_tax(args, ctx):
        price, region = args
        rate = {"CA": 0.0725}.get(region, 0.05)
        ctx.set("tax", price * rate)
        ctx.add_response("TaxCalculation", {"amount": price * rate})

    registries.register_function(FunctionBinding("calculateTax", 2, calculate_tax, pure=True))
    return registries


def test_register_function_and_listing_style_call():
    registries = _tax_registries()
    p = _pipe(
        SetValue("price", Literal(99.99)),
        SetValue("region", Literal("CA")),
        FunctionCall("calculateTax", (VarRef("price"), VarRef("region"))),
        AddResponse("Total", Template("Total with tax: ${price + tax}")),
    )
    result = _run(p, registries=registries)
    assert result.outcome == "completed"
    expected_tax = 99.99 * 0.0725  # independent handler-arithmetic oracle
    assert result.final_store["tax"] == expected_tax
    tax_responses = [r for r in result.responses if r.type == "TaxCalculation"]
    assert len(tax_responses) == 1
    assert tax_responses[0].content == {"amount": expected_tax}
    assert result.responses[-1].content == f"Total with tax: {repr(99.99 + expected_tax)}"


def test_duplicate_function_registration_rejected():
    registries = _tax_registries()
    with pytest.raises(EngineError) as exc:
        registries.register_function(FunctionBinding("calculateTax", 2, lambda a, c: None))
    assert exc.value.code == "DUPLICATE_NAME"


def test_unregistered_function_error_carries_step_path():
    p = _pipe(FunctionCall("nope", ()))
    result = execute(p, {}, Registries(), ExecConfig(validate_before_run=False))
    assert result.error["code"] == "FUNCTION_NOT_FOUND"
    assert result.error["stepPath"] == [0]


def test_function_arity_checked_at_runtime():
    p = _pipe(FunctionCall("calculateTax", (Literal(1),)))
    result = execute(p, {}, _tax_registries(), ExecConfig(validate_before_run=False))
    assert result.error["code"] == "ARITY_MISMATCH"


# --------------------------------------------------------------------------
# Retries

def _flaky_registries(failures: int, code: str = "TRANSIENT"):
    registries = Registries()
    state = {"left": failures}

    def flaky(args, ctx):
        if state["left"] > 0:
            state["left"] -= 1
            raise TransientError("simulated fault")
        ctx.set("ok", True)

    registries.register_function(FunctionBinding("flaky", 0, flaky))
    return registries


def test_transient_failures_retry_with_backoff_then_succeed():
    clock = VirtualClock()
    p = _pipe(FunctionCall("flaky", ()))
    result = execute(p, {}, _flaky_registries(2), ExecConfig(), clock=clock)
    assert result.outcome == "completed"
    assert result.final_store["ok"] is True
    assert result.metrics.retries == 2
    # exponential backoff: 50ms then 100ms on the injected clock
    assert clock.now_ms() == 150.0
    retry_events = [e for e in result.trace if e["event"] == "retry"]
    assert [e["t"] for e in retry_events] == [0, 50]  # logged before each backoff sleep


def test_retry_exhaustion_surfaces_transient_error():
    p = _pipe(FunctionCall("flaky", ()))
    result = execute(p, {}, _flaky_registries(5),
                     ExecConfig(retry=RetryConfig(max_attempts=3)))
    assert result.outcome == "failed"
    assert result.metrics.retries == 2
    assert result.error["code"] == "TRANSIENT"


def test_non_transient_errors_do_not_retry():
    registries = Registries()

    def boom(args, ctx):
        raise ValueError("no")

    registries.register_function(FunctionBinding("boom", 0, boom))
    result = execute(_pipe(FunctionCall("boom", ())), {}, registries,
                     ExecConfig(validate_before_run=False))
    assert result.error["code"] == "FUNCTION_FAILED"
    assert result.metrics.retries == 0


# --------------------------------------------------------------------------
# tryCatchFinally

def _failing_step():
    return SetValue("dead", Template("${nums / 0}"))


def test_catch_binds_error_and_recovers():
    p = _pipe(
        SetValue("nums", Literal(1)),
        TryCatchFinally(
            try_body=_pipe(_failing_step(), AddResponse("NotReached", Literal(1))),
            catch_body=_pipe(AddResponse("Caught", Template("${error.code}"))),
        ),
        AddResponse("After", Literal("ok")),
    )
    result = _run(p)
    assert result.outcome == "completed"
    assert [r.type for r in result.responses] == ["Caught", "After"]
    assert result.responses[0].content == "DIVISION_BY_ZERO"
    assert "error" not in result.final_store  # binding is scoped to the catch


def test_finally_runs_on_success_catch_and_uncaught():
    fin = _pipe(AddResponse("Finally", Literal(1)))

    ok = _pipe(TryCatchFinally(_pipe(SetValue("a", Literal(1))), None, fin))
    caught = _pipe(SetValue("nums", Literal(1)),
                   TryCatchFinally(_pipe(_failing_step()),
                                   _pipe(SetValue("handled", Literal(True))), fin))
    uncaught = _pipe(SetValue("nums", Literal(1)),
                     TryCatchFinally(_pipe(_failing_step()), None, fin))

    for pipeline, expected_outcome in ((ok, "completed"), (caught, "completed"),
                                       (uncaught, "failed")):
        result = _run(pipeline)
        assert result.outcome == expected_outcome
        assert any(r.type == "Finally" for r in result.responses)
        fin_trace = [e for e in result.trace if e["step"][-2:] == [2, 0]
                     and e["event"] == "exit"]
        assert fin_trace, result.trace


def test_catch_writes_persist_in_enclosing_scope():
    p = _pipe(SetValue("nums", Literal(1)),
              SetValue("fallback", Literal("untouched")),
              TryCatchFinally(_pipe(_failing_step()),
                              _pipe(SetValue("fallback", Literal("used")))),
              AddResponse("T", VarRef("fallback")))
    result = _run(p)
    assert result.responses[0].content == "used"


def test_do_return_in_try_runs_finally_then_returns():
    p = _pipe(TryCatchFinally(_pipe(DoReturn()), None,
                              _pipe(AddResponse("Finally", Literal(1)))),
              AddResponse("After", Literal(1)))
    result = _run(p)
    assert result.outcome == "returned"
    assert [r.type for r in result.responses] == ["Finally"]


def test_budget_exhaustion_not_catchable():
    p = _pipe(TryCatchFinally(
        try_body=_pipe(SetValue("a", Literal(1)), SetValue("b", Literal(2)),
                       SetValue("c", Literal(3))),
        catch_body=_pipe(AddResponse("Swallowed", Literal(1))),
    ))
    result = execute(p, {}, Registries(), ExecConfig(max_steps=2))
    assert result.outcome == "failed"
    assert result.error["code"] == "BUDGET_EXHAUSTED"
    assert not any(r.type == "Swallowed" for r in result.responses)
    assert result.metrics.steps_executed <= 2


# --------------------------------------------------------------------------
# Budget

def test_steps_executed_never_exceeds_max_steps():
    body = _pipe(SetValue("x", VarRef("item")))
    p = _pipe(PassVariables(("xs",)), ForEach("xs", "item", body))
    result = execute(p, {"xs": list(range(100))}, Registries(), ExecConfig(max_steps=10))
    assert result.outcome == "failed"
    assert result.error["code"] == "BUDGET_EXHAUSTED"
    assert result.metrics.steps_executed <= 10


# --------------------------------------------------------------------------
# Memoization

def test_identical_marshal_twice_hits_cache():
    p = _pipe(PassVariables(("m",)), Marshal("m", "a"), Marshal("m", "a"))
    cfg = ExecConfig(cache=CacheConfig(enabled=True, ttl_ms=1000))
    result = _run(p, {"m": {"k": 1}}, cfg=cfg)
    assert result.metrics.cache_hits == 1
    assert result.final_store["a"] == '{"k":1}'
    hits = [e for e in result.trace if e["event"] == "cacheHit"]
    assert len(hits) == 1


def test_changed_input_misses_cache():
    p = _pipe(PassVariables(("m",)), Marshal("m", "a"),
              SetValue("m", Literal({"k": 2})), Marshal("m", "b"))
    cfg = ExecConfig(cache=CacheConfig(enabled=True, ttl_ms=1000))
    result = _run(p, {"m": {"k": 1}}, cfg=cfg)
    assert result.metrics.cache_hits == 0
    assert result.final_store["b"] == '{"k":2}'


def test_cache_entry_expires_after_ttl():
    registries = Registries()

    def wait(args, ctx):
        ctx.sleep_ms(50)

    registries.register_function(FunctionBinding("wait", 0, wait))
    p = _pipe(PassVariables(("m",)), Marshal("m", "a"),
              FunctionCall("wait", ()), Marshal("m", "a"))
    cfg = ExecConfig(cache=CacheConfig(enabled=True, ttl_ms=30))
    result = _run(p, {"m": {"k": 1}}, registries=registries, cfg=cfg, clock=VirtualClock())
    assert result.outcome == "completed"
    assert result.metrics.cache_hits == 0  # 50ms sleep passed the 30ms TTL

    cfg_long = ExecConfig(cache=CacheConfig(enabled=True, ttl_ms=100))
    result2 = _run(p, {"m": {"k": 1}}, registries=registries, cfg=cfg_long,
                   clock=VirtualClock())
    assert result2.metrics.cache_hits == 1


def test_memo_key_covers_step_and_read_set():
    step_a = Marshal("m", "a")
    assert memo_key(step_a, {"m": {"k": 1}}) == memo_key(step_a, {"m": {"k": 1}})
    assert memo_key(step_a, {"m": {"k": 1}}) != memo_key(step_a, {"m": {"k": 2}})
    assert memo_key(step_a, {"m": {"k": 1}}) != memo_key(Marshal("m", "b"), {"m": {"k": 1}})


def test_pure_function_cache_replays_effects():
    calls = {"n": 0}
    registries = Registries()

    def doubler(args, ctx):
        calls["n"] += 1
        ctx.set("out", args[0] * 2)
        ctx.add_response("Doubled", args[0] * 2)

    registries.register_function(FunctionBinding("doubler", 1, doubler, pure=True))
    p = _pipe(SetValue("x", Literal(3)),
              FunctionCall("doubler", (VarRef("x"),)),
              FunctionCall("doubler", (VarRef("x"),)))
    cfg = ExecConfig(cache=CacheConfig(enabled=True, ttl_ms=1000))
    result = _run(p, registries=registries, cfg=cfg)
    assert calls["n"] == 1
    assert result.metrics.cache_hits == 1
    assert [r.content for r in result.responses] == [6, 6]
    assert result.final_store["out"] == 6


# --------------------------------------------------------------------------
# Response ops

def test_add_then_remove_is_empty():
    p = _pipe(AddResponse("T", Literal(1), "r1"), RemoveResponse("r1"))
    assert _run(p).responses == []


def test_dedupe_keeps_first_occurrence():
    p = _pipe(AddResponse("T", Literal("x")), AddResponse("T", Literal("x")),
              AddResponse("U", Literal("x")))
    result = _run(p, cfg=ExecConfig(dedupe_responses=True))
    assert [(r.type, r.content) for r in result.responses] == [("T", "x"), ("U", "x")]
    assert result.responses[0].id == "r1"


def test_update_keeps_id_and_moves_lineage():
    p = _pipe(AddResponse("T", Literal("old"), "r1"),
              UpdateResponse("r1", Literal("new")))
    result = _run(p)
    assert result.responses[0].id == "r1"
    assert result.responses[0].content == "new"
    assert result.responses[0].meta.lineage == (1,)


def test_unknown_response_id_errors():
    for step in (RemoveResponse("ghost"), UpdateResponse("ghost", Literal(1))):
        result = _run(_pipe(step))
        assert result.error["code"] == "RESPONSE_NOT_FOUND"


def test_clear_responses_and_auto_ids():
    p = _pipe(AddResponse("A", Literal(1)), ClearResponses(),
              AddResponse("B", Literal(2)))
    result = _run(p)
    assert [r.type for r in result.responses] == ["B"]
    assert result.responses[0].id == "r2"  # counter keeps moving forward


def test_duplicate_explicit_response_id_rejected():
    p = _pipe(AddResponse("A", Literal(1), "r1"), AddResponse("B", Literal(2), "r1"))
    result = _run(p)
    assert result.error["code"] == "DUPLICATE_RESPONSE_ID"


# --------------------------------------------------------------------------
# getMapValue strictness

def test_get_map_value_strict_vs_lenient():
    p = _pipe(PassVariables(("m",)), GetMapValue("m", "a.b", "out"))
    strict = _run(p, {"m": {}})
    assert strict.error["code"] == "PATH_NOT_FOUND"
    lenient = _run(p, {"m": {}}, cfg=ExecConfig(strict_interpolation=False))
    assert lenient.outcome == "completed"
    assert lenient.final_store["out"] is None


# --------------------------------------------------------------------------
# Parallel execution

def _parallel_pipe(parallel: bool) -> Pipeline:
    body = _pipe(SetValue("local", Template("${item * 2}")),
                 AddResponse("Double", VarRef("local")))
    return _pipe(PassVariables(("xs",)), ForEach("xs", "item", body, parallel=parallel))


def test_parallel_matches_sequential_responses_and_store():
    inputs = {"xs": [1, 2, 3, 4, 5]}
    seq = _run(_parallel_pipe(False), inputs)
    par = _run(_parallel_pipe(True), inputs,
               cfg=ExecConfig(parallel=ParallelConfig(enabled=True, max_fanout=4)))
    assert [(r.id, r.type, r.content) for r in seq.responses] == \
           [(r.id, r.type, r.content) for r in par.responses]
    assert seq.final_store == par.final_store


def test_parallel_disabled_by_config():
    inputs = {"xs": [1, 2]}
    result = _run(_parallel_pipe(True), inputs,
                  cfg=ExecConfig(parallel=ParallelConfig(enabled=False)))
    assert [r.content for r in result.responses] == [2, 4]


def test_unsafe_hint_falls_back_to_sequential():
    # doReturn in the body is order-dependent; the executor must ignore the hint
    body = _pipe(AddResponse("Tick", VarRef("item")), DoReturn())
    p = _pipe(PassVariables(("xs",)), ForEach("xs", "item", body, parallel=True))
    result = _run(p, {"xs": [1, 2, 3]})
    assert [r.content for r in result.responses] == [1]  # stopped after first


def test_parallel_branch_failure_mirrors_sequential_prefix():
    body = _pipe(SetValue("v", Template("${10 / item}")), AddResponse("T", VarRef("v")))
    p = _pipe(PassVariables(("xs",)), ForEach("xs", "item", body, parallel=True))
    inputs = {"xs": [1, 2, 0, 5]}
    seq = execute(p, inputs, Registries(),
                  ExecConfig(parallel=ParallelConfig(enabled=False)))
    par = execute(p, inputs, Registries(),
                  ExecConfig(parallel=ParallelConfig(enabled=True)))
    assert seq.outcome == par.outcome == "failed"
    assert seq.error["code"] == par.error["code"] == "DIVISION_BY_ZERO"
    assert [(r.content) for r in seq.responses] == [r.content for r in par.responses]


# --------------------------------------------------------------------------
# Determinism

def test_identical_runs_are_byte_identical():
    registries_a = make_corpus_registries()
    registries_b = make_corpus_registries()
    p = generate_pipeline(17)
    inputs = generate_inputs(__import__("random").Random(17))
    r1 = execute(p, inputs, registries_a, corpus_exec_config(), clock=VirtualClock(), seed=5)
    r2 = execute(p, inputs, registries_b, corpus_exec_config(), clock=VirtualClock(), seed=5)
    assert r1.to_json() == r2.to_json()


def test_trace_events_have_enter_exit_pairs():
    p = _pipe(SetValue("x", Literal(1)), AddResponse("T", VarRef("x")))
    result = _run(p)
    events = [(e["step"][0], e["event"]) for e in result.trace]
    assert events == [(0, "enter"), (0, "exit"), (1, "enter"), (1, "exit")]
    assert all(e["op"] for e in result.trace)


def test_validation_refusal_in_strict_mode():
    p = _pipe(AddResponse("T", Template("${ghost}")))
    result = execute(p, {}, Registries(), ExecConfig())
    assert result.outcome == "failed"
    assert result.error["code"] == "VALIDATION_FAILED"


# --------------------------------------------------------------------------
# MemoCache surface and chatRequest caching

def test_memo_cache_lookup_store_and_ttl():
    from agentpipe.executor import MemoCache
    clock = VirtualClock()
    cache = MemoCache(clock, ttl_ms=100)
    key = memo_key(Marshal("m", "a"), {"m": 1})
    assert cache.lookup(key) is None
    cache.store(key, [("a", "1")])
    assert cache.lookup(key) == [("a", "1")]
    clock.sleep_ms(99)
    assert cache.lookup(key) == [("a", "1")]
    clock.sleep_ms(1)
    assert cache.lookup(key) is None  # expired exactly at ttl


def test_chat_request_served_from_shared_cache_across_runs():
    from agentpipe.executor import MemoCache
    from agentpipe.ir import AddMessage, ChatRequest
    from agentpipe.orchestration import LLMBinding, LLMConfig, MockLLMClient, MockScript, MockTurn

    def registries_with(turns):
        registries = Registries()
        registries.register_llm(LLMBinding(client=MockLLMClient(MockScript(turns)),
                                           config=LLMConfig(llm_id="mock")))
        return registries

    p = _pipe(AddMessage("user", Literal("hi")), ChatRequest("mock"))
    cfg = ExecConfig(cache=CacheConfig(enabled=True, ttl_ms=60_000, chat_requests=True))
    clock = VirtualClock()
    shared = MemoCache(clock, ttl_ms=60_000)

    first = execute(p, {}, registries_with((MockTurn(text="reply"),)), cfg,
                    clock=clock, cache=shared)
    assert first.outcome == "completed"
    assert first.metrics.llm_calls == 1

    # second run: identical transcript prefix, empty script; hit must replay
    second = execute(p, {}, registries_with(()), cfg, clock=clock, cache=shared)
    assert second.outcome == "completed"
    assert second.metrics.llm_calls == 0
    assert second.metrics.cache_hits == 1
    assert second.history[-1].content == "reply"
