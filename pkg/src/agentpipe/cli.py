"""Command line surface: validate, run, explain, ab, and bench.

stdout always carries one machine-parseable JSON payload; human-oriented
annotations go to stderr. Exit codes: 0 success, 1 validation errors,
2 runtime failure, 64 usage error.

Runs are offline and reproducible: the LLM backend is the scripted mock
(--llm-script), functions are the bundled demo stubs, and `run` uses a
virtual clock so identical invocations produce byte-identical stdout.
`bench` and `ab` use the real clock to measure wall time.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .analysis import optimize, validate
from .canonical import canonical_json, parse_json
from .errors import EngineError
from .executor import (
    ExecConfig,
    CacheConfig,
    RealClock,
    Registries,
    execute,
)
from .fixtures import demo_tools, make_demo_functions
from .ir import (
    ChatRequest,
    ForEach,
    MarshalMany,
    Pipeline,
    SetValues,
    Step,
    ToolRequest,
    child_bodies,
    count_steps,
    parse_ir,
    step_op_name,
    step_to_jsonable,
)
from .orchestration import LLMBinding, LLMConfig, MockLLMClient, MockScript, ToolParam, ToolSpec
from .registry import ExperimentConfig, ExperimentReport, PipelineRegistry, load_directory
from .registry import route as route_session
from .agent import response_time_bound

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_USAGE = 64

PIPELINE_DIR_ENV = "AGENTIC_PIPELINE_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: A003 - argparse API
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(payload) -> None:
    print(canonical_json(payload))


def _read_file(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        print(f"error: no such file: {path}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return p.read_text(encoding="utf-8")


def _iter_steps(p: Pipeline):
    for step in p.steps:
        yield step
        for body in child_bodies(step):
            yield from _iter_steps(body)


def _collect_llm_ids(pipelines) -> list[str]:
    ids = set()
    for p in pipelines:
        for step in _iter_steps(p):
            if isinstance(step, (ChatRequest, ToolRequest)):
                ids.add(step.llm_id)
    return sorted(ids)


def _load_pipeline_dir(args) -> PipelineRegistry:
    directory = getattr(args, "pipeline_dir", None) or os.environ.get(PIPELINE_DIR_ENV)
    if directory and Path(directory).is_dir():
        return load_directory(directory)
    return PipelineRegistry()


def _parse_tools_file(text: str) -> tuple[list[ToolSpec], list[str]]:
    data = parse_json(text)
    if not isinstance(data, dict):
        raise EngineError("BAD_CONFIG", "tools file must be a JSON object")
    tools = []
    for raw in data.get("tools", []):
        params = tuple(
            ToolParam(str(p["name"]), str(p["type"]), bool(p.get("required", True)))
            for p in raw.get("parameters", [])
        )
        from .ir import pipeline_from_jsonable
        tools.append(ToolSpec(
            name=str(raw["name"]),
            description=str(raw.get("description", "")),
            parameters=params,
            pipeline=pipeline_from_jsonable(raw["pipeline"], strict=False),
        ))
    llm_ids = [str(x) for x in data.get("llms", [])]
    return tools, llm_ids


def _build_registries(pipelines, script: MockScript | None, llm_ids, tools=None,
                      clock=None, stage_latency_ms: float = 0.0,
                      llm_latency_ms: float = 0.0) -> Registries:
    registries = Registries(pipelines=pipelines)
    for binding in make_demo_functions(stage_latency_ms=stage_latency_ms):
        registries.register_function(binding)
    for tool in (tools if tools is not None else demo_tools()):
        registries.register_tool(tool)
    if script is not None:
        client = MockLLMClient(script, clock=clock, latency_ms=llm_latency_ms)
        for llm_id in llm_ids:
            registries.register_llm(LLMBinding(client=client,
                                               config=LLMConfig(llm_id=llm_id)))
    return registries


# --------------------------------------------------------------------------
# Commands

def _cmd_validate(args) -> int:
    text = _read_file(args.pipeline)
    try:
        pipeline = parse_ir(text, strict=True)
    except EngineError as e:
        _emit({"errors": [{"code": e.code, "message": e.message, "stepPath": []}],
               "warnings": []})
        return EXIT_VALIDATION
    tools = None
    llm_ids: list[str] = []
    if args.tools:
        try:
            tools, llm_ids = _parse_tools_file(_read_file(args.tools))
        except EngineError as e:
            print(f"error: bad tools file: {e}", file=sys.stderr)
            return EXIT_USAGE
    registry = _load_pipeline_dir(args)
    registries = _build_registries(registry, None, [], tools=tools)
    sigs = registries.signature_set()
    if llm_ids:
        sigs = type(sigs)(tool_signatures=sigs.tool_signatures,
                          function_arities=sigs.function_arities,
                          llm_ids=frozenset(sigs.llm_ids) | frozenset(llm_ids))
    report = validate(pipeline, sigs, registry)
    _emit(report.to_jsonable())
    if report.errors:
        return EXIT_VALIDATION
    if args.strict and report.warnings:
        return EXIT_VALIDATION
    return EXIT_OK


def _cmd_run(args) -> int:
    text = _read_file(args.pipeline)
    try:
        pipeline = parse_ir(text, strict=True)
    except EngineError as e:
        _emit({"error": {"code": e.code, "message": e.message}})
        return EXIT_VALIDATION
    try:
        inputs = parse_json(args.vars)
    except EngineError as e:
        print(f"error: bad --vars JSON: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not isinstance(inputs, dict):
        print("error: --vars must be a JSON object", file=sys.stderr)
        return EXIT_USAGE

    registry = _load_pipeline_dir(args)
    tools = None
    extra_llm_ids: list[str] = []
    if args.tools:
        try:
            tools, extra_llm_ids = _parse_tools_file(_read_file(args.tools))
        except EngineError as e:
            print(f"error: bad tools file: {e}", file=sys.stderr)
            return EXIT_USAGE
    script = None
    if args.llm_script:
        try:
            script = MockScript.from_json(_read_file(args.llm_script))
        except EngineError as e:
            print(f"error: bad mock script: {e}", file=sys.stderr)
            return EXIT_USAGE

    tool_list = tools if tools is not None else demo_tools()
    all_pipelines = [pipeline] + [p for _, p in registry.items()] \
        + [t.pipeline for t in tool_list]
    llm_ids = sorted(set(_collect_llm_ids(all_pipelines)) | set(extra_llm_ids))
    registries = _build_registries(registry, script, llm_ids, tools=tools)

    if args.optimize:
        pipeline = optimize(pipeline, registries.function_purity(), registry)

    report = validate(pipeline, registries.signature_set(), registry)
    if report.errors:
        _emit(report.to_jsonable())
        return EXIT_VALIDATION

    cfg = ExecConfig(validate_before_run=False)
    result = execute(pipeline, inputs, registries, cfg, seed=args.seed)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for event in result.trace:
                fh.write(canonical_json(event) + "\n")
    print(result.to_json())
    return EXIT_OK if result.outcome in ("completed", "returned") else EXIT_RUNTIME


def _describe_step(step: Step) -> str:
    data = step_to_jsonable(step)
    op = data.pop("op")
    parts = [op]
    for key in ("var", "name", "list", "item", "llm", "type", "id", "from", "to",
                "target", "source", "collection", "query", "path", "pipeline",
                "role", "names", "tools", "pass"):
        if key in data and not isinstance(data[key], (dict,)):
            parts.append(f"{key}={data[key]}")
    return " ".join(str(p) for p in parts)


def _render_tree(pipeline: Pipeline, warn_paths: set[tuple[int, ...]]) -> list[str]:
    lines: list[str] = []

    def walk(p: Pipeline, prefix: tuple[int, ...], indent: int) -> None:
        for i, step in enumerate(p.steps):
            path = prefix + (i,)
            notes = []
            if isinstance(step, ForEach) and step.parallel:
                notes.append("PARALLEL")
            if isinstance(step, SetValues):
                notes.append(f"FUSED x{len(step.assignments)}")
            if isinstance(step, MarshalMany):
                notes.append(f"FUSED x{len(step.to_vars)}")
            if path in warn_paths:
                notes.append("UNREACHABLE")
            suffix = ("  [" + ", ".join(notes) + "]") if notes else ""
            lines.append("  " * indent + f"{i} {_describe_step(step)}" + suffix)
            labels = _body_labels(step)
            for ordinal, body in enumerate(child_bodies(step)):
                lines.append("  " * (indent + 1) + labels[ordinal] + ":")
                walk(body, path + (_label_ordinal(step, labels[ordinal]),), indent + 2)

    walk(pipeline, (), 0)
    return lines


def _body_labels(step: Step) -> list[str]:
    op = step_op_name(step)
    if op == "forEach":
        return ["body"]
    if op == "when":
        return ["then", "else"]
    if op == "tryCatchFinally":
        labels = ["try"]
        data = step_to_jsonable(step)
        if "catch" in data:
            labels.append("catch")
        if "finally" in data:
            labels.append("finally")
        return labels
    return []


def _label_ordinal(step: Step, label: str) -> int:
    return {"body": 0, "then": 0, "else": 1, "try": 0, "catch": 1, "finally": 2}[label]


def _cmd_explain(args) -> int:
    text = _read_file(args.pipeline)
    try:
        pipeline = parse_ir(text, strict=True)
    except EngineError as e:
        _emit({"error": {"code": e.code, "message": e.message}})
        return EXIT_VALIDATION
    registry = _load_pipeline_dir(args)
    purity = {b.name: b.pure for b in make_demo_functions()}
    if args.optimized:
        pipeline = optimize(pipeline, purity, registry)
    report = validate(pipeline, None, registry if len(registry) else None)
    warn_paths = {f.step_path for f in report.warnings if f.code == "UNREACHABLE"}
    lines = _render_tree(pipeline, warn_paths)
    _emit({"name": pipeline.name, "version": pipeline.version, "lines": lines})
    for line in lines:
        print(line, file=sys.stderr)
    return EXIT_OK


def run_ab(exp: ExperimentConfig, sessions: list[dict], pipelines,
           registries_factory=None, jobs: int = 1,
           cfg: ExecConfig | None = None) -> tuple[ExperimentReport, list[str]]:
    """Route each session to a variant, run it, aggregate metrics.

    ``registries_factory(session, pipeline)`` builds fresh registries per
    session; the default wires demo stubs plus the session's llmScript.
    """
    report = ExperimentReport(exp)
    skipped: list[str] = []
    variant_by_name = {v.name: v for v in exp.variants}

    def build_default(session: dict, pipeline: Pipeline) -> Registries:
        script = None
        if session.get("llmScript") is not None:
            script = MockScript.from_jsonable(session["llmScript"])
        llm_ids = _collect_llm_ids([pipeline] + [t.pipeline for t in demo_tools()])
        return _build_registries(pipelines, script, llm_ids)

    factory = registries_factory or build_default

    def run_one(session: dict) -> None:
        key = session.get("sessionKey")
        variables = session.get("vars", {})
        if not isinstance(key, str) or not isinstance(variables, dict):
            skipped.append(f"bad session line: {canonical_json(session)[:80]}")
            return
        variant_name = route_session(exp, key)
        variant = variant_by_name[variant_name]
        pipeline = pipelines.get(variant.pipeline_name)
        if pipeline is None:
            skipped.append(f"{key}: pipeline {variant.pipeline_name!r} not found")
            return
        registries = factory(session, pipeline)
        result = execute(pipeline, variables, registries, cfg or ExecConfig(),
                         clock=RealClock())
        report.record_run(variant_name, result.metrics,
                          success=result.outcome in ("completed", "returned"))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run_one, sessions))
    else:
        for session in sessions:
            run_one(session)
    return report, skipped


def _cmd_ab(args) -> int:
    try:
        exp = ExperimentConfig.from_json(_read_file(args.experiment))
    except (EngineError, KeyError, TypeError, ValueError) as e:
        print(f"error: bad experiment file: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        exp = ExperimentConfig(exp.experiment_id, exp.variants, seed=args.seed)
    sessions = []
    bad_lines = []
    for lineno, line in enumerate(_read_file(args.sessions).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            sessions.append(parse_json(line))
        except EngineError:
            bad_lines.append(f"line {lineno}: not valid JSON")
    registry = _load_pipeline_dir(args)
    report, skipped = run_ab(exp, sessions, registry, jobs=args.jobs)
    payload = report.compare()
    payload["skipped"] = bad_lines + skipped
    _emit(payload)
    for note in bad_lines + skipped:
        print(f"skipped: {note}", file=sys.stderr)
    return EXIT_OK


def _cmd_bench(args) -> int:
    text = _read_file(args.pipeline)
    try:
        pipeline = parse_ir(text, strict=True)
    except EngineError as e:
        _emit({"error": {"code": e.code, "message": e.message}})
        return EXIT_VALIDATION
    registry = _load_pipeline_dir(args)
    script_text = _read_file(args.llm_script) if args.llm_script else None

    walls = []
    per_step_medians = []
    cache_hits = 0
    steps_executed = 0
    tool_calls = 0
    outcome = "completed"
    for _ in range(args.iterations):
        clock = RealClock()
        script = MockScript.from_json(script_text) if script_text else None
        tool_list = demo_tools()
        llm_ids = _collect_llm_ids([pipeline] + [p for _, p in registry.items()]
                                   + [t.pipeline for t in tool_list])
        registries = _build_registries(registry, script, llm_ids, clock=clock,
                                       stage_latency_ms=args.tool_latency,
                                       llm_latency_ms=args.llm_latency)
        cfg = ExecConfig(cache=CacheConfig(enabled=True, ttl_ms=3_600_000.0))
        result = execute(pipeline, {}, registries, cfg, clock=clock, seed=args.seed)
        outcome = result.outcome
        walls.append(result.metrics.wall_time_ms)
        steps_executed = result.metrics.steps_executed
        cache_hits = result.metrics.cache_hits
        tool_calls = result.metrics.tool_calls
        durations = _step_durations(result.trace)
        if durations:
            per_step_medians.append(statistics.median(durations))
    payload = {
        "iterations": args.iterations,
        "outcome": outcome,
        "stepsExecuted": steps_executed,
        "cacheHits": cache_hits,
        "wallMsMedian": statistics.median(walls) if walls else 0.0,
        "perStepOverheadMsMedian": statistics.median(per_step_medians)
        if per_step_medians else 0.0,
    }
    if args.llm_latency > 0 or args.tool_latency > 0:
        bound = response_time_bound(args.llm_latency, len(demo_tools()),
                                    [args.tool_latency] * tool_calls)
        payload["bound"] = {
            "boundMs": bound,
            "measuredMs": payload["wallMsMedian"],
            "withinBound": payload["wallMsMedian"] <= bound,
        }
    _emit(payload)
    return EXIT_OK if outcome in ("completed", "returned") else EXIT_RUNTIME


def _step_durations(trace: list[dict]) -> list[float]:
    open_events: dict[tuple, list[float]] = {}
    durations: list[float] = []
    for event in trace:
        key = tuple(event["step"])
        if event["event"] == "enter":
            open_events.setdefault(key, []).append(event["t"])
        elif event["event"] in ("exit", "error"):
            stack = open_events.get(key)
            if stack:
                durations.append(event["t"] - stack.pop())
    return durations


# --------------------------------------------------------------------------
# Entry point

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agentpipe",
                     description="Declarative agent-pipeline engine CLI")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="statically validate a pipeline file")
    p_validate.add_argument("--pipeline", required=True)
    p_validate.add_argument("--tools")
    p_validate.add_argument("--strict", action="store_true",
                            help="treat warnings as errors for the exit code")
    p_validate.add_argument("--pipeline-dir")
    p_validate.set_defaults(func=_cmd_validate)

    p_run = sub.add_parser("run", help="execute a pipeline with mock backends")
    p_run.add_argument("--pipeline", required=True)
    p_run.add_argument("--vars", default="{}")
    p_run.add_argument("--llm-script")
    p_run.add_argument("--tools")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--optimize", action="store_true")
    p_run.add_argument("--trace")
    p_run.add_argument("--pipeline-dir")
    p_run.set_defaults(func=_cmd_run)

    p_explain = sub.add_parser("explain", help="print the annotated step tree")
    p_explain.add_argument("--pipeline", required=True)
    p_explain.add_argument("--optimized", action="store_true")
    p_explain.add_argument("--pipeline-dir")
    p_explain.set_defaults(func=_cmd_explain)

    p_ab = sub.add_parser("ab", help="route a session corpus through experiment variants")
    p_ab.add_argument("--experiment", required=True)
    p_ab.add_argument("--sessions", required=True)
    p_ab.add_argument("--seed", type=int, default=None)
    p_ab.add_argument("--jobs", type=int, default=1)
    p_ab.add_argument("--pipeline-dir")
    p_ab.set_defaults(func=_cmd_ab)

    p_bench = sub.add_parser("bench", help="measure orchestration overhead")
    p_bench.add_argument("--pipeline", required=True)
    p_bench.add_argument("--iterations", type=int, default=5)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--llm-latency", type=float, default=0.0)
    p_bench.add_argument("--tool-latency", type=float, default=0.0)
    p_bench.add_argument("--llm-script")
    p_bench.add_argument("--pipeline-dir")
    p_bench.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
