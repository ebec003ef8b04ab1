"""Conversation state, LLM client abstraction, and the tool-request loop.

The LLM client contract is one call: ``complete(request) -> raw text``
where request carries model, messages, optional tool schemas, temperature,
and maxTokens. The deterministic mock client consumes a scripted list of
turns strictly in order and is the only backend shipped; real providers
plug in behind the same interface.

Assistant tool calls travel inside the raw text as a JSON object
``{"toolCalls": [{"callId", "toolName", "argsJson"}]}``. Output that looks
like JSON but fails to parse into that shape counts as malformed and is
re-requested against the retry budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .canonical import Value, canonical_json, normalize_value, parse_json
from .errors import EngineError, PipelineRuntimeError, TransientError
from .ir import Pipeline
from .values import coerce, stringify


@dataclass(frozen=True)
class ToolCall:
    call_id: str
    tool_name: str
    args_json: str

    def to_jsonable(self) -> dict:
        return {"callId": self.call_id, "toolName": self.tool_name, "argsJson": self.args_json}


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant | tool
    content: Value
    tool_calls: tuple[ToolCall, ...] | None = None
    tool_call_id: str | None = None

    def to_jsonable(self) -> dict:
        out: dict = {"role": self.role, "content": self.content}
        if self.tool_calls is not None:
            out["toolCalls"] = [tc.to_jsonable() for tc in self.tool_calls]
        if self.tool_call_id is not None:
            out["toolCallId"] = self.tool_call_id
        return out


@dataclass(frozen=True)
class LLMConfig:
    llm_id: str
    model: str = "mock"
    temperature: float = 0.0
    max_tokens: int = 1024
    max_tool_rounds: int = 4

    def __post_init__(self) -> None:
        if self.max_tool_rounds < 1:
            raise EngineError("BAD_CONFIG", "maxToolRounds must be >= 1")


@dataclass(frozen=True)
class ToolParam:
    name: str
    type: str  # string | number | boolean | list | map
    required: bool = True


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: tuple[ToolParam, ...]
    pipeline: Pipeline

    def schema(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": [
                {"name": p.name, "type": p.type, "required": p.required}
                for p in self.parameters
            ],
        }


@dataclass(frozen=True)
class WindowConfig:
    max_messages: int = 7
    summarizer: Callable[[Sequence[Message]], str] | None = None

    def __post_init__(self) -> None:
        if self.max_messages < 1:
            raise EngineError("BAD_CONFIG", "window max_messages must be >= 1")


# --------------------------------------------------------------------------
# Mock LLM backend

@dataclass(frozen=True)
class MockTurn:
    expect: str | None = None
    text: str | None = None
    tool_calls: tuple[ToolCall, ...] | None = None
    malformed: str | None = None
    transport_error: str | None = None


@dataclass(frozen=True)
class MockScript:
    turns: tuple[MockTurn, ...]

    @classmethod
    def from_jsonable(cls, data: Value) -> "MockScript":
        if not isinstance(data, dict) or not isinstance(data.get("turns"), list):
            raise EngineError("BAD_SCRIPT", "mock script must be {\"turns\": [...]}")
        turns = []
        for i, raw in enumerate(data["turns"]):
            if not isinstance(raw, dict) or not isinstance(raw.get("emit"), dict):
                raise EngineError("BAD_SCRIPT", f"turn {i}: missing emit object")
            emit = raw["emit"]
            expect = raw.get("expect")
            if expect is not None and not isinstance(expect, str):
                raise EngineError("BAD_SCRIPT", f"turn {i}: expect must be a string")
            keys = [k for k in ("text", "toolCalls", "malformed", "transportError") if k in emit]
            if len(keys) != 1:
                raise EngineError(
                    "BAD_SCRIPT",
                    f"turn {i}: emit must have exactly one of text/toolCalls/malformed/transportError")
            kind = keys[0]
            if kind == "text":
                turns.append(MockTurn(expect=expect, text=str(emit["text"])))
            elif kind == "malformed":
                turns.append(MockTurn(expect=expect, malformed=str(emit["malformed"])))
            elif kind == "transportError":
                turns.append(MockTurn(expect=expect, transport_error=str(emit["transportError"])))
            else:
                calls = []
                if not isinstance(emit["toolCalls"], list):
                    raise EngineError("BAD_SCRIPT", f"turn {i}: toolCalls must be an array")
                for j, c in enumerate(emit["toolCalls"]):
                    if not isinstance(c, dict):
                        raise EngineError("BAD_SCRIPT", f"turn {i} call {j}: not an object")
                    calls.append(ToolCall(
                        call_id=str(c.get("callId", f"c{i}_{j}")),
                        tool_name=str(c["toolName"]),
                        args_json=str(c.get("argsJson", "{}"))))
                turns.append(MockTurn(expect=expect, tool_calls=tuple(calls)))
        return cls(tuple(turns))

    @classmethod
    def from_json(cls, text: str) -> "MockScript":
        return cls.from_jsonable(parse_json(text))


class MockLLMClient:
    """Deterministic scripted backend; turns are consumed strictly in order."""

    def __init__(self, script: MockScript, clock=None, latency_ms: float = 0.0):
        self.script = script
        self.clock = clock
        self.latency_ms = latency_ms
        self.position = 0

    def complete(self, request: dict) -> str:
        if self.position >= len(self.script.turns):
            raise EngineError("SCRIPT_EXHAUSTED",
                              f"mock script exhausted after {self.position} turns")
        turn = self.script.turns[self.position]
        self.position += 1
        if turn.expect is not None:
            last = _last_user_or_tool(request.get("messages", []))
            if turn.expect not in last:
                raise EngineError(
                    "SCRIPT_EXPECT_MISMATCH",
                    f"turn {self.position - 1} expected {turn.expect!r} in last user/tool "
                    f"message, got {last!r}")
        if self.latency_ms and self.clock is not None:
            self.clock.sleep_ms(self.latency_ms)
        if turn.transport_error is not None:
            raise TransientError(f"transport error: {turn.transport_error}",
                                 code="TRANSPORT_ERROR")
        if turn.text is not None:
            return turn.text
        if turn.malformed is not None:
            return turn.malformed
        return canonical_json({"toolCalls": [tc.to_jsonable() for tc in turn.tool_calls or ()]})


def _last_user_or_tool(messages: Sequence[dict]) -> str:
    for msg in reversed(messages):
        if msg.get("role") in ("user", "tool"):
            return stringify(msg.get("content"))
    return ""


@dataclass
class LLMBinding:
    """A registered LLM: the client plus its configuration."""

    client: object  # anything with complete(request) -> str
    config: LLMConfig
    preprocessor: Callable[[list[Message]], list[Message]] | None = None


def build_request(binding: LLMBinding, history: Sequence[Message],
                  tool_schemas: list[dict] | None = None) -> dict:
    messages = list(history)
    if binding.preprocessor is not None:
        messages = binding.preprocessor(messages)
    request = {
        "model": binding.config.model,
        "messages": [m.to_jsonable() for m in messages],
        "temperature": binding.config.temperature,
        "maxTokens": binding.config.max_tokens,
    }
    if tool_schemas is not None:
        request["toolSchemas"] = tool_schemas
    return request


# --------------------------------------------------------------------------
# Output classification

def classify_output(raw: str) -> tuple[str, object]:
    """('text', str) | ('toolCalls', tuple[ToolCall]) | ('malformed', str)."""
    stripped = raw.strip()
    if not stripped.startswith("{"):
        return ("text", raw)
    try:
        parsed = parse_json(stripped)
    except EngineError:
        return ("malformed", raw)
    if not isinstance(parsed, dict) or "toolCalls" not in parsed:
        return ("malformed", raw)
    calls_raw = parsed["toolCalls"]
    if not isinstance(calls_raw, list) or not calls_raw:
        return ("malformed", raw)
    calls = []
    for c in calls_raw:
        if not isinstance(c, dict):
            return ("malformed", raw)
        call_id = c.get("callId")
        tool_name = c.get("toolName")
        args_json = c.get("argsJson", "{}")
        if not isinstance(call_id, str) or not isinstance(tool_name, str) \
                or not isinstance(args_json, str):
            return ("malformed", raw)
        calls.append(ToolCall(call_id, tool_name, args_json))
    return ("toolCalls", tuple(calls))


def validate_tool_args(tool: ToolSpec, args_json: str) -> dict:
    """Parse and coerce one tool call's arguments against the spec.

    Raises EngineError with a message suitable to feed back to the LLM.
    """
    try:
        raw = parse_json(args_json)
    except EngineError as e:
        raise EngineError("BAD_TOOL_ARGS", f"arguments are not valid JSON: {e.message}") from e
    if not isinstance(raw, dict):
        raise EngineError("BAD_TOOL_ARGS", "arguments must be a JSON object")
    known = {p.name: p for p in tool.parameters}
    extras = sorted(set(raw) - set(known))
    if extras:
        raise EngineError("BAD_TOOL_ARGS", f"unknown parameters {extras} for tool {tool.name!r}")
    out: dict = {}
    for param in tool.parameters:
        if param.name not in raw:
            if param.required:
                raise EngineError("BAD_TOOL_ARGS",
                                  f"missing required parameter {param.name!r} "
                                  f"for tool {tool.name!r}")
            continue
        try:
            out[param.name] = coerce(raw[param.name], param.type)
        except EngineError as e:
            raise EngineError("BAD_TOOL_ARGS",
                              f"parameter {param.name!r}: {e.message}") from e
    return out


# --------------------------------------------------------------------------
# High-level operations

def chat_once(binding: LLMBinding, history: list[Message],
              invoke: Callable[[dict], str]) -> Message:
    """One direct LLM invocation with no tools; appends the assistant reply."""
    request = build_request(binding, history, tool_schemas=None)
    raw = invoke(request)
    message = Message(role="assistant", content=raw)
    history.append(message)
    return message


@dataclass
class ToolLoopHooks:
    """Callbacks the executor supplies to drive one toolRequest."""

    invoke: Callable[[dict], str]                # LLM call (retry-wrapped)
    execute_tool: Callable[[ToolSpec, dict], Value]
    on_malformed_retry: Callable[[], None]
    malformed_budget: int = 2


def run_tool_loop(binding: LLMBinding, history: list[Message],
                  tools: Sequence[ToolSpec], hooks: ToolLoopHooks) -> list[Value]:
    """The invoke -> parse -> execute -> feed-back cycle, bounded by rounds.

    Returns toolResults in call order across all rounds. Unknown tools and
    invalid parameters become error tool-messages so the model can correct
    itself; the loop fails only on rounds or malformed-retry exhaustion.
    """
    tool_index = {t.name: t for t in tools}
    schemas = [t.schema() for t in tools]
    max_rounds = binding.config.max_tool_rounds
    rounds = 0
    malformed_retries = 0
    results: list[Value] = []
    while True:
        if rounds >= max_rounds:
            raise PipelineRuntimeError(
                "ROUNDS_EXHAUSTED",
                f"toolRequest exceeded maxToolRounds={max_rounds} without a final answer")
        raw = hooks.invoke(build_request(binding, history, tool_schemas=schemas))
        kind, payload = classify_output(raw)
        if kind == "malformed":
            malformed_retries += 1
            if malformed_retries > hooks.malformed_budget:
                raise PipelineRuntimeError(
                    "MALFORMED_OUTPUT",
                    f"LLM output unparseable after {malformed_retries - 1} retries: "
                    f"{str(payload)[:80]!r}")
            hooks.on_malformed_retry()
            continue
        if kind == "text":
            history.append(Message(role="assistant", content=payload))
            return results
        rounds += 1
        calls: tuple[ToolCall, ...] = payload  # type: ignore[assignment]
        history.append(Message(role="assistant", content="", tool_calls=calls))
        for call in calls:
            tool = tool_index.get(call.tool_name)
            if tool is None:
                history.append(Message(
                    role="tool",
                    content={"error": f"unknown tool {call.tool_name!r}"},
                    tool_call_id=call.call_id))
                continue
            try:
                args = validate_tool_args(tool, call.args_json)
            except EngineError as e:
                history.append(Message(role="tool", content={"error": e.message},
                                       tool_call_id=call.call_id))
                continue
            try:
                result = hooks.execute_tool(tool, args)
            except PipelineRuntimeError as e:
                history.append(Message(role="tool",
                                       content={"error": f"{e.code}: {e.message}"},
                                       tool_call_id=call.call_id))
                continue
            history.append(Message(role="tool", content=result, tool_call_id=call.call_id))
            results.append(result)


# --------------------------------------------------------------------------
# History pruning

def _stub_summarizer(dropped: Sequence[Message]) -> str:
    parts = [f"{m.role}:{stringify(m.content)[:40]}" for m in dropped]
    return f"SUMMARY(n={len(dropped)}): " + "; ".join(parts)


def prune_history(history: Sequence[Message], window: WindowConfig) -> list[Message]:
    """Sliding-window pruning: keep system messages, summarize the rest.

    Below the window size the history is returned unchanged. Otherwise the
    kept system messages come first, then one summary message covering the
    dropped turns, then the last k non-system messages.
    """
    messages = list(history)
    k = window.max_messages
    if len(messages) <= k:
        return messages
    system = [m for m in messages if m.role == "system"]
    non_system = [m for m in messages if m.role != "system"]
    if len(non_system) <= k and not system:
        return messages
    kept = non_system[-k:] if k < len(non_system) else non_system
    dropped = non_system[:len(non_system) - len(kept)]
    if not dropped:
        return messages
    summarize = window.summarizer or _stub_summarizer
    summary = Message(role="system", content=summarize(dropped))
    return system + [summary] + kept


def transcript_json(history: Sequence[Message]) -> str:
    """Canonical JSON for a message transcript (stable across runs)."""
    return canonical_json([normalize_value(m.to_jsonable()) for m in history])
